//! Scalar-loop reference implementation of masked multi-head self-attention
//! and the pre-norm feed-forward block, written independently of the tape.
//! One sequence at a time; matrices are `Vec<Vec<f64>>` rows.

#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug)]
pub enum OracleMask {
    None,
    /// Union over heads of `A ≥ row mean over valid keys`.
    Vanilla,
    Hard(f64),
    Soft(f64, f64),
}

pub struct OracleAttention {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub heads: usize,
    pub head_dim: usize,
}

pub struct OracleBlock {
    pub attn: OracleAttention,
    pub ln1: (Vec<f64>, Vec<f64>),
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub ln2: (Vec<f64>, Vec<f64>),
}

pub fn mat_from(data: &[f64], rows: usize, cols: usize) -> Mat {
    (0..rows).map(|r| data[r * cols..(r + 1) * cols].to_vec()).collect()
}

/// `x · w` for `x` rows of length `w.len()`.
pub fn project(x: &Mat, w: &Mat) -> Mat {
    let cols = w[0].len();
    x.iter()
        .map(|row| {
            (0..cols)
                .map(|c| {
                    let mut s = 0.0;
                    for (k, xv) in row.iter().enumerate() {
                        s += xv * w[k][c];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Per-head attention probabilities `[head][i][j]`; keys `j ≥ valid` get 0.
pub fn probs(x: &Mat, p: &OracleAttention, valid: usize) -> Vec<Mat> {
    let n = x.len();
    let q = project(x, &p.w_q);
    let k = project(x, &p.w_k);
    let scale = (p.head_dim as f64).sqrt();
    (0..p.heads)
        .map(|h| {
            let cols = h * p.head_dim..(h + 1) * p.head_dim;
            (0..n)
                .map(|i| {
                    let scores: Vec<f64> = (0..valid)
                        .map(|j| {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / scale
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let mut row = vec![0.0; n];
                    for j in 0..valid {
                        row[j] = exps[j] / z;
                    }
                    row
                })
                .collect()
        })
        .collect()
}

/// Mask values `[head][i][j]` over the valid region; zero elsewhere.
pub fn mask(a: &[Mat], kind: OracleMask, valid: usize) -> Option<Vec<Mat>> {
    let n = a[0].len();
    let heads = a.len();
    let mut m = vec![vec![vec![0.0; n]; n]; heads];
    match kind {
        OracleMask::None => return None,
        OracleMask::Vanilla => {
            for i in 0..valid {
                for j in 0..valid {
                    let any = (0..heads).any(|h| {
                        let mean = a[h][i][..valid].iter().sum::<f64>() / valid as f64;
                        a[h][i][j] >= mean
                    });
                    for mh in m.iter_mut() {
                        mh[i][j] = if any { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        OracleMask::Hard(theta) => {
            let t = theta / valid as f64;
            for h in 0..heads {
                for i in 0..valid {
                    for j in 0..valid {
                        m[h][i][j] = if a[h][i][j] >= t { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        OracleMask::Soft(theta, temp) => {
            let t = theta / valid as f64;
            for h in 0..heads {
                for i in 0..valid {
                    for j in 0..valid {
                        m[h][i][j] = 1.0 / (1.0 + (-(a[h][i][j] - t) / temp).exp());
                    }
                }
            }
        }
    }
    Some(m)
}

/// `concat_h((mask_h ⊙ A_h) V_h) · W_o`.
pub fn attention(x: &Mat, p: &OracleAttention, valid: usize, kind: OracleMask) -> Mat {
    let n = x.len();
    let a = probs(x, p, valid);
    let m = mask(&a, kind, valid);
    let v = project(x, &p.w_v);
    let inner = p.heads * p.head_dim;
    let mut concat = vec![vec![0.0; inner]; n];
    for h in 0..p.heads {
        for i in 0..n {
            for c in 0..p.head_dim {
                let col = h * p.head_dim + c;
                let mut s = 0.0;
                for j in 0..n {
                    let w = match &m {
                        Some(m) => m[h][i][j] * a[h][i][j],
                        None => a[h][i][j],
                    };
                    s += w * v[j][col];
                }
                concat[i][col] = s;
            }
        }
    }
    project(&concat, &p.w_o)
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) * inv * gain[k] + bias[k])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// `y = x + attn(LN(x))`, `out = y + W2·relu(W1·LN(y) + b1) + b2`.
pub fn block(x: &Mat, p: &OracleBlock, valid: usize, kind: OracleMask, eps: f64) -> Mat {
    let h = layer_norm(x, &p.ln1.0, &p.ln1.1, eps);
    let y = add(x, &attention(&h, &p.attn, valid, kind));
    let h = layer_norm(&y, &p.ln2.0, &p.ln2.1, eps);
    let mut f = project(&h, &p.w1);
    for row in &mut f {
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v + p.b1[k]).max(0.0);
        }
    }
    let mut f = project(&f, &p.w2);
    for row in &mut f {
        for (k, v) in row.iter_mut().enumerate() {
            *v += p.b2[k];
        }
    }
    add(&y, &f)
}
