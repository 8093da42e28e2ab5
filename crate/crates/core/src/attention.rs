//! Multi-head self-attention with pruning masks.
//!
//! Probabilities `A` have shape `[batch, heads, n, n]`. Masks of every kind
//! share that shape; head-shared masks are stored broadcast to all heads.
//! Masked attention multiplies `A` by the mask and feeds the product to the
//! values directly, so pruned rows may sum to less than one.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Valid (unpadded) lengths of the sequences in a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lengths {
    valid: Vec<usize>,
    padded: usize,
}

impl Lengths {
    pub fn new(valid: Vec<usize>, padded: usize) -> Result<Self> {
        if valid.is_empty() {
            return Err(Error::contract("batch without sequences"));
        }
        for &v in &valid {
            if v == 0 {
                return Err(Error::EmptySequence);
            }
            if v > padded {
                return Err(Error::contract(format!(
                    "valid length {v} exceeds padded length {padded}"
                )));
            }
        }
        Ok(Self { valid, padded })
    }

    pub fn uniform(batch: usize, n: usize) -> Result<Self> {
        Self::new(vec![n; batch], n)
    }

    pub fn batch(&self) -> usize {
        self.valid.len()
    }

    pub fn padded(&self) -> usize {
        self.padded
    }

    pub fn valid(&self) -> &[usize] {
        &self.valid
    }

    pub fn is_padded(&self) -> bool {
        self.valid.iter().any(|&v| v != self.padded)
    }

    /// Lengths after repeating every position `r` times.
    pub fn expanded(&self, r: usize) -> Self {
        Self {
            valid: self.valid.iter().map(|v| v * r).collect(),
            padded: self.padded * r,
        }
    }

    /// `[batch, heads, n, n]` additive logits: `-inf` at padded keys, else 0.
    pub fn key_bias(&self, heads: usize) -> Tensor {
        let n = self.padded;
        let mut data = Vec::with_capacity(self.batch() * heads * n * n);
        for &v in &self.valid {
            for _ in 0..heads * n {
                data.extend((0..n).map(|j| if j < v { 0.0 } else { f64::NEG_INFINITY }));
            }
        }
        Tensor::new(vec![self.batch(), heads, n, n], data).expect("shape matches")
    }

    /// `[batch, heads, n, n]` indicator of valid (query, key) pairs.
    pub fn pair_indicator(&self, heads: usize) -> Tensor {
        let n = self.padded;
        let mut data = Vec::with_capacity(self.batch() * heads * n * n);
        for &v in &self.valid {
            for _ in 0..heads {
                for i in 0..n {
                    data.extend((0..n).map(|j| if i < v && j < v { 1.0 } else { 0.0 }));
                }
            }
        }
        Tensor::new(vec![self.batch(), heads, n, n], data).expect("shape matches")
    }

    /// `[batch, n, 1]` indicator of valid positions.
    pub fn position_indicator(&self) -> Tensor {
        let n = self.padded;
        let data = self
            .valid
            .iter()
            .flat_map(|&v| (0..n).map(move |i| if i < v { 1.0 } else { 0.0 }))
            .collect();
        Tensor::new(vec![self.batch(), n, 1], data).expect("shape matches")
    }
}

/// Projection weights of one self-attention layer, stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn validate(&self) -> Result<()> {
        let inner = self.heads * self.head_dim;
        let model_dim = self.w_q.shape().first().copied().unwrap_or(0);
        for (name, w, want) in [
            ("w_q", &self.w_q, [model_dim, inner]),
            ("w_k", &self.w_k, [model_dim, inner]),
            ("w_v", &self.w_v, [model_dim, inner]),
            ("w_o", &self.w_o, [inner, model_dim]),
        ] {
            if w.shape() != want {
                return Err(Error::contract(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AttentionVars {
            w_q: leaf(&self.w_q),
            w_k: leaf(&self.w_k),
            w_v: leaf(&self.w_v),
            w_o: leaf(&self.w_o),
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }
}

/// [`AttentionParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Per-head mean-threshold mask.
    Vanilla,
    /// Union of the per-head vanilla masks, shared by all heads.
    OrCombined,
    /// Binary mask at a threshold `theta / n`.
    Hard,
    /// Sigmoid relaxation of the hard mask.
    Soft,
}

impl MaskKind {
    pub fn is_binary(self) -> bool {
        !matches!(self, MaskKind::Soft)
    }
}

/// Mask values `[batch, heads, n, n]` treated as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMask {
    pub values: Tensor,
    pub kind: MaskKind,
}

impl SparseMask {
    pub fn heads(&self) -> usize {
        self.values.shape()[1]
    }

    /// One single-head mask `[batch, 1, n, n]` per head.
    pub fn split_heads(&self) -> Vec<SparseMask> {
        let s = self.values.shape();
        let (b, h, n) = (s[0], s[1], s[2]);
        let block = n * n;
        (0..h)
            .map(|head| {
                let mut data = Vec::with_capacity(b * block);
                for bi in 0..b {
                    let off = (bi * h + head) * block;
                    data.extend_from_slice(&self.values.data()[off..off + block]);
                }
                SparseMask {
                    values: Tensor::new(vec![b, 1, n, n], data).expect("shape matches"),
                    kind: self.kind,
                }
            })
            .collect()
    }
}

fn probs_dims(probs: &Tensor, lens: &Lengths) -> Result<(usize, usize, usize)> {
    match probs.shape() {
        &[b, h, n, n2] if n == n2 && b == lens.batch() && n == lens.padded() => Ok((b, h, n)),
        other => Err(Error::contract(format!(
            "attention probabilities of shape {other:?} for {} sequences of length {}",
            lens.batch(),
            lens.padded()
        ))),
    }
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize, head_dim: usize, perm: &[usize]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n) = (s[0], s[1]);
    let r = tape.reshape(x, &[b, n, heads, head_dim])?;
    tape.permute(r, perm)
}

fn check_input(tape: &Tape, x: Var, p: &AttentionVars, lens: &Lengths) -> Result<()> {
    let s = tape.shape(x);
    let d = tape.shape(p.w_q)[0];
    if s.len() != 3 || s[0] != lens.batch() || s[1] != lens.padded() || s[2] != d {
        return Err(Error::ShapeMismatch {
            op: "self_attention",
            lhs: s.to_vec(),
            rhs: vec![lens.batch(), lens.padded(), d],
        });
    }
    Ok(())
}

/// `softmax(Q_h K_hᵀ / √d)` per head with padded keys excluded.
///
/// `x` is `[batch, n, model_dim]`; the result is `[batch, heads, n, n]`.
pub fn attention_probs(tape: &mut Tape, x: Var, p: &AttentionVars, lens: &Lengths) -> Result<Var> {
    check_input(tape, x, p, lens)?;
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let q = split_heads(tape, q, p.heads, p.head_dim, &[0, 2, 1, 3])?;
    let kt = split_heads(tape, k, p.heads, p.head_dim, &[0, 2, 3, 1])?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (p.head_dim as f64).sqrt());
    if lens.is_padded() {
        let bias = tape.constant(lens.key_bias(p.heads));
        scores = tape.add(scores, bias)?;
    }
    tape.softmax_rows(scores)
}

/// Per-head values `[batch, heads, n, head_dim]`.
pub fn value_heads(tape: &mut Tape, x: Var, p: &AttentionVars) -> Result<Var> {
    let v = tape.matmul(x, p.w_v)?;
    split_heads(tape, v, p.heads, p.head_dim, &[0, 2, 1, 3])
}

/// Vanilla per-head mask: 1 where `A(i,j)` is at least the mean of row `i`
/// over the valid keys.
pub fn vanilla_mask(probs: &Tensor, lens: &Lengths) -> Result<SparseMask> {
    let (b, h, n) = probs_dims(probs, lens)?;
    let mut out = vec![0.0; probs.numel()];
    let a = probs.data();
    for bi in 0..b {
        let v = lens.valid()[bi];
        for hi in 0..h {
            for i in 0..v {
                let row = ((bi * h + hi) * n + i) * n;
                let mean = a[row..row + v].iter().sum::<f64>() / v as f64;
                for j in 0..v {
                    if a[row + j] >= mean {
                        out[row + j] = 1.0;
                    }
                }
            }
        }
    }
    Ok(SparseMask {
        values: Tensor::new(probs.shape().to_vec(), out)?,
        kind: MaskKind::Vanilla,
    })
}

/// Union of single-head vanilla masks, replicated to one head per input.
pub fn or_combine(masks: &[SparseMask]) -> Result<SparseMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::contract("or_combine of an empty mask list"))?;
    let shape = first.values.shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::contract(format!(
            "or_combine expects single-head masks, got {shape:?}"
        )));
    }
    for m in masks {
        if m.values.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "or_combine",
                lhs: shape,
                rhs: m.values.shape().to_vec(),
            });
        }
        if m.kind != MaskKind::Vanilla {
            return Err(Error::contract(format!("or_combine of a {:?} mask", m.kind)));
        }
    }
    let block = shape[2] * shape[3];
    let mut union = vec![0.0; first.values.numel()];
    for m in masks {
        for (u, &v) in union.iter_mut().zip(m.values.data()) {
            if v == 1.0 {
                *u = 1.0;
            }
        }
    }
    let h = masks.len();
    let mut data = Vec::with_capacity(union.len() * h);
    for chunk in union.chunks_exact(block) {
        for _ in 0..h {
            data.extend_from_slice(chunk);
        }
    }
    Ok(SparseMask {
        values: Tensor::new(vec![shape[0], h, shape[2], shape[3]], data)?,
        kind: MaskKind::OrCombined,
    })
}

/// Vanilla masks of every head combined by union and shared across heads.
pub fn head_union_mask(probs: &Tensor, lens: &Lengths) -> Result<SparseMask> {
    or_combine(&vanilla_mask(probs, lens)?.split_heads())
}

/// Binary mask keeping entries with `A(i,j) >= theta / valid_len`.
pub fn hard_mask(probs: &Tensor, theta: f64, lens: &Lengths) -> Result<SparseMask> {
    if !theta.is_finite() {
        return Err(Error::NonFinite(format!("threshold {theta}")));
    }
    let (b, h, n) = probs_dims(probs, lens)?;
    let a = probs.data();
    let mut out = vec![0.0; probs.numel()];
    for bi in 0..b {
        let v = lens.valid()[bi];
        let threshold = theta / v as f64;
        for hi in 0..h {
            for i in 0..v {
                let row = ((bi * h + hi) * n + i) * n;
                for j in 0..v {
                    if a[row + j] >= threshold {
                        out[row + j] = 1.0;
                    }
                }
            }
        }
    }
    Ok(SparseMask {
        values: Tensor::new(probs.shape().to_vec(), out)?,
        kind: MaskKind::Hard,
    })
}

/// `sigmoid((A - theta / valid_len) / temperature)`, differentiable in both
/// `A` and the scalar `theta`.
pub fn soft_mask(
    tape: &mut Tape,
    probs: Var,
    theta: Var,
    temperature: f64,
    lens: &Lengths,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature {temperature} must be > 0")));
    }
    if tape.value(theta).numel() != 1 {
        return Err(Error::contract("threshold must be a scalar"));
    }
    let (b, h, n) = probs_dims(tape.value(probs), lens)?;
    let inv_len: Vec<f64> = lens
        .valid()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(1.0 / v as f64, h * n * n))
        .collect();
    let inv_len = tape.constant(Tensor::new(vec![b, h, n, n], inv_len)?);
    let threshold = tape.mul(theta, inv_len)?;
    let z = tape.sub(probs, threshold)?;
    let z = tape.scale(z, 1.0 / temperature);
    Ok(tape.sigmoid(z))
}

/// Mean mask value over valid pairs, heads and sequences.
///
/// For binary masks this is the active fraction.
pub fn sparsity_of(mask: &SparseMask, lens: &Lengths) -> Result<f64> {
    let (_, h, _) = probs_dims(&mask.values, lens)?;
    let ind = lens.pair_indicator(h);
    let total: f64 = mask
        .values
        .data()
        .iter()
        .zip(ind.data())
        .map(|(m, w)| m * w)
        .sum();
    let count: f64 = ind.data().iter().sum();
    Ok(total / count)
}

/// Per-(sequence, head) mean of a mask on the tape, over valid pairs only.
///
/// Returns `[batch, heads]`.
pub fn head_means(tape: &mut Tape, mask: Var, lens: &Lengths) -> Result<Var> {
    let s = tape.shape(mask).to_vec();
    let (b, h, n) = (s[0], s[1], s[2]);
    let ind = tape.constant(lens.pair_indicator(h));
    let valid = tape.mul(mask, ind)?;
    let flat = tape.reshape(valid, &[b, h, n * n])?;
    let mean = tape.mean_axis(flat, 2)?;
    let rescale: Vec<f64> = lens
        .valid()
        .iter()
        .flat_map(|&v| std::iter::repeat_n((n * n) as f64 / (v * v) as f64, h))
        .collect();
    let rescale = tape.constant(Tensor::new(vec![b, h], rescale)?);
    tape.mul(mean, rescale)
}

/// Mask applied to attention probabilities.
#[derive(Clone, Debug)]
pub enum AppliedMask {
    None,
    Fixed(SparseMask),
    Soft(Var),
}

impl AppliedMask {
    pub fn kind(&self) -> Option<MaskKind> {
        match self {
            AppliedMask::None => None,
            AppliedMask::Fixed(m) => Some(m.kind),
            AppliedMask::Soft(_) => Some(MaskKind::Soft),
        }
    }

    /// Current mask values, if any.
    pub fn values<'a>(&'a self, tape: &'a Tape) -> Option<&'a Tensor> {
        match self {
            AppliedMask::None => None,
            AppliedMask::Fixed(m) => Some(&m.values),
            AppliedMask::Soft(v) => Some(tape.value(*v)),
        }
    }
}

/// `concat_h((mask_h ⊙ A_h) V_h) · W_o` without renormalizing masked rows.
pub fn attend(
    tape: &mut Tape,
    probs: Var,
    values: Var,
    mask: &AppliedMask,
    w_o: Var,
) -> Result<Var> {
    let pruned = match mask {
        AppliedMask::None => probs,
        AppliedMask::Fixed(m) => {
            if m.values.shape() != tape.shape(probs) {
                return Err(Error::ShapeMismatch {
                    op: "masked_attention",
                    lhs: tape.shape(probs).to_vec(),
                    rhs: m.values.shape().to_vec(),
                });
            }
            let c = tape.constant(m.values.clone());
            tape.mul(probs, c)?
        }
        AppliedMask::Soft(m) => tape.mul(probs, *m)?,
    };
    let o = tape.matmul(pruned, values)?;
    let s = tape.shape(o).to_vec();
    let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[b, n, h * d])?;
    tape.matmul(o, w_o)
}

/// Multi-head self-attention with an optional precomputed constant mask.
pub fn masked_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    lens: &Lengths,
    mask: Option<&SparseMask>,
) -> Result<Var> {
    let probs = attention_probs(tape, x, p, lens)?;
    let values = value_heads(tape, x, p)?;
    let mask = match mask {
        Some(m) => AppliedMask::Fixed(m.clone()),
        None => AppliedMask::None,
    };
    attend(tape, probs, values, &mask, p.w_o)
}

/// How a layer builds its mask from the current probabilities.
#[derive(Clone, Copy, Debug)]
pub enum MaskPolicy {
    None,
    /// Head-union of per-row mean masks.
    Vanilla,
    /// Binary mask at a fixed threshold.
    Hard { theta: f64 },
    /// Sigmoid mask with a learnable threshold on the tape.
    Soft { theta: Var, temperature: f64 },
}

impl MaskPolicy {
    pub fn expected_kind(&self) -> Option<MaskKind> {
        match self {
            MaskPolicy::None => None,
            MaskPolicy::Vanilla => Some(MaskKind::OrCombined),
            MaskPolicy::Hard { .. } => Some(MaskKind::Hard),
            MaskPolicy::Soft { .. } => Some(MaskKind::Soft),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Var,
    pub mask: AppliedMask,
}

/// Self-attention whose mask is rebuilt from this pass's probabilities.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    lens: &Lengths,
    policy: &MaskPolicy,
) -> Result<AttentionOutput> {
    let probs = attention_probs(tape, x, p, lens)?;
    let values = value_heads(tape, x, p)?;
    let mask = match *policy {
        MaskPolicy::None => AppliedMask::None,
        MaskPolicy::Vanilla => AppliedMask::Fixed(head_union_mask(tape.value(probs), lens)?),
        MaskPolicy::Hard { theta } => AppliedMask::Fixed(hard_mask(tape.value(probs), theta, lens)?),
        MaskPolicy::Soft { theta, temperature } => {
            AppliedMask::Soft(soft_mask(tape, probs, theta, temperature, lens)?)
        }
    };
    if mask.kind() != policy.expected_kind() {
        return Err(Error::contract(format!(
            "{:?} mask under {:?} policy",
            mask.kind(),
            policy
        )));
    }
    let out = attend(tape, probs, values, &mask, p.w_o)?;
    Ok(AttentionOutput { out, probs, mask })
}
