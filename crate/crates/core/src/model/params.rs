use rand::Rng;

use super::config::ModelConfig;
use crate::attention::{AttentionParams, AttentionVars};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FftBlockParams {
    pub attn: AttentionParams,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ffn: FeedForwardParams,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// All trainable weights of the encoder/decoder. Thresholds live apart in
/// [`crate::model::ThresholdParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub enc_style: Tensor,
    pub encoder: Vec<FftBlockParams>,
    pub dec_style: Tensor,
    pub decoder: Vec<FftBlockParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FftBlockVars {
    pub attn: AttentionVars,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ffn: FeedForwardVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub enc_style: Var,
    pub encoder: Vec<FftBlockVars>,
    pub dec_style: Var,
    pub decoder: Vec<FftBlockVars>,
    pub out_w: Var,
    pub out_b: Var,
}

impl ModelVars {
    /// Vars in the same order as [`ModelParams::named`].
    pub fn in_order(&self) -> Vec<Var> {
        let mut out = vec![self.embedding, self.enc_style];
        for b in &self.encoder {
            out.extend(block_vars(b));
        }
        out.push(self.dec_style);
        for b in &self.decoder {
            out.extend(block_vars(b));
        }
        out.extend([self.out_w, self.out_b]);
        out
    }
}

fn block_vars(b: &FftBlockVars) -> [Var; 12] {
    [
        b.attn.w_q,
        b.attn.w_k,
        b.attn.w_v,
        b.attn.w_o,
        b.ln1_gain,
        b.ln1_bias,
        b.ffn.w1,
        b.ffn.b1,
        b.ffn.w2,
        b.ffn.b2,
        b.ln2_gain,
        b.ln2_bias,
    ]
}

const BLOCK_FIELDS: [&str; 12] = [
    "attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "ln1.gain", "ln1.bias", "ffn.w1", "ffn.b1",
    "ffn.w2", "ffn.b2", "ln2.gain", "ln2.bias",
];

impl FftBlockParams {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.attn.w_q,
            &self.attn.w_k,
            &self.attn.w_v,
            &self.attn.w_o,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ffn.w1,
            &self.ffn.b1,
            &self.ffn.w2,
            &self.ffn.b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.attn.w_q,
            &mut self.attn.w_k,
            &mut self.attn.w_v,
            &mut self.attn.w_o,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ffn.w1,
            &mut self.ffn.b1,
            &mut self.ffn.w2,
            &mut self.ffn.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_hidden;
        Self {
            attn: AttentionParams {
                w_q: uniform_weight(rng, d, d),
                w_k: uniform_weight(rng, d, d),
                w_v: uniform_weight(rng, d, d),
                w_o: uniform_weight(rng, d, d),
                heads: cfg.heads,
                head_dim: cfg.head_dim(),
            },
            ln1_gain: Tensor::full([d], 1.0),
            ln1_bias: Tensor::zeros([d]),
            ffn: FeedForwardParams {
                w1: uniform_weight(rng, d, f),
                b1: Tensor::zeros([f]),
                w2: uniform_weight(rng, f, d),
                b2: Tensor::zeros([d]),
            },
            ln2_gain: Tensor::full([d], 1.0),
            ln2_bias: Tensor::zeros([d]),
        }
    }

    /// Register every tensor as a trainable leaf (or constant).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> FftBlockVars {
        self.register_with("block", tape, &mut |_, t, tape| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    fn register_with(
        &self,
        prefix: &str,
        tape: &mut Tape,
        leaf: &mut dyn FnMut(&str, &Tensor, &mut Tape) -> Var,
    ) -> FftBlockVars {
        let t = self.tensors();
        let mut v = [None; 12];
        for i in 0..12 {
            v[i] = Some(leaf(&format!("{prefix}.{}", BLOCK_FIELDS[i]), t[i], tape));
        }
        let v = v.map(|x| x.expect("filled"));
        FftBlockVars {
            attn: AttentionVars {
                w_q: v[0],
                w_k: v[1],
                w_v: v[2],
                w_o: v[3],
                heads: self.attn.heads,
                head_dim: self.attn.head_dim,
            },
            ln1_gain: v[4],
            ln1_bias: v[5],
            ffn: FeedForwardVars {
                w1: v[6],
                b1: v[7],
                w2: v[8],
                b2: v[9],
            },
            ln2_gain: v[10],
            ln2_bias: v[11],
        }
    }
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`, stored `[fan_in, fan_out]`.
fn uniform_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl ModelParams {
    /// Seeded initialization. Embedding rows are read one at a time, so the
    /// table uses fan-in 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Purpose::Init);
        let d = config.model_dim;
        let embedding = uniform(&mut rng, &[config.vocab_size, d], 1.0);
        let enc_style = uniform_weight(&mut rng, config.style_dim, d);
        let encoder = (0..config.enc_layers)
            .map(|_| FftBlockParams::init(config, &mut rng))
            .collect();
        let dec_style = uniform_weight(&mut rng, config.style_dim, d);
        let decoder = (0..config.dec_layers)
            .map(|_| FftBlockParams::init(config, &mut rng))
            .collect();
        let out_w = uniform_weight(&mut rng, d, config.out_dim);
        Ok(Self {
            config: config.clone(),
            embedding,
            enc_style,
            encoder,
            dec_style,
            decoder,
            out_w,
            out_b: Tensor::zeros([config.out_dim]),
        })
    }

    /// Stable names and tensors in registration order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("enc.style".to_string(), &self.enc_style),
        ];
        for (l, b) in self.encoder.iter().enumerate() {
            for (f, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                out.push((format!("enc.{l}.{f}"), t));
            }
        }
        out.push(("dec.style".to_string(), &self.dec_style));
        for (l, b) in self.decoder.iter().enumerate() {
            for (f, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                out.push((format!("dec.{l}.{f}"), t));
            }
        }
        out.push(("out.w".to_string(), &self.out_w));
        out.push(("out.b".to_string(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding, &mut self.enc_style];
        for b in &mut self.encoder {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.dec_style);
        for b in &mut self.decoder {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every tensor as a trainable leaf (or constant).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        self.register_with(tape, &mut |_, t, tape| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Register with a caller-chosen leaf constructor keyed by tensor name.
    pub fn register_with(
        &self,
        tape: &mut Tape,
        leaf: &mut dyn FnMut(&str, &Tensor, &mut Tape) -> Var,
    ) -> ModelVars {
        let embedding = leaf("embedding", &self.embedding, tape);
        let enc_style = leaf("enc.style", &self.enc_style, tape);
        let encoder = self
            .encoder
            .iter()
            .enumerate()
            .map(|(l, b)| b.register_with(&format!("enc.{l}"), tape, leaf))
            .collect();
        let dec_style = leaf("dec.style", &self.dec_style, tape);
        let decoder = self
            .decoder
            .iter()
            .enumerate()
            .map(|(l, b)| b.register_with(&format!("dec.{l}"), tape, leaf))
            .collect();
        let out_w = leaf("out.w", &self.out_w, tape);
        let out_b = leaf("out.b", &self.out_b, tape);
        ModelVars {
            embedding,
            enc_style,
            encoder,
            dec_style,
            decoder,
            out_w,
            out_b,
        }
    }

    /// Rebuild from named tensors, checking every shape against `config`.
    pub fn from_named(config: &ModelConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (slot, ((name, shape), (got_name, got))) in params
            .tensors_mut()
            .into_iter()
            .zip(expected.iter().zip(tensors.drain(..)))
        {
            if *name != got_name || got.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {got_name} {:?} does not match {name} {shape:?}",
                    got.shape()
                )));
            }
            *slot = got;
        }
        Ok(params)
    }
}
