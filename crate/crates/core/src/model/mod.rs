//! Toy non-autoregressive encoder/decoder of feed-forward transformer blocks.
//!
//! tokens → embedding + position + style → encoder blocks → fixed-rate length
//! expansion → position + style → decoder blocks → linear frame projection.
//! Pruning is applied to the self-attention of the stacks selected by
//! [`PruneScope`].

mod config;
mod params;

pub use config::{ModelConfig, PruneScope, Stack};
pub use params::{
    FeedForwardParams, FeedForwardVars, FftBlockParams, FftBlockVars, ModelParams, ModelVars,
};

use serde::{Deserialize, Serialize};

use crate::attention::{self, AppliedMask, AttentionOutput, Lengths, MaskPolicy};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    None,
    Vanilla,
    Differentiable,
}

/// One learnable threshold per pruned layer, shared by that layer's heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdParams {
    pub theta: Vec<f64>,
}

impl ThresholdParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            theta: vec![0.0; config.num_pruned_layers()],
        }
    }
}

/// Pruning applied during one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum PruneCtx<'a> {
    None,
    Vanilla,
    /// Hard masks at fixed thresholds (second phase and inference).
    Hard(&'a [f64]),
    /// Soft masks with thresholds on the tape (first phase).
    Soft { theta: &'a [Var], temperature: f64 },
}

impl PruneCtx<'_> {
    /// Mask policy for every block: encoder blocks first, then decoder.
    pub fn policies(&self, cfg: &ModelConfig) -> Result<Vec<MaskPolicy>> {
        let pruned = cfg.pruned_layers();
        let count = match self {
            PruneCtx::Hard(t) => Some(t.len()),
            PruneCtx::Soft { theta, .. } => Some(theta.len()),
            _ => None,
        };
        if let Some(c) = count {
            if c != pruned.len() {
                return Err(Error::contract(format!(
                    "{c} thresholds for {} pruned layers",
                    pruned.len()
                )));
            }
        }
        let mut out = Vec::with_capacity(cfg.enc_layers + cfg.dec_layers);
        let layers = (0..cfg.enc_layers)
            .map(|l| (Stack::Encoder, l))
            .chain((0..cfg.dec_layers).map(|l| (Stack::Decoder, l)));
        for layer in layers {
            let slot = pruned.iter().position(|p| *p == layer);
            let policy = match (self, slot) {
                (_, None) | (PruneCtx::None, _) => MaskPolicy::None,
                (PruneCtx::Vanilla, Some(_)) => MaskPolicy::Vanilla,
                (PruneCtx::Hard(t), Some(i)) => MaskPolicy::Hard { theta: t[i] },
                (PruneCtx::Soft { theta, temperature }, Some(i)) => MaskPolicy::Soft {
                    theta: theta[i],
                    temperature: *temperature,
                },
            };
            out.push(policy);
        }
        Ok(out)
    }
}

/// Padded token batch with per-sequence style vectors.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `batch × padded` token ids, row-major; padding uses id 0.
    pub tokens: Vec<usize>,
    /// `[batch, style_dim]`.
    pub styles: Tensor,
    pub lens: Lengths,
}

/// Sinusoidal position table `[n, dim]`.
pub fn positional_encoding(n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; n * dim];
    for pos in 0..n {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, dim], data).expect("shape matches")
}

/// `x + positions + styles·w_style` broadcast over every position.
fn add_position_and_style(tape: &mut Tape, x: Var, styles: Var, w_style: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let pe = tape.constant(positional_encoding(n, d));
    let x = tape.add(x, pe)?;
    let style = tape.matmul(styles, w_style)?;
    let style = tape.reshape(style, &[b, 1, d])?;
    let style = tape.repeat_rows(style, n)?;
    tape.add(x, style)
}

/// Token embedding plus positional encoding plus projected style.
pub fn embed_and_condition(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    input: &ModelInput,
) -> Result<Var> {
    let (b, n) = (input.lens.batch(), input.lens.padded());
    if input.tokens.len() != b * n {
        return Err(Error::contract(format!(
            "{} tokens for a {b}×{n} batch",
            input.tokens.len()
        )));
    }
    if input.styles.shape() != [b, cfg.style_dim] {
        return Err(Error::ShapeMismatch {
            op: "embed_and_condition",
            lhs: input.styles.shape().to_vec(),
            rhs: vec![b, cfg.style_dim],
        });
    }
    let rows = tape.gather_rows(vars.embedding, &input.tokens)?;
    let x = tape.reshape(rows, &[b, n, cfg.model_dim])?;
    let styles = tape.constant(input.styles.clone());
    add_position_and_style(tape, x, styles, vars.enc_style)
}

/// Repeat each position `r` times: `[b, n, d]` → `[b, n·r, d]`.
pub fn length_expand(tape: &mut Tape, h: Var, r: usize) -> Result<Var> {
    tape.repeat_rows(h, r)
}

/// Pre-norm block: `y = x + attn(LN(x))`, `out = y + FFN(LN(y))`.
pub fn fft_block(
    tape: &mut Tape,
    x: Var,
    block: &FftBlockVars,
    lens: &Lengths,
    policy: &MaskPolicy,
) -> Result<(Var, AttentionOutput)> {
    let h = tape.layer_norm(x, block.ln1_gain, block.ln1_bias, LN_EPS)?;
    let attn = attention::self_attention(tape, h, &block.attn, lens, policy)?;
    let y = tape.add(x, attn.out)?;
    let h = tape.layer_norm(y, block.ln2_gain, block.ln2_bias, LN_EPS)?;
    let f = tape.matmul(h, block.ffn.w1)?;
    let f = tape.add(f, block.ffn.b1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, block.ffn.w2)?;
    let f = tape.add(f, block.ffn.b2)?;
    let out = tape.add(y, f)?;
    Ok((out, attn))
}

/// Attention record of one block from a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub stack: Stack,
    pub index: usize,
    pub pruned: bool,
    pub probs: Var,
    pub mask: AppliedMask,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch, frames, out_dim]`.
    pub pred: Var,
    pub layers: Vec<LayerTrace>,
    pub token_lens: Lengths,
    pub frame_lens: Lengths,
}

impl ForwardOutput {
    /// Traces of pruned layers in threshold order.
    pub fn pruned(&self) -> impl Iterator<Item = &LayerTrace> {
        self.layers.iter().filter(|l| l.pruned)
    }

    pub fn lens_for(&self, stack: Stack) -> &Lengths {
        match stack {
            Stack::Encoder => &self.token_lens,
            Stack::Decoder => &self.frame_lens,
        }
    }
}

pub fn model_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    input: &ModelInput,
    ctx: &PruneCtx,
) -> Result<ForwardOutput> {
    let policies = ctx.policies(cfg)?;
    let (enc_policies, dec_policies) = policies.split_at(cfg.enc_layers);
    let mut layers = Vec::with_capacity(policies.len());

    let token_lens = input.lens.clone();
    let mut x = embed_and_condition(tape, vars, cfg, input)?;
    for (l, (block, policy)) in vars.encoder.iter().zip(enc_policies).enumerate() {
        let (out, attn) = fft_block(tape, x, block, &token_lens, policy)?;
        x = out;
        layers.push(LayerTrace {
            stack: Stack::Encoder,
            index: l,
            pruned: cfg.prunes(Stack::Encoder),
            probs: attn.probs,
            mask: attn.mask,
        });
    }

    let frame_lens = token_lens.expanded(cfg.expansion);
    let x = length_expand(tape, x, cfg.expansion)?;
    let styles = tape.constant(input.styles.clone());
    let mut x = add_position_and_style(tape, x, styles, vars.dec_style)?;
    for (l, (block, policy)) in vars.decoder.iter().zip(dec_policies).enumerate() {
        let (out, attn) = fft_block(tape, x, block, &frame_lens, policy)?;
        x = out;
        layers.push(LayerTrace {
            stack: Stack::Decoder,
            index: l,
            pruned: cfg.prunes(Stack::Decoder),
            probs: attn.probs,
            mask: attn.mask,
        });
    }

    let pred = tape.matmul(x, vars.out_w)?;
    let pred = tape.add(pred, vars.out_b)?;
    Ok(ForwardOutput {
        pred,
        layers,
        token_lens,
        frame_lens,
    })
}
