use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which self-attention stacks are pruned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    DecoderOnly,
    EncoderOnly,
    Both,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_hidden: usize,
    /// Frames per token produced by the length expander.
    pub expansion: usize,
    pub out_dim: usize,
    pub style_dim: usize,
    pub prune_scope: PruneScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            model_dim: 64,
            heads: 2,
            enc_layers: 4,
            dec_layers: 4,
            ffn_hidden: 256,
            expansion: 4,
            out_dim: 16,
            style_dim: 8,
            prune_scope: PruneScope::DecoderOnly,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.vocab_size", self.vocab_size),
            ("model.model_dim", self.model_dim),
            ("model.heads", self.heads),
            ("model.ffn_hidden", self.ffn_hidden),
            ("model.expansion", self.expansion),
            ("model.out_dim", self.out_dim),
            ("model.style_dim", self.style_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(
                "model.model_dim",
                format!("{} is not divisible by {} heads", self.model_dim, self.heads),
            ));
        }
        Ok(())
    }

    pub fn prunes(&self, stack: Stack) -> bool {
        matches!(
            (self.prune_scope, stack),
            (PruneScope::Both, _)
                | (PruneScope::EncoderOnly, Stack::Encoder)
                | (PruneScope::DecoderOnly, Stack::Decoder)
        )
    }

    /// Pruned layers in forward order: encoder blocks, then decoder blocks.
    pub fn pruned_layers(&self) -> Vec<(Stack, usize)> {
        let mut out = Vec::new();
        if self.prunes(Stack::Encoder) {
            out.extend((0..self.enc_layers).map(|l| (Stack::Encoder, l)));
        }
        if self.prunes(Stack::Decoder) {
            out.extend((0..self.dec_layers).map(|l| (Stack::Decoder, l)));
        }
        out
    }

    pub fn num_pruned_layers(&self) -> usize {
        self.pruned_layers().len()
    }
}
