//! Synthetic sequence regression with a controllable style shift.
//!
//! A frozen random teacher maps (token one-hot, normalized frame position,
//! style vector) to one output frame. Training and in-domain evaluation draw
//! styles from N(0, I); the out-of-domain split shifts the mean by `shift`
//! along a seeded unit direction.
//!
//! Random streams (see [`crate::rng`]): the teacher and the shift direction
//! derive from the teacher seed; lengths, tokens, styles and noise of a split
//! derive from the split seed, one stream each.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention::Lengths;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInput};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const TEACHER_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    In,
    Ood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    /// Distance between the in-domain and out-of-domain style means.
    pub shift: f64,
    /// Standard deviation of styles around their mean.
    pub style_scale: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_eval_in: usize,
    pub n_eval_ood: usize,
    pub teacher_seed: u64,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            shift: 3.0,
            style_scale: 1.0,
            min_len: 8,
            max_len: 16,
            noise_std: 0.01,
            n_train: 2000,
            n_eval_in: 200,
            n_eval_ood: 200,
            teacher_seed: 0,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} must be finite and >= 0")))
            }
        };
        nonneg("data.shift", self.shift)?;
        nonneg("data.style_scale", self.style_scale)?;
        nonneg("data.noise_std", self.noise_std)?;
        if self.min_len == 0 {
            return Err(Error::config("data.min_len", "must be at least 1"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config(
                "data.max_len",
                format!("{} is below min_len {}", self.max_len, self.min_len),
            ));
        }
        for (field, n) in [
            ("data.n_train", self.n_train),
            ("data.n_eval_in", self.n_eval_in),
            ("data.n_eval_ood", self.n_eval_ood),
        ] {
            if n == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Split seeds: train, in-domain eval and OOD eval never share streams.
    pub fn split_seed(&self, split: Split) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::EvalIn => 1,
            Split::EvalOod => 2,
        };
        self.seed.wrapping_mul(3).wrapping_add(offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    EvalIn,
    EvalOod,
}

/// Frozen two-layer tanh network producing target frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    vocab_size: usize,
    style_dim: usize,
    out_dim: usize,
    /// `[vocab + 1 + style_dim, hidden]`: token rows, position row, style rows.
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    /// Unit vector along which OOD styles are shifted.
    shift_direction: Vec<f64>,
}

fn normal(rng: &mut impl Rng, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * scale
}

impl Teacher {
    /// Token and position weights are N(0, 1) and style weights
    /// N(0, 1/style_dim) so each input group contributes unit variance to
    /// the hidden pre-activation before the 1/√3 rescale.
    pub fn new(vocab_size: usize, style_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::Teacher);
        let input = vocab_size + 1 + style_dim;
        let style_scale = 1.0 / (style_dim as f64).sqrt();
        let mut w1 = Vec::with_capacity(input * TEACHER_HIDDEN);
        for row in 0..input {
            let scale = if row <= vocab_size { 1.0 } else { style_scale };
            for _ in 0..TEACHER_HIDDEN {
                w1.push(normal(&mut rng, scale / 3f64.sqrt()));
            }
        }
        let b1 = (0..TEACHER_HIDDEN).map(|_| normal(&mut rng, 0.1)).collect();
        let out_scale = 1.0 / (TEACHER_HIDDEN as f64).sqrt();
        let w2 = (0..TEACHER_HIDDEN * out_dim)
            .map(|_| normal(&mut rng, out_scale))
            .collect();
        let b2 = (0..out_dim).map(|_| normal(&mut rng, 0.1)).collect();

        let mut dir_rng = stream(seed, Purpose::ShiftDirection);
        let mut dir: Vec<f64> = (0..style_dim).map(|_| normal(&mut dir_rng, 1.0)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);

        let t = |shape: Vec<usize>, data| Tensor::new(shape, data).expect("shape matches");
        Self {
            vocab_size,
            style_dim,
            out_dim,
            w1: t(vec![input, TEACHER_HIDDEN], w1),
            b1: t(vec![TEACHER_HIDDEN], b1),
            w2: t(vec![TEACHER_HIDDEN, out_dim], w2),
            b2: t(vec![out_dim], b2),
            shift_direction: dir,
        }
    }

    pub fn for_model(cfg: &ModelConfig, seed: u64) -> Self {
        Self::new(cfg.vocab_size, cfg.style_dim, cfg.out_dim, seed)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn shift_direction(&self) -> &[f64] {
        &self.shift_direction
    }

    /// One frame for `token` at normalized position `pos` ∈ [0, 1].
    pub fn frame(&self, token: usize, pos: f64, style: &[f64]) -> Result<Vec<f64>> {
        if token >= self.vocab_size {
            return Err(Error::Vocabulary {
                token,
                vocab_size: self.vocab_size,
            });
        }
        if style.len() != self.style_dim {
            return Err(Error::ShapeMismatch {
                op: "teacher",
                lhs: vec![style.len()],
                rhs: vec![self.style_dim],
            });
        }
        let h = TEACHER_HIDDEN;
        let w1 = self.w1.data();
        let mut hidden = self.b1.data().to_vec();
        let mut add_row = |row: usize, x: f64| {
            for (acc, w) in hidden.iter_mut().zip(&w1[row * h..(row + 1) * h]) {
                *acc += x * w;
            }
        };
        add_row(token, 1.0);
        add_row(self.vocab_size, pos);
        for (k, &s) in style.iter().enumerate() {
            add_row(self.vocab_size + 1 + k, s);
        }
        let mut out = self.b2.data().to_vec();
        let w2 = self.w2.data();
        for (j, a) in hidden.iter().enumerate() {
            let a = a.tanh();
            for (o, w) in out.iter_mut().zip(&w2[j * self.out_dim..(j + 1) * self.out_dim]) {
                *o += a * w;
            }
        }
        Ok(out)
    }

    /// Noise-free targets `[tokens.len()·r, out_dim]`, row-major.
    pub fn targets(&self, tokens: &[usize], style: &[f64], r: usize) -> Result<Vec<f64>> {
        let frames = tokens.len() * r;
        let denom = frames.saturating_sub(1).max(1) as f64;
        let mut out = Vec::with_capacity(frames * self.out_dim);
        for f in 0..frames {
            out.extend(self.frame(tokens[f / r], f as f64 / denom, style)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub style: Vec<f64>,
    /// `[tokens.len()·r, out_dim]`, row-major.
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub expansion: usize,
    pub out_dim: usize,
    pub style_dim: usize,
}

/// Draws `n` sequences. Identical seeds give identical token, length, style
/// and noise draws for both domains, so `shift == 0` reproduces the
/// in-domain split exactly.
pub fn sample_dataset(
    teacher: &Teacher,
    domain: Domain,
    spec: &DomainSpec,
    expansion: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if expansion == 0 {
        return Err(Error::config("model.expansion", "must be at least 1"));
    }
    let mut len_rng = stream(seed, Purpose::Lengths);
    let mut tok_rng = stream(seed, Purpose::Tokens);
    let mut style_rng = stream(seed, Purpose::Styles);
    let mut noise_rng = stream(seed, Purpose::Noise);
    let shift = match domain {
        Domain::In => 0.0,
        Domain::Ood => spec.shift,
    };
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let len = len_rng.random_range(spec.min_len..=spec.max_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| tok_rng.random_range(0..teacher.vocab_size))
            .collect();
        let style: Vec<f64> = teacher
            .shift_direction
            .iter()
            .map(|d| shift * d + normal(&mut style_rng, spec.style_scale))
            .collect();
        let mut targets = teacher.targets(&tokens, &style, expansion)?;
        for t in &mut targets {
            // Drawn even at zero std so the stream position never depends on it.
            *t += normal(&mut noise_rng, spec.noise_std);
        }
        sequences.push(Sequence {
            tokens,
            style,
            targets,
        });
    }
    Ok(Dataset {
        sequences,
        expansion,
        out_dim: teacher.out_dim,
        style_dim: teacher.style_dim,
    })
}

/// The three splits of one experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub eval_in: Dataset,
    pub eval_ood: Dataset,
}

impl Splits {
    pub fn generate(cfg: &ModelConfig, spec: &DomainSpec) -> Result<Self> {
        Ok(Self {
            train: Self::one(cfg, spec, Split::Train)?,
            eval_in: Self::one(cfg, spec, Split::EvalIn)?,
            eval_ood: Self::one(cfg, spec, Split::EvalOod)?,
        })
    }

    /// A single split, identical to the matching field of `generate`.
    pub fn one(cfg: &ModelConfig, spec: &DomainSpec, split: Split) -> Result<Dataset> {
        let teacher = Teacher::for_model(cfg, spec.teacher_seed);
        let (domain, n) = match split {
            Split::Train => (Domain::In, spec.n_train),
            Split::EvalIn => (Domain::In, spec.n_eval_in),
            Split::EvalOod => (Domain::Ood, spec.n_eval_ood),
        };
        sample_dataset(&teacher, domain, spec, cfg.expansion, n, spec.split_seed(split))
    }
}

/// Model input plus padded targets and the valid-frame indicator.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: ModelInput,
    /// `[batch, frames, out_dim]`, zero on padded frames.
    pub targets: Tensor,
    /// `[batch, frames, out_dim]`, 1 on valid frames.
    pub frame_weights: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.input.lens.batch()
    }

    /// Number of valid target scalars.
    pub fn valid_count(&self) -> usize {
        let r = self.targets.shape()[1] / self.input.lens.padded();
        self.input.lens.valid().iter().sum::<usize>() * r * self.targets.shape()[2]
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Pads the selected sequences to the longest one with token 0.
    pub fn collate(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let seqs: Vec<&Sequence> = indices.iter().map(|&i| &self.sequences[i]).collect();
        let valid: Vec<usize> = seqs.iter().map(|s| s.tokens.len()).collect();
        let n = *valid.iter().max().expect("non-empty");
        let b = seqs.len();
        let (r, o) = (self.expansion, self.out_dim);
        let frames = n * r;
        let mut tokens = vec![0; b * n];
        let mut styles = Vec::with_capacity(b * self.style_dim);
        let mut targets = vec![0.0; b * frames * o];
        let mut weights = vec![0.0; b * frames * o];
        for (i, s) in seqs.iter().enumerate() {
            tokens[i * n..i * n + s.tokens.len()].copy_from_slice(&s.tokens);
            styles.extend_from_slice(&s.style);
            let start = i * frames * o;
            targets[start..start + s.targets.len()].copy_from_slice(&s.targets);
            weights[start..start + s.targets.len()].fill(1.0);
        }
        Ok(Batch {
            input: ModelInput {
                tokens,
                styles: Tensor::new(vec![b, self.style_dim], styles)?,
                lens: Lengths::new(valid, n)?,
            },
            targets: Tensor::new(vec![b, frames, o], targets)?,
            frame_weights: Tensor::new(vec![b, frames, o], weights)?,
        })
    }

    /// Sequence indices grouped by token length, ascending.
    pub fn by_length(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.sequences.iter().enumerate() {
            groups.entry(s.tokens.len()).or_default().push(i);
        }
        groups
    }

    /// Deterministic equal-length batches covering every sequence once.
    pub fn eval_batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        let mut out = Vec::new();
        for idx in self.by_length().values() {
            for chunk in idx.chunks(batch_size.max(1)) {
                out.push(self.collate(chunk)?);
            }
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = Vec::with_capacity(3 * self.len());
        for (i, s) in self.sequences.iter().enumerate() {
            let tokens = s.tokens.iter().map(|&t| t as f64).collect();
            tensors.push((format!("seq.{i}.tokens"), Tensor::vector(tokens)));
            tensors.push((format!("seq.{i}.style"), Tensor::vector(s.style.clone())));
            let frames = s.targets.len() / self.out_dim;
            let targets = Tensor::new(vec![frames, self.out_dim], s.targets.clone())
                .expect("targets are frames × out_dim");
            tensors.push((format!("seq.{i}.targets"), targets));
        }
        Container {
            meta: json!({
                "kind": "dataset",
                "expansion": self.expansion,
                "out_dim": self.out_dim,
                "style_dim": self.style_dim,
                "sequences": self.len(),
            }),
            tensors,
            scalars: Vec::new(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.meta_str("kind")? != "dataset" {
            return Err(Error::Format("container does not hold a dataset".into()));
        }
        let field = |k: &str| {
            c.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("metadata field `{k}` missing")))
        };
        let (expansion, out_dim, style_dim, n) = (
            field("expansion")?,
            field("out_dim")?,
            field("style_dim")?,
            field("sequences")?,
        );
        if c.tensors.len() != 3 * n {
            return Err(Error::Format(format!(
                "{} tensors for {n} sequences",
                c.tensors.len()
            )));
        }
        let mut sequences = Vec::with_capacity(n);
        for (i, chunk) in c.tensors.chunks_exact(3).enumerate() {
            let names = [
                format!("seq.{i}.tokens"),
                format!("seq.{i}.style"),
                format!("seq.{i}.targets"),
            ];
            for ((name, _), want) in chunk.iter().zip(&names) {
                if name != want {
                    return Err(Error::Format(format!("expected tensor {want}, found {name}")));
                }
            }
            let tokens: Vec<usize> = chunk[0].1.data().iter().map(|&t| t as usize).collect();
            if chunk[2].1.shape() != [tokens.len() * expansion, out_dim]
                || chunk[1].1.numel() != style_dim
            {
                return Err(Error::Format(format!("sequence {i} has inconsistent shapes")));
            }
            sequences.push(Sequence {
                tokens,
                style: chunk[1].1.data().to_vec(),
                targets: chunk[2].1.data().to_vec(),
            });
        }
        Ok(Self {
            sequences,
            expansion,
            out_dim,
            style_dim,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}
