//! Sparsity regularizer, two-phase schedule and the optimizer loop.
//!
//! Differentiable pruning trains in two phases. Phase 1 applies sigmoid
//! masks, adds the sparsity loss and updates the thresholds together with the
//! weights. Phase 2 applies hard masks at the thresholds reached, drops the
//! sparsity loss and freezes the thresholds. `none` and `vanilla` modes run a
//! single phase on the task loss alone.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention::{self, AppliedMask, Lengths, MaskKind};
use crate::container::Container;
use crate::data::{Batch, Dataset, Splits};
use crate::error::{Error, Result};
use crate::model::{
    model_forward, ForwardOutput, LayerTrace, ModelConfig, ModelParams, PruneCtx, PruneMode,
    ThresholdParams,
};
use crate::rng::{stream, Purpose};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub mode: PruneMode,
    /// Target soft-mask mean.
    pub ratio: f64,
    pub temperature: f64,
    pub lambda_sp: f64,
    pub phase1_steps: usize,
    pub total_steps: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            mode: PruneMode::Differentiable,
            ratio: 0.45,
            temperature: 0.01,
            lambda_sp: 1.0,
            phase1_steps: 2000,
            total_steps: 10000,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::config("prune.ratio", format!("{} is not in (0, 1)", self.ratio)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "prune.temperature",
                format!("{} must be finite and > 0", self.temperature),
            ));
        }
        if !(self.lambda_sp >= 0.0 && self.lambda_sp.is_finite()) {
            return Err(Error::config(
                "prune.lambda_sp",
                format!("{} must be finite and >= 0", self.lambda_sp),
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::config("prune.total_steps", "must be at least 1"));
        }
        if self.mode == PruneMode::Differentiable && self.phase1_steps >= self.total_steps {
            return Err(Error::config(
                "prune.phase1_steps",
                format!(
                    "{} must be below total_steps {}",
                    self.phase1_steps, self.total_steps
                ),
            ));
        }
        Ok(())
    }

    /// Phase of the 0-based step `step`.
    pub fn phase_of(&self, step: usize) -> Phase {
        if self.mode == PruneMode::Differentiable && step >= self.phase1_steps {
            Phase::Two
        } else {
            Phase::One
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 16,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be finite and > 0"));
        }
        for (field, b) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("{b} is not in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be > 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("optim.clip_norm", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub prune: PruneConfig,
    pub optim: OptimConfig,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            prune: PruneConfig::default(),
            optim: OptimConfig::default(),
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prune.validate()?;
        self.optim.validate()?;
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// Mean squared error over valid frames only.
pub fn task_loss(tape: &mut Tape, pred: Var, batch: &Batch) -> Result<Var> {
    let target = tape.constant(batch.targets.clone());
    if !batch.input.lens.is_padded() {
        return tape.mse(pred, target);
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let w = tape.constant(batch.frame_weights.clone());
    let sq = tape.mul(sq, w)?;
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / batch.valid_count() as f64))
}

/// `mean over layers and heads of (head mean − ratio)²`.
///
/// A head's mean is its soft-mask mean over valid pairs, averaged over the
/// sequences of the batch.
pub fn sparsity_loss(
    tape: &mut Tape,
    masks: &[(&AppliedMask, &Lengths)],
    ratio: f64,
) -> Result<Var> {
    if masks.is_empty() {
        return Err(Error::contract("sparsity loss over zero layers"));
    }
    let mut total: Option<Var> = None;
    for (mask, lens) in masks {
        let AppliedMask::Soft(m) = mask else {
            return Err(Error::contract(format!(
                "sparsity loss needs soft masks, got {:?}",
                mask.kind()
            )));
        };
        let per_seq = attention::head_means(tape, *m, lens)?;
        let per_head = tape.mean_axis(per_seq, 0)?;
        let dev = tape.shift(per_head, -ratio);
        let sq = tape.square(dev);
        let layer = tape.mean_all(sq);
        total = Some(match total {
            None => layer,
            Some(t) => tape.add(t, layer)?,
        });
    }
    let total = total.expect("at least one layer");
    Ok(tape.scale(total, 1.0 / masks.len() as f64))
}

/// Task loss, plus the weighted sparsity loss in phase 1 of differentiable
/// pruning.
pub fn total_loss(
    tape: &mut Tape,
    task: Var,
    sp: Option<Var>,
    phase: Phase,
    prune: &PruneConfig,
) -> Result<Var> {
    match (prune.mode, phase, sp) {
        (PruneMode::Differentiable, Phase::One, Some(sp)) => {
            let weighted = tape.scale(sp, prune.lambda_sp);
            tape.add(task, weighted)
        }
        (PruneMode::Differentiable, Phase::One, None) => {
            Err(Error::contract("phase 1 needs the sparsity loss"))
        }
        _ => Ok(task),
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    /// One moment slot per parameter, sized `sizes[i]`.
    pub fn new(cfg: &OptimConfig, sizes: &[usize]) -> Self {
        Self {
            cfg: cfg.clone(),
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advance the shared step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], grad_scale: f64) {
        let c = &self.cfg;
        let t = self.t.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i] * grad_scale;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

/// Factor that brings the global norm of `grads` down to `clip_norm`.
pub fn clip_scale(grads: &[&[f64]], clip_norm: f64) -> (f64, f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    (norm, scale)
}

/// Equal-length training batches, reshuffled every epoch.
///
/// Each epoch shuffles every length group, cuts it into batches of at most
/// `batch_size`, and shuffles the batch order.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    batch_size: usize,
    queue: VecDeque<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(seed: u64, batch_size: usize) -> Self {
        Self {
            rng: stream(seed, Purpose::Batches),
            batch_size,
            queue: VecDeque::new(),
        }
    }

    pub fn next_indices(&mut self, data: &Dataset) -> Result<Vec<usize>> {
        if self.queue.is_empty() {
            if data.is_empty() {
                return Err(Error::contract("empty training set"));
            }
            let mut epoch = Vec::new();
            for mut idx in data.by_length().into_values() {
                idx.shuffle(&mut self.rng);
                epoch.extend(idx.chunks(self.batch_size).map(<[usize]>::to_vec));
            }
            epoch.shuffle(&mut self.rng);
            self.queue.extend(epoch);
        }
        Ok(self.queue.pop_front().expect("refilled"))
    }
}

/// Mean and range of mask values over valid pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub binary: bool,
}

pub fn mask_stats(values: &Tensor, lens: &Lengths) -> MaskStats {
    let h = values.shape()[1];
    let ind = lens.pair_indicator(h);
    let (mut sum, mut count) = (0.0, 0.0);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut binary = true;
    for (&v, &w) in values.data().iter().zip(ind.data()) {
        if w == 0.0 {
            continue;
        }
        sum += v;
        count += 1.0;
        min = min.min(v);
        max = max.max(v);
        binary &= v == 0.0 || v == 1.0;
    }
    MaskStats {
        mean: sum / count,
        min,
        max,
        binary,
    }
}

/// Layer-level monitoring of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    /// Hard-mask active fraction at the current threshold (1 when unpruned).
    pub active_frac: f64,
    /// Statistics of the mask actually applied, if any.
    pub applied: Option<MaskStats>,
}

fn layer_stats(
    tape: &Tape,
    out: &ForwardOutput,
    trace: &LayerTrace,
    theta: Option<f64>,
) -> Result<LayerStats> {
    let lens = out.lens_for(trace.stack);
    let applied = trace.mask.values(tape).map(|v| mask_stats(v, lens));
    let active_frac = match (&trace.mask, theta) {
        (AppliedMask::None, _) => 1.0,
        (AppliedMask::Fixed(m), _) if m.kind == MaskKind::Hard || theta.is_none() => {
            applied.expect("fixed mask").mean
        }
        (_, Some(t)) => {
            let hard = attention::hard_mask(tape.value(trace.probs), t, lens)?;
            attention::sparsity_of(&hard, lens)?
        }
        (_, None) => return Err(Error::contract("soft mask without a threshold")),
    };
    Ok(LayerStats {
        active_frac,
        applied,
    })
}

fn pruned_stats(
    tape: &Tape,
    out: &ForwardOutput,
    mode: PruneMode,
    theta: &[f64],
) -> Result<Vec<LayerStats>> {
    out.pruned()
        .enumerate()
        .map(|(i, trace)| {
            let t = (mode == PruneMode::Differentiable).then(|| theta[i]);
            layer_stats(tape, out, trace, t)
        })
        .collect()
}

/// One row of training metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based count of completed optimizer steps.
    pub step: usize,
    pub phase: Phase,
    pub task_loss: f64,
    pub sp_loss: Option<f64>,
    /// Thresholds after this step's update (differentiable mode only).
    pub theta: Option<Vec<f64>>,
    pub layers: Vec<LayerStats>,
    pub grad_norm: f64,
    pub eval: Option<EvalPair>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPair {
    pub eval_in: f64,
    pub eval_ood: f64,
}

/// Result of evaluating a model on one split with inference masks.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    /// Mean squared error over all valid target scalars.
    pub loss: f64,
    /// Active fraction per pruned layer, weighted by valid pairs.
    pub active_frac: Vec<f64>,
    /// Whether every applied mask was binary.
    pub masks_binary: bool,
}

/// Mask applied at inference for a mode.
pub fn inference_ctx<'a>(mode: PruneMode, theta: &'a ThresholdParams) -> PruneCtx<'a> {
    match mode {
        PruneMode::None => PruneCtx::None,
        PruneMode::Vanilla => PruneCtx::Vanilla,
        PruneMode::Differentiable => PruneCtx::Hard(&theta.theta),
    }
}

pub fn evaluate(
    params: &ModelParams,
    theta: &ThresholdParams,
    mode: PruneMode,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalSummary> {
    let cfg = &params.config;
    let ctx = inference_ctx(mode, theta);
    let layers = cfg.num_pruned_layers();
    let (mut loss_sum, mut loss_count) = (0.0, 0.0);
    let mut frac_sum = vec![0.0; layers];
    let mut frac_weight = vec![0.0; layers];
    let mut masks_binary = true;
    for batch in data.eval_batches(batch_size)? {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let out = model_forward(&mut tape, &vars, cfg, &batch.input, &ctx)?;
        let loss = task_loss(&mut tape, out.pred, &batch)?;
        let count = batch.valid_count() as f64;
        loss_sum += tape.value(loss).item()? * count;
        loss_count += count;
        let stats = pruned_stats(&tape, &out, mode, &theta.theta)?;
        for (i, (s, trace)) in stats.iter().zip(out.pruned()).enumerate() {
            let lens = out.lens_for(trace.stack);
            let pairs: f64 = lens.valid().iter().map(|&v| (v * v) as f64).sum();
            frac_sum[i] += s.active_frac * pairs;
            frac_weight[i] += pairs;
            masks_binary &= s.applied.is_none_or(|a| a.binary);
        }
    }
    Ok(EvalSummary {
        loss: loss_sum / loss_count,
        active_frac: frac_sum.iter().zip(&frac_weight).map(|(s, w)| s / w).collect(),
        masks_binary,
    })
}

/// Soft-mask mean per pruned layer over a whole split at fixed thresholds.
pub fn soft_mask_means(
    params: &ModelParams,
    theta: &ThresholdParams,
    temperature: f64,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let layers = cfg.num_pruned_layers();
    let mut sum = vec![0.0; layers];
    let mut weight = vec![0.0; layers];
    for batch in data.eval_batches(batch_size)? {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let th: Vec<Var> = theta
            .theta
            .iter()
            .map(|&t| tape.constant(Tensor::scalar(t)))
            .collect();
        let ctx = PruneCtx::Soft {
            theta: &th,
            temperature,
        };
        let out = model_forward(&mut tape, &vars, cfg, &batch.input, &ctx)?;
        for (i, trace) in out.pruned().enumerate() {
            let lens = out.lens_for(trace.stack);
            let values = trace.mask.values(&tape).expect("soft mask");
            let pairs: f64 = lens.valid().iter().map(|&v| (v * v) as f64).sum();
            sum[i] += mask_stats(values, lens).mean * pairs;
            weight[i] += pairs;
        }
    }
    Ok(sum.iter().zip(&weight).map(|(s, w)| s / w).collect())
}

/// Trainable state plus the optimizer and batch stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub theta: ThresholdParams,
    adam: Adam,
    sampler: BatchSampler,
    step: usize,
}

impl Trainer {
    /// Fresh model initialized from `seed`; thresholds start at 0.
    pub fn new(config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config.model, seed)?;
        let theta = ThresholdParams::zeros(&config.model);
        let mut sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        sizes.extend(std::iter::repeat_n(1, theta.theta.len()));
        Ok(Self {
            config: config.clone(),
            adam: Adam::new(&config.optim, &sizes),
            sampler: BatchSampler::new(seed, config.optim.batch_size),
            params,
            theta,
            step: 0,
        })
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn next_phase(&self) -> Phase {
        self.config.prune.phase_of(self.step)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.prune.total_steps
    }

    /// One optimizer step on the next batch of `train`.
    ///
    /// On error the parameters and thresholds are left as they were before
    /// the step.
    pub fn train_step(&mut self, train: &Dataset) -> Result<StepRecord> {
        let indices = self.sampler.next_indices(train)?;
        let batch = train.collate(&indices)?;
        self.step_on(&batch)
    }

    /// One optimizer step on a given batch.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepRecord> {
        let phase = self.next_phase();
        let prune = &self.config.prune;
        let cfg = &self.config.model;
        let learn_theta = prune.mode == PruneMode::Differentiable && phase == Phase::One;

        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, true);
        let theta_vars: Vec<Var> = if learn_theta {
            self.theta
                .theta
                .iter()
                .map(|&t| tape.param(Tensor::scalar(t)))
                .collect()
        } else {
            Vec::new()
        };
        let ctx = match (prune.mode, phase) {
            (PruneMode::None, _) => PruneCtx::None,
            (PruneMode::Vanilla, _) => PruneCtx::Vanilla,
            (PruneMode::Differentiable, Phase::One) => PruneCtx::Soft {
                theta: &theta_vars,
                temperature: prune.temperature,
            },
            (PruneMode::Differentiable, Phase::Two) => PruneCtx::Hard(&self.theta.theta),
        };
        let out = model_forward(&mut tape, &vars, cfg, &batch.input, &ctx)?;
        let task = task_loss(&mut tape, out.pred, batch)?;
        let sp = if learn_theta {
            let masks: Vec<(&AppliedMask, &Lengths)> = out
                .pruned()
                .map(|t| (&t.mask, out.lens_for(t.stack)))
                .collect();
            Some(sparsity_loss(&mut tape, &masks, prune.ratio)?)
        } else {
            None
        };
        let total = total_loss(&mut tape, task, sp, phase, prune)?;
        let layers = pruned_stats(&tape, &out, prune.mode, &self.theta.theta)?;

        let step = self.step + 1;
        let total_value = tape.value(total).item()?;
        if !total_value.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: total_value,
            });
        }
        let task_value = tape.value(task).item()?;
        let sp_value = sp.map(|v| tape.value(v).item()).transpose()?;
        tape.backward(total)?;

        let param_vars = vars.in_order();
        let mut grads: Vec<Tensor> = param_vars
            .iter()
            .map(|&v| tape.grad(v).expect("trainable leaf"))
            .collect();
        grads.extend(theta_vars.iter().map(|&v| tape.grad(v).expect("trainable leaf")));
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence {
                step,
                loss: f64::NAN,
            });
        }
        let slices: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
        let (grad_norm, scale) = clip_scale(&slices, self.config.optim.clip_norm);

        self.adam.begin_step();
        let n_params = param_vars.len();
        for (slot, (p, g)) in self.params.tensors_mut().into_iter().zip(&grads).enumerate() {
            self.adam.update(slot, p.data_mut(), g.data(), scale);
        }
        if learn_theta {
            for (i, g) in grads[n_params..].iter().enumerate() {
                let t = &mut self.theta.theta[i..i + 1];
                self.adam.update(n_params + i, t, g.data(), scale);
            }
        }
        self.step = step;

        Ok(StepRecord {
            step,
            phase,
            task_loss: task_value,
            sp_loss: sp_value,
            theta: (prune.mode == PruneMode::Differentiable).then(|| self.theta.theta.clone()),
            layers,
            grad_norm,
            eval: None,
        })
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalSummary> {
        evaluate(
            &self.params,
            &self.theta,
            self.config.prune.mode,
            data,
            self.config.optim.batch_size,
        )
    }

    /// Train to `total_steps`, evaluating both held-out splits every
    /// `eval_every` steps and after the last step. `on_record` sees every
    /// row as soon as it is complete.
    pub fn run(
        &mut self,
        splits: &Splits,
        mut on_record: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let mut rec = self.train_step(&splits.train)?;
            if rec.step % self.config.eval_every == 0 || self.is_done() {
                rec.eval = Some(EvalPair {
                    eval_in: self.evaluate(&splits.eval_in)?.loss,
                    eval_ood: self.evaluate(&splits.eval_ood)?.loss,
                });
            }
            on_record(&rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            theta: self.theta.clone(),
            mode: self.config.prune.mode,
            step: self.step,
        }
    }
}

/// Trained model state.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
}

/// Full two-phase (or single-phase) run from a fresh model.
pub fn run_two_phase(config: &TrainConfig, splits: &Splits, seed: u64) -> Result<RunResult> {
    let mut trainer = Trainer::new(config, seed)?;
    let mut metrics = RunMetrics::new(config.model.num_pruned_layers());
    trainer.run(splits, |rec| {
        metrics.rows.push(rec.clone());
        Ok(())
    })?;
    Ok(RunResult {
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}

/// Per-step records of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub layers: usize,
    pub rows: Vec<StepRecord>,
}

fn fmt_opt(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        write!(out, "{v}").expect("write to string");
    }
}

impl RunMetrics {
    pub fn new(layers: usize) -> Self {
        Self {
            layers,
            rows: Vec::new(),
        }
    }

    pub fn csv_header(layers: usize) -> String {
        let mut h = String::from("step,phase,task_loss,sp_loss");
        for l in 1..=layers {
            write!(h, ",theta_{l}").expect("write to string");
        }
        for l in 1..=layers {
            write!(h, ",active_frac_{l}").expect("write to string");
        }
        h.push_str(",eval_in,eval_ood");
        h
    }

    /// One CSV line; empty fields for values absent at this step.
    pub fn csv_row(rec: &StepRecord, layers: usize) -> String {
        let mut r = format!("{},{},{},", rec.step, rec.phase.number(), rec.task_loss);
        fmt_opt(&mut r, rec.sp_loss);
        for l in 0..layers {
            r.push(',');
            fmt_opt(&mut r, rec.theta.as_ref().map(|t| t[l]));
        }
        for l in 0..layers {
            r.push(',');
            fmt_opt(&mut r, rec.layers.get(l).map(|s| s.active_frac));
        }
        r.push(',');
        fmt_opt(&mut r, rec.eval.map(|e| e.eval_in));
        r.push(',');
        fmt_opt(&mut r, rec.eval.map(|e| e.eval_ood));
        r
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", Self::csv_header(self.layers))?;
        for rec in &self.rows {
            writeln!(w, "{}", Self::csv_row(rec, self.layers))?;
        }
        Ok(())
    }

    /// Last row of phase 1, if any.
    pub fn last_of_phase(&self, phase: Phase) -> Option<&StepRecord> {
        self.rows.iter().rev().find(|r| r.phase == phase)
    }
}

/// Model weights, thresholds and the pruning mode they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub theta: ThresholdParams,
    pub mode: PruneMode,
    pub step: usize,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        Container {
            meta: json!({
                "kind": "checkpoint",
                "model": self.params.config,
                "mode": self.mode,
                "step": self.step,
            }),
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            scalars: self.theta.theta.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.meta_str("kind")? != "checkpoint" {
            return Err(Error::Format("container does not hold a checkpoint".into()));
        }
        let field = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("metadata field `{k}` missing")))
        };
        let config: ModelConfig = serde_json::from_value(field("model")?)?;
        let mode: PruneMode = serde_json::from_value(field("mode")?)?;
        let step: usize = serde_json::from_value(field("step")?)?;
        if c.scalars.len() != config.num_pruned_layers() {
            return Err(Error::Format(format!(
                "{} thresholds for {} pruned layers",
                c.scalars.len(),
                config.num_pruned_layers()
            )));
        }
        let params = ModelParams::from_named(&config, c.tensors)?;
        Ok(Self {
            params,
            theta: ThresholdParams { theta: c.scalars },
            mode,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}
