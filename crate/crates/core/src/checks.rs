//! Gradient-check suite: every tape op on small random tensors, then the
//! full phase-1 loss of the default model with respect to sampled weights
//! and every threshold.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, Lengths};
use crate::data::{sample_dataset, Domain, DomainSpec, Teacher};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelConfig, ModelInput, ModelParams, PruneCtx};
use crate::rng::{stream, Purpose};
use crate::tensor::{grad_check, grad_check_sampled, GradCheck, Tape, Tensor, Var};
use crate::training::{sparsity_loss, task_loss, total_loss, Phase, PruneConfig};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
/// Distance, in temperatures, between every probability and its threshold
/// during the model checks.
pub const MARGIN_TEMPERATURES: f64 = 5.5;

type Runner = Box<dyn Fn() -> Result<GradCheck>>;

pub struct Check {
    pub name: String,
    pub tolerance: f64,
    run: Runner,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub tolerance: f64,
    /// NaN when the check could not be evaluated.
    pub max_rel_error: f64,
    pub coords: usize,
    pub error: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error <= self.tolerance
    }
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        tolerance: f64,
        run: impl Fn() -> Result<GradCheck> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            tolerance,
            run: Box::new(run),
        }
    }

    pub fn run(&self) -> CheckReport {
        let (max_rel_error, coords, error) = match (self.run)() {
            Ok(g) => (g.max_rel_error, g.coords_checked, None),
            Err(e) => (f64::NAN, 0, Some(e.to_string())),
        };
        CheckReport {
            name: self.name.clone(),
            tolerance: self.tolerance,
            max_rel_error,
            coords,
            error,
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `sum(y ⊙ w)` with fixed random `w`, so every output entry reaches the loss.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Checks of every tape op on random inputs in [-2, 2].
pub fn op_checks(seed: u64) -> Vec<Check> {
    let mut rng = stream(seed, Purpose::Checks);
    let mut checks = Vec::new();
    let mut add = |name: &str, inputs: Vec<Vec<usize>>, op: OpFn, rng: &mut ChaCha8Rng| {
        let params: Vec<Tensor> = inputs.iter().map(|s| rand_tensor(rng, s)).collect();
        // Output shape is only known after one forward pass.
        let mut probe = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| probe.constant(p.clone())).collect();
        let out_shape = op(&mut probe, &vars)
            .map(|y| probe.shape(y).to_vec())
            .unwrap_or_default();
        let w = rand_tensor(rng, &out_shape);
        checks.push(Check::new(format!("op/{name}"), OP_TOLERANCE, move || {
            grad_check(
                |tape, v| {
                    let y = op(tape, v)?;
                    weighted_sum(tape, y, &w)
                },
                &params,
                EPS,
            )
        }));
    };

    add("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1]), &mut rng);
    add("add_broadcast", vec![vec![2, 3, 4], vec![4]], |t, v| t.add(v[0], v[1]), &mut rng);
    add("sub_scalar", vec![vec![3, 4], vec![1]], |t, v| t.sub(v[0], v[1]), &mut rng);
    add("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1]), &mut rng);
    add("mul_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1]), &mut rng);
    add("scale", vec![vec![5]], |t, v| Ok(t.scale(v[0], -1.7)), &mut rng);
    add("shift", vec![vec![5]], |t, v| Ok(t.shift(v[0], 0.3)), &mut rng);
    add("square", vec![vec![2, 3]], |t, v| Ok(t.square(v[0])), &mut rng);
    add("sigmoid", vec![vec![2, 3]], |t, v| Ok(t.sigmoid(v[0])), &mut rng);
    add(
        "relu",
        vec![vec![2, 3]],
        // Shifted away from the kink: |x + 0.5·sign(x)| ≥ 0.5.
        |t, v| {
            let x = t.elementwise(v[0], |x| x + 0.5 * x.signum(), |_| 1.0);
            Ok(t.relu(x))
        },
        &mut rng,
    );
    add("softmax_rows", vec![vec![3, 4]], |t, v| t.softmax_rows(v[0]), &mut rng);
    add(
        "softmax_rows_padded",
        vec![vec![2, 3]],
        |t, v| {
            let bias = Tensor::new(vec![3], vec![0.0, 0.0, f64::NEG_INFINITY])?;
            let b = t.constant(bias);
            let x = t.add(v[0], b)?;
            t.softmax_rows(x)
        },
        &mut rng,
    );
    add("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1]), &mut rng);
    add(
        "matmul_batched",
        vec![vec![2, 3, 4], vec![2, 4, 2]],
        |t, v| t.matmul(v[0], v[1]),
        &mut rng,
    );
    add(
        "matmul_shared_rhs",
        vec![vec![2, 3, 4], vec![4, 2]],
        |t, v| t.matmul(v[0], v[1]),
        &mut rng,
    );
    add("sum_all", vec![vec![2, 3]], |t, v| Ok(t.sum_all(v[0])), &mut rng);
    add("mean_all", vec![vec![2, 3]], |t, v| Ok(t.mean_all(v[0])), &mut rng);
    add("mean_axis", vec![vec![2, 3, 4]], |t, v| t.mean_axis(v[0], 1), &mut rng);
    add("mse", vec![vec![3, 4], vec![3, 4]], |t, v| t.mse(v[0], v[1]), &mut rng);
    add("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4]), &mut rng);
    add("permute", vec![vec![2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]), &mut rng);
    add(
        "gather_rows",
        vec![vec![4, 3]],
        |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]),
        &mut rng,
    );
    add("repeat_rows", vec![vec![2, 2, 3]], |t, v| t.repeat_rows(v[0], 3), &mut rng);
    add(
        "layer_norm",
        vec![vec![3, 5], vec![5], vec![5]],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        &mut rng,
    );
    checks
}

/// Checks of the soft mask and sparsity loss with respect to a threshold,
/// with every probability at least 5T from the threshold.
pub fn mask_checks() -> Vec<Check> {
    let probs = Tensor::new(
        vec![1, 2, 3, 3],
        vec![
            0.6, 0.22, 0.18, 0.2, 0.7, 0.1, 0.4, 0.4, 0.2, //
            0.9, 0.05, 0.05, 0.45, 0.45, 0.1, 0.2, 0.2, 0.6,
        ],
    )
    .expect("shape matches");
    let lens = Lengths::uniform(1, 3).expect("non-empty");
    let mut checks = Vec::new();
    // θ/N ∈ {0.28, 0.03} sits 6T and 7T from the nearest entry above.
    for (name, theta) in [("mask/soft_theta", 0.84), ("mask/soft_theta_low", 0.09)] {
        let (probs, lens) = (probs.clone(), lens.clone());
        checks.push(Check::new(name, MODEL_TOLERANCE, move || {
            grad_check(
                |tape, v| {
                    let a = tape.constant(probs.clone());
                    let m = attention::soft_mask(tape, a, v[0], 0.01, &lens)?;
                    let w = Tensor::new(
                        vec![1, 2, 3, 3],
                        (0..18).map(|i| (i as f64 * 0.37).sin()).collect(),
                    )?;
                    weighted_sum(tape, m, &w)
                },
                &[Tensor::scalar(theta)],
                EPS,
            )
        }));
    }
    checks.push(Check::new("mask/sparsity_loss_theta", MODEL_TOLERANCE, move || {
        grad_check(
            |tape, v| {
                let a = tape.constant(probs.clone());
                let m = attention::soft_mask(tape, a, v[0], 0.01, &lens)?;
                let mask = attention::AppliedMask::Soft(m);
                sparsity_loss(tape, &[(&mask, &lens)], 0.45)
            },
            &[Tensor::scalar(0.84)],
            EPS,
        )
    }));
    checks
}

/// Thresholds putting every valid probability of each pruned layer at least
/// `margin` above `θ/N`, chosen layer by layer since later layers see the
/// soft masks of earlier ones.
pub fn margin_thresholds(
    params: &ModelParams,
    input: &ModelInput,
    temperature: f64,
    margin: f64,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let layers = cfg.num_pruned_layers();
    let mut theta = vec![0.0; layers];
    for l in 0..layers {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let th: Vec<Var> = theta
            .iter()
            .map(|&t| tape.constant(Tensor::scalar(t)))
            .collect();
        let ctx = PruneCtx::Soft {
            theta: &th,
            temperature,
        };
        let out = model_forward(&mut tape, &vars, cfg, input, &ctx)?;
        let trace = out.pruned().nth(l).expect("pruned layer");
        let lens = out.lens_for(trace.stack);
        let a = tape.value(trace.probs);
        let (h, n) = (a.shape()[1], a.shape()[2]);
        let mut bound = f64::INFINITY;
        for (b, &v) in lens.valid().iter().enumerate() {
            let mut min = f64::INFINITY;
            for hi in 0..h {
                for i in 0..v {
                    let row = ((b * h + hi) * n + i) * n;
                    min = a.data()[row..row + v].iter().fold(min, |m, &x| m.min(x));
                }
            }
            bound = bound.min((min - margin) * v as f64);
        }
        theta[l] = bound;
    }
    Ok(theta)
}

/// Tensors whose coordinates are sampled in the full-model check.
pub const SAMPLED_TENSORS: [&str; 7] = [
    "embedding",
    "enc.0.attn.w_q",
    "dec.0.attn.w_q",
    "dec.1.attn.w_k",
    "dec.2.ffn.w1",
    "dec.3.attn.w_v",
    "out.w",
];
pub const COORDS_PER_TENSOR: usize = 4;

/// Phase-1 loss (task + sparsity) with the named tensor and all thresholds
/// as the differentiated leaves.
fn phase1_loss(
    tape: &mut Tape,
    leaves: &[Var],
    name: &str,
    params: &ModelParams,
    batch: &crate::data::Batch,
    prune: &PruneConfig,
) -> Result<Var> {
    let vars = params.register_with(tape, &mut |n, t, tape| {
        if n == name {
            leaves[0]
        } else {
            tape.constant(t.clone())
        }
    });
    let ctx = PruneCtx::Soft {
        theta: &leaves[1..],
        temperature: prune.temperature,
    };
    let out = model_forward(tape, &vars, &params.config, &batch.input, &ctx)?;
    let task = task_loss(tape, out.pred, batch)?;
    let masks: Vec<_> = out
        .pruned()
        .map(|t| (&t.mask, out.lens_for(t.stack)))
        .collect();
    let sp = sparsity_loss(tape, &masks, prune.ratio)?;
    total_loss(tape, task, Some(sp), Phase::One, prune)
}

/// Full-model checks at `config`: one per sampled tensor and one per θ.
pub fn model_checks(config: &ModelConfig, seed: u64) -> Result<Vec<Check>> {
    let params = ModelParams::init(config, seed)?;
    let spec = DomainSpec {
        min_len: 6,
        max_len: 6,
        ..DomainSpec::default()
    };
    let teacher = Teacher::for_model(config, seed);
    let data = sample_dataset(&teacher, Domain::In, &spec, config.expansion, 1, seed)?;
    let batch = data.collate(&[0])?;
    let prune = PruneConfig::default();
    let margin = MARGIN_TEMPERATURES * prune.temperature;
    let theta = margin_thresholds(&params, &batch.input, prune.temperature, margin)?;
    if theta.is_empty() {
        return Err(Error::contract("model checks need at least one pruned layer"));
    }
    let theta_leaves: Vec<Tensor> = theta.iter().map(|&t| Tensor::scalar(t)).collect();

    let shared = std::rc::Rc::new((params, batch, prune));
    let mut rng = stream(seed, Purpose::Checks);
    let mut checks = Vec::new();
    let named: Vec<(String, Tensor)> = shared
        .0
        .named()
        .into_iter()
        .filter(|(n, _)| SAMPLED_TENSORS.contains(&n.as_str()))
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for (name, tensor) in named {
        let coords: Vec<usize> = if name == "embedding" {
            // Only rows of tokens present in the sequence receive gradient.
            let tokens = &shared.1.input.tokens;
            let d = tensor.shape()[1];
            (0..COORDS_PER_TENSOR)
                .map(|_| tokens[rng.random_range(0..tokens.len())] * d + rng.random_range(0..d))
                .collect()
        } else {
            (0..COORDS_PER_TENSOR)
                .map(|_| rng.random_range(0..tensor.numel()))
                .collect()
        };
        let mut leaves = vec![tensor];
        leaves.extend(theta_leaves.iter().cloned());
        let mut all = vec![coords];
        all.extend(std::iter::repeat_n(Vec::new(), theta_leaves.len()));
        let s = shared.clone();
        let n = name.clone();
        checks.push(Check::new(format!("phase1/{name}"), MODEL_TOLERANCE, move || {
            grad_check_sampled(
                |tape, v| phase1_loss(tape, v, &n, &s.0, &s.1, &s.2),
                &leaves,
                EPS,
                Some(&all),
            )
        }));
    }
    // θ checks reuse the first sampled tensor as the (unperturbed) weight leaf.
    let anchor = SAMPLED_TENSORS[0];
    let anchor_tensor = shared
        .0
        .named()
        .into_iter()
        .find(|(n, _)| n == anchor)
        .map(|(_, t)| t.clone())
        .expect("anchor tensor exists");
    for l in 0..theta_leaves.len() {
        let mut leaves = vec![anchor_tensor.clone()];
        leaves.extend(theta_leaves.iter().cloned());
        let mut coords = vec![Vec::new(); leaves.len()];
        coords[l + 1] = vec![0];
        let s = shared.clone();
        checks.push(Check::new(
            format!("phase1/theta_{}", l + 1),
            MODEL_TOLERANCE,
            move || {
                grad_check_sampled(
                    |tape, v| phase1_loss(tape, v, anchor, &s.0, &s.1, &s.2),
                    &leaves,
                    EPS,
                    Some(&coords),
                )
            },
        ));
    }
    Ok(checks)
}

/// The whole suite at the default model configuration.
pub fn suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = op_checks(seed);
    checks.extend(mask_checks());
    checks.extend(model_checks(&ModelConfig::default(), seed)?);
    Ok(checks)
}
