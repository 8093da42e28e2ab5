//! Criteria 4 to 8: full training runs on the synthetic task.
//!
//! Every run uses the default model and data with a shortened schedule of
//! 2000 phase-1 steps plus 250 phase-2 steps.

use std::time::Instant;

use attnprune::data::{DomainSpec, Splits};
use attnprune::model::PruneMode;
use attnprune::training::{soft_mask_means, EvalSummary, Phase, TrainConfig, Trainer};

use crate::Outcome;

const PHASE1_STEPS: usize = 2000;
const TOTAL_STEPS: usize = 2250;
const RUN_LIMIT_SECS: f64 = 600.0;

struct Run {
    label: String,
    ratio: f64,
    lambda_sp: f64,
    /// Thresholds at the end of phase 1.
    theta_p1: Vec<f64>,
    /// Soft-mask means on the in-domain eval split at the end of phase 1.
    soft_means: Vec<f64>,
    theta_final: Vec<f64>,
    theta_frozen: bool,
    phase2_binary: bool,
    phase1_soft_inside: bool,
    eval_in: EvalSummary,
    eval_ood: EvalSummary,
    secs: f64,
}

fn train(splits: &Splits, mode: PruneMode, ratio: f64, lambda_sp: f64, seed: u64) -> Run {
    let mut cfg = TrainConfig::default();
    cfg.prune.mode = mode;
    cfg.prune.ratio = ratio;
    cfg.prune.lambda_sp = lambda_sp;
    cfg.prune.phase1_steps = PHASE1_STEPS;
    cfg.prune.total_steps = TOTAL_STEPS;
    let label = match mode {
        PruneMode::Differentiable => format!("diff R={ratio:.2} lambda={lambda_sp} seed={seed}"),
        PruneMode::Vanilla => format!("vanilla seed={seed}"),
        PruneMode::None => format!("none seed={seed}"),
    };

    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg, seed).expect("trainer");
    let mut theta_p1: Vec<f64> = Vec::new();
    let mut soft_means = Vec::new();
    let (mut theta_frozen, mut phase2_binary, mut phase1_soft_inside) = (true, true, true);
    while !trainer.is_done() {
        let rec = trainer.train_step(&splits.train).expect("train step");
        match rec.phase {
            Phase::One => {
                for l in &rec.layers {
                    if let Some(a) = l.applied {
                        phase1_soft_inside &= a.min > 0.0 && a.max < 1.0;
                    }
                }
            }
            Phase::Two => {
                theta_frozen &= trainer.theta.theta.iter().zip(&theta_p1).all(|(a, b)| a.to_bits() == b.to_bits());
                phase2_binary &= rec.layers.iter().all(|l| l.applied.is_none_or(|a| a.binary));
            }
        }
        if mode == PruneMode::Differentiable && trainer.step_count() == PHASE1_STEPS {
            theta_p1 = trainer.theta.theta.clone();
            soft_means = soft_mask_means(
                &trainer.params,
                &trainer.theta,
                cfg.prune.temperature,
                &splits.eval_in,
                cfg.optim.batch_size,
            )
            .expect("soft means");
        }
    }
    let eval_in = trainer.evaluate(&splits.eval_in).expect("eval in");
    let eval_ood = trainer.evaluate(&splits.eval_ood).expect("eval ood");
    let run = Run {
        label,
        ratio,
        lambda_sp,
        theta_p1,
        soft_means,
        theta_final: trainer.theta.theta.clone(),
        theta_frozen,
        phase2_binary,
        phase1_soft_inside,
        eval_in,
        eval_ood,
        secs: start.elapsed().as_secs_f64(),
    };
    eprintln!(
        "[acceptance] {}: in {:.5} ood {:.5} theta {} ({:.0} s)",
        run.label,
        run.eval_in.loss,
        run.eval_ood.loss,
        fmt(&run.theta_final),
        run.secs
    );
    run
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn training_criteria() -> Vec<Outcome> {
    let splits = Splits::generate(&Default::default(), &DomainSpec::default()).expect("splits");
    let diff = PruneMode::Differentiable;

    let ratios: Vec<Run> = [0.40, 0.45, 0.50].iter().map(|&r| train(&splits, diff, r, 1.0, 0)).collect();
    let no_sparsity = train(&splits, diff, 0.45, 0.0, 0);
    let mut seeds: Vec<&Run> = vec![&ratios[1]];
    let extra: Vec<Run> = (1..5).map(|s| train(&splits, diff, 0.45, 1.0, s)).collect();
    seeds.extend(extra.iter());
    let baseline: Vec<Run> = (0..5).map(|s| train(&splits, PruneMode::None, 0.45, 1.0, s)).collect();

    let mut c4 = Outcome::new(4, "sparsity targeting");
    for run in &ratios {
        let worst = run.soft_means.iter().map(|m| (m - run.ratio).abs()).fold(0.0, f64::max);
        c4.check(
            worst <= 0.10,
            format!("{}: soft means {} (|mean - R| <= {worst:.3})", run.label, fmt(&run.soft_means)),
        );
        c4.check(
            run.theta_p1.iter().all(|&t| t > 0.0),
            format!("{}: theta {} all positive", run.label, fmt(&run.theta_p1)),
        );
        c4.check(run.secs <= RUN_LIMIT_SECS, format!("{}: {:.0} s", run.label, run.secs));
        c4.note(format!("{}: hard active fraction {}", run.label, fmt(&run.eval_in.active_frac)));
    }

    let mut c5 = Outcome::new(5, "no sparsity loss leaves attention dense");
    let reference = ratios[1].theta_p1.iter().copied().fold(f64::INFINITY, f64::min);
    let bound = 0.2 * reference;
    let drift = no_sparsity.theta_final.iter().map(|t| t.abs()).fold(0.0, f64::max);
    c5.check(
        no_sparsity.eval_in.active_frac.iter().all(|&f| f >= 0.95),
        format!("lambda=0 active fraction {}", fmt(&no_sparsity.eval_in.active_frac)),
    );
    c5.check(
        drift < bound,
        format!(
            "lambda=0 theta {} (max |theta| {drift:.4}, bound 20% of {reference:.4} = {bound:.4})",
            fmt(&no_sparsity.theta_final)
        ),
    );
    c5.note(format!("lambda_sp {}", no_sparsity.lambda_sp));

    let mut c6 = Outcome::new(6, "two-phase freezing");
    let diff_runs: Vec<&Run> = ratios.iter().chain([&no_sparsity]).chain(extra.iter()).collect();
    for run in &diff_runs {
        c6.check(
            run.theta_frozen && run.theta_final == run.theta_p1,
            format!("{}: phase-2 thresholds bitwise equal to the phase-1 snapshot", run.label),
        );
        c6.check(run.phase2_binary, format!("{}: phase-2 masks binary", run.label));
        c6.check(run.eval_in.masks_binary && run.eval_ood.masks_binary, format!("{}: inference masks binary", run.label));
        c6.check(run.phase1_soft_inside, format!("{}: phase-1 soft masks strictly inside (0, 1)", run.label));
    }

    let mut c7 = Outcome::new(7, "threshold monotonicity in R");
    let means: Vec<f64> = ratios.iter().map(|r| mean(&r.theta_p1)).collect();
    c7.check(
        means[0] >= means[1] && means[1] >= means[2],
        format!("mean theta R=0.40 {:.4} >= R=0.45 {:.4} >= R=0.50 {:.4}", means[0], means[1], means[2]),
    );

    let mut c8 = Outcome::new(8, "out-of-domain loss");
    c8.soft = true;
    let col = |runs: &[&Run], f: fn(&Run) -> f64| runs.iter().map(|r| f(r)).collect::<Vec<_>>();
    let base: Vec<&Run> = baseline.iter().collect();
    let (d_in, d_ood) = (col(&seeds, |r| r.eval_in.loss), col(&seeds, |r| r.eval_ood.loss));
    let (b_in, b_ood) = (col(&base, |r| r.eval_in.loss), col(&base, |r| r.eval_ood.loss));
    for (name, v) in [("diff in", &d_in), ("diff ood", &d_ood), ("none in", &b_in), ("none ood", &b_ood)] {
        c8.note(format!("{name}: {}", fmt(v)));
    }
    let (md_ood, mb_ood) = (median(&d_ood), median(&b_ood));
    let (md_in, mb_in) = (median(&d_in), median(&b_in));
    c8.check(md_ood <= mb_ood, format!("median ood: diff {md_ood:.5} <= none {mb_ood:.5}"));
    let ratio = md_in.max(mb_in) / md_in.min(mb_in);
    c8.check(
        ratio <= 1.2,
        format!("median in-domain: diff {md_in:.5} vs none {mb_in:.5} (ratio {ratio:.3}, limit 1.2)"),
    );
    vec![c4, c5, c6, c7, c8]
}
