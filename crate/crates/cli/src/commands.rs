//! Subcommand bodies. Each writes its report to a caller-supplied sink so
//! tests can run them in-process.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use attnprune::checks::{self, Check, CheckReport};
use attnprune::data::{Split, Splits};
use attnprune::model::{model_forward, PruneMode, Stack};
use attnprune::tensor::Tape;
use attnprune::training::{inference_ctx, Checkpoint, EvalPair, RunMetrics, Trainer};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pgm;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const THRESHOLDS_FILE: &str = "thresholds.txt";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub eval: Option<EvalPair>,
    pub theta: Vec<f64>,
}

/// Runs training and writes `metrics.csv`, `final.ckpt` and, for
/// differentiable pruning, `thresholds.txt` into the output directory.
///
/// Metrics are flushed row by row. On divergence the rows so far and the
/// last good state (`last.ckpt`) are kept.
pub fn train(cfg: &ExperimentConfig, log: &mut impl Write) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    // stale artifacts from an earlier run would break reproducibility
    for name in [FINAL_CHECKPOINT, LAST_CHECKPOINT, THRESHOLDS_FILE] {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }

    let train_cfg = cfg.train_config();
    let splits = Splits::generate(&cfg.model, &cfg.data)?;
    let mut trainer = Trainer::new(&train_cfg, cfg.seed)?;
    let layers = cfg.model.num_pruned_layers();

    let mut csv = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    writeln!(csv, "{}", RunMetrics::csv_header(layers))?;
    let mut last_eval = None;
    let result = trainer.run(&splits, |rec| {
        writeln!(csv, "{}", RunMetrics::csv_row(rec, layers))?;
        csv.flush()?;
        if let Some(e) = rec.eval {
            last_eval = Some(e);
            writeln!(
                log,
                "step {} phase {} task_loss {:.6} eval_in {:.6} eval_ood {:.6}",
                rec.step,
                rec.phase.number(),
                rec.task_loss,
                e.eval_in,
                e.eval_ood
            )?;
        }
        Ok(())
    });
    csv.flush()?;
    if let Err(e) = result {
        let err = CliError::from(e);
        if matches!(err, CliError::Divergence(_)) {
            trainer.checkpoint().save(dir.join(LAST_CHECKPOINT))?;
        }
        return Err(err);
    }

    trainer.checkpoint().save(dir.join(FINAL_CHECKPOINT))?;
    if cfg.prune.mode == PruneMode::Differentiable {
        fs::write(dir.join(THRESHOLDS_FILE), thresholds_table(&trainer.theta.theta))?;
    }
    Ok(TrainSummary {
        steps: trainer.step_count(),
        eval: last_eval,
        theta: trainer.theta.theta.clone(),
    })
}

/// One `layer_index theta` line per pruned layer, 1-based.
pub fn thresholds_table(theta: &[f64]) -> String {
    theta
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{} {t}\n", i + 1))
        .collect()
}

fn load_matching(ckpt: &Path, cfg: &ExperimentConfig) -> Result<Checkpoint, CliError> {
    let c = Checkpoint::load(ckpt)?;
    if c.params.config != cfg.model {
        return Err(CliError::Config(format!(
            "model config does not match checkpoint {}",
            ckpt.display()
        )));
    }
    if c.mode != cfg.prune.mode {
        return Err(CliError::Config(format!(
            "prune.mode {:?} does not match checkpoint mode {:?}",
            cfg.prune.mode, c.mode
        )));
    }
    Ok(c)
}

fn eval_split(ood: bool) -> Split {
    if ood {
        Split::EvalOod
    } else {
        Split::EvalIn
    }
}

/// Prints `split,loss,active_frac_1..` and one data row.
pub fn eval(
    ckpt: &Path,
    cfg: &ExperimentConfig,
    ood: bool,
    out: &mut impl Write,
) -> Result<(), CliError> {
    cfg.validate()?;
    let c = load_matching(ckpt, cfg)?;
    let data = Splits::one(&cfg.model, &cfg.data, eval_split(ood))?;
    let summary = attnprune::training::evaluate(
        &c.params,
        &c.theta,
        c.mode,
        &data,
        cfg.optim.batch_size,
    )?;
    let mut header = String::from("split,loss");
    let mut row = format!("{},{}", if ood { "ood" } else { "in" }, summary.loss);
    for (l, f) in summary.active_frac.iter().enumerate() {
        header.push_str(&format!(",active_frac_{}", l + 1));
        row.push_str(&format!(",{f}"));
    }
    writeln!(out, "{header}\n{row}")?;
    Ok(())
}

/// Writes `layer{l}_head{h}.pgm` and `layer{l}_head{h}_mask.csv` for every
/// decoder layer and head of one evaluation sequence. Returns the paths.
pub fn masks(
    ckpt: &Path,
    cfg: &ExperimentConfig,
    sample: usize,
    ood: bool,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let c = load_matching(ckpt, cfg)?;
    let data = Splits::one(&cfg.model, &cfg.data, eval_split(ood))?;
    if sample >= data.len() {
        return Err(CliError::Usage(format!(
            "sample {sample} is out of range for a split of {} sequences",
            data.len()
        )));
    }
    let batch = data.collate(&[sample])?;
    let mut tape = Tape::new();
    let vars = c.params.register(&mut tape, false);
    let ctx = inference_ctx(c.mode, &c.theta);
    let fwd = model_forward(&mut tape, &vars, &cfg.model, &batch.input, &ctx)?;

    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for trace in fwd.layers.iter().filter(|t| t.stack == Stack::Decoder) {
        let probs = tape.value(trace.probs);
        let mask = trace.mask.values(&tape);
        let (h, n) = (probs.shape()[1], probs.shape()[2]);
        for head in 0..h {
            let block = head * n * n..(head + 1) * n * n;
            let a = &probs.data()[block.clone()];
            let m: Vec<f64> = match mask {
                Some(m) => m.data()[block].to_vec(),
                None => vec![1.0; n * n],
            };
            let stem = format!("layer{}_head{}", trace.index + 1, head + 1);
            let img = out_dir.join(format!("{stem}.pgm"));
            fs::write(&img, pgm::heatmap(a, &m, n))?;
            let csv = out_dir.join(format!("{stem}_mask.csv"));
            fs::write(&csv, pgm::mask_csv(&m, n))?;
            written.extend([img, csv]);
        }
    }
    Ok(written)
}

/// Runs `checks`, printing one line each, and fails if any breaches its
/// tolerance.
pub fn run_checks(checks: &[Check], out: &mut impl Write) -> Result<Vec<CheckReport>, CliError> {
    let mut reports = Vec::with_capacity(checks.len());
    for check in checks {
        let r = check.run();
        let status = if r.passed() { "PASS" } else { "FAIL" };
        match &r.error {
            None => writeln!(
                out,
                "{:<28} max_rel_err {:.3e}  tol {:.0e}  coords {:>3}  {status}",
                r.name, r.max_rel_error, r.tolerance, r.coords
            )?,
            Some(e) => writeln!(out, "{:<28} error: {e}  {status}", r.name)?,
        }
        reports.push(r);
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.clone())
        .collect();
    writeln!(out, "{}/{} checks passed", reports.len() - failed.len(), reports.len())?;
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::ChecksFailed(failed))
    }
}

pub fn gradcheck(seed: u64, out: &mut impl Write) -> Result<Vec<CheckReport>, CliError> {
    run_checks(&checks::suite(seed)?, out)
}
