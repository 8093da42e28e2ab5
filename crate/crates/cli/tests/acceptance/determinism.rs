//! Criterion 9: every subcommand is byte-for-byte reproducible.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use attnprune::data::DomainSpec;
use attnprune::training::PruneConfig;
use attnprune_cli::commands::FINAL_CHECKPOINT;
use attnprune_cli::ExperimentConfig;

use crate::Outcome;

fn attnprune(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attnprune"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

/// File name to contents for every file directly inside `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
        if entry.path().is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            files.insert(name, std::fs::read(entry.path()).unwrap_or_default());
        }
    }
    files
}

fn twice<T: PartialEq>(o: &mut Outcome, what: &str, describe: impl Fn(&T) -> String, run: impl Fn() -> Result<T, String>) {
    match (run(), run()) {
        (Ok(a), Ok(b)) => o.check(a == b, format!("{what}: {} identical across two runs", describe(&a))),
        (Err(e), _) | (_, Err(e)) => o.check(false, format!("{what}: {e}")),
    }
}

fn describe_files(files: &BTreeMap<String, Vec<u8>>) -> String {
    let bytes: usize = files.values().map(Vec::len).sum();
    format!("{} files, {bytes} bytes", files.len())
}

pub fn subcommands_are_deterministic() -> Outcome {
    let mut o = Outcome::new(9, "determinism");
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            o.check(false, format!("tempdir: {e}"));
            return o;
        }
    };
    let run_dir = dir.path().join("run");
    let cfg = ExperimentConfig {
        prune: PruneConfig {
            phase1_steps: 15,
            total_steps: 30,
            ..PruneConfig::default()
        },
        data: DomainSpec {
            n_train: 64,
            n_eval_in: 16,
            n_eval_ood: 16,
            ..DomainSpec::default()
        },
        eval_every: 10,
        output_dir: run_dir.clone(),
        ..ExperimentConfig::default()
    };
    let cfg_path = dir.path().join("config.json");
    if let Err(e) = std::fs::write(&cfg_path, cfg.to_json()) {
        o.check(false, format!("writing the config: {e}"));
        return o;
    }
    let cfg_arg = cfg_path.to_string_lossy().into_owned();
    let ckpt = run_dir.join(FINAL_CHECKPOINT).to_string_lossy().into_owned();

    twice(&mut o, "train", describe_files, || {
        attnprune(&["train", &cfg_arg])?;
        Ok(snapshot(&run_dir))
    });
    for split in ["in", "ood"] {
        twice(
            &mut o,
            &format!("eval --split {split}"),
            |out: &Vec<u8>| format!("{} bytes of output", out.len()),
            || attnprune(&["eval", &ckpt, &cfg_arg, "--split", split]),
        );
    }
    let masks_dir = dir.path().join("masks");
    let masks_arg = masks_dir.to_string_lossy().into_owned();
    twice(&mut o, "masks", describe_files, || {
        let _ = std::fs::remove_dir_all(&masks_dir);
        attnprune(&["masks", &ckpt, &cfg_arg, "--sample", "3", "--out", &masks_arg])?;
        Ok(snapshot(&masks_dir))
    });
    twice(
        &mut o,
        "gradcheck --seed 0",
        |out: &Vec<u8>| format!("{} lines of output", out.split(|&b| b == b'\n').count() - 1),
        || attnprune(&["gradcheck", "--seed", "0"]),
    );
    o
}
