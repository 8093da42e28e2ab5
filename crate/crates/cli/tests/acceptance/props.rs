//! Criteria 1 to 3: gradient checks, mask invariants, oracle equivalence.

use std::cell::Cell;
use std::time::Instant;

use attnprune::attention::{
    self, hard_mask, head_union_mask, vanilla_mask, AttentionParams, Lengths, MaskKind, MaskPolicy,
};
use attnprune::checks;
use attnprune::model::{fft_block, FftBlockParams, ModelConfig, ModelParams, PruneScope};
use attnprune::rng::{stream, Purpose};
use attnprune::tensor::{Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

use crate::oracle::{self, mat_from, OracleAttention, OracleBlock, OracleMask};
use crate::Outcome;

const INSTANCES: u32 = 1000;
const TEMPERATURE: f64 = 0.01;

fn runner() -> TestRunner {
    let config = Config {
        cases: INSTANCES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn property<S: Strategy>(
    o: &mut Outcome,
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) {
    let t = Instant::now();
    let result = runner().run(&strategy, test);
    let secs = t.elapsed().as_secs_f64();
    match result {
        Ok(()) => o.check(true, format!("{name}: {INSTANCES} instances ({secs:.2} s)")),
        Err(e) => o.check(false, format!("{name}: {e}")),
    }
}

pub fn gradient_correctness() -> Outcome {
    let mut o = Outcome::new(1, "gradient correctness");
    let t = Instant::now();
    let suite = match checks::suite(0) {
        Ok(s) => s,
        Err(e) => {
            o.check(false, format!("could not build the suite: {e}"));
            return o;
        }
    };
    let reports: Vec<_> = suite.iter().map(|c| c.run()).collect();
    let secs = t.elapsed().as_secs_f64();
    for prefix in ["op/", "mask/", "phase1/"] {
        let group: Vec<_> = reports.iter().filter(|r| r.name.starts_with(prefix)).collect();
        let worst = group.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let bound = group.iter().map(|r| r.tolerance).fold(0.0, f64::max);
        let all_ok = !group.is_empty() && group.iter().all(|r| r.passed());
        o.check(
            all_ok,
            format!("{prefix}*: {} checks, max relative error {worst:.2e} (tolerance {bound:.0e})", group.len()),
        );
    }
    for r in reports.iter().filter(|r| !r.passed()) {
        o.check(false, format!("{} failed: {:.3e} {:?}", r.name, r.max_rel_error, r.error));
    }
    let thetas = reports.iter().filter(|r| r.name.starts_with("phase1/theta_")).count();
    let layers = ModelConfig::default().num_pruned_layers();
    o.check(thetas == layers, format!("{thetas} threshold checks for {layers} pruned layers"));
    o.check(secs <= 60.0, format!("runtime {secs:.2} s (limit 60 s)"));
    o
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_attention(rng: &mut impl Rng, dim: usize, heads: usize, head_dim: usize) -> AttentionParams {
    let inner = heads * head_dim;
    AttentionParams {
        w_q: rand_tensor(rng, &[dim, inner], 1.0),
        w_k: rand_tensor(rng, &[dim, inner], 1.0),
        w_v: rand_tensor(rng, &[dim, inner], 1.0),
        w_o: rand_tensor(rng, &[inner, dim], 1.0),
        heads,
        head_dim,
    }
}

/// Attention probabilities `[batch, heads, n, n]` from random weights and
/// input; the input scale varies so rows range from flat to peaked.
fn random_probs(seed: u64, lens: &Lengths, heads: usize) -> Tensor {
    let mut rng = stream(seed, Purpose::Checks);
    let p = rand_attention(&mut rng, 4, heads, 2);
    let scale = rng.random_range(0.1..4.0);
    let x = rand_tensor(&mut rng, &[lens.batch(), lens.padded(), 4], scale);
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let x = tape.constant(x);
    let a = attention::attention_probs(&mut tape, x, &vars, lens).unwrap();
    tape.value(a).clone()
}

fn at(t: &Tensor, b: usize, h: usize, i: usize, j: usize) -> f64 {
    let s = t.shape();
    t.data()[((b * s[1] + h) * s[2] + i) * s[3] + j]
}

fn lens_strategy() -> impl Strategy<Value = Lengths> {
    (1usize..=8)
        .prop_flat_map(|n| (Just(n), prop::collection::vec(1..=n, 1..=3)))
        .prop_map(|(n, valid)| Lengths::new(valid, n).unwrap())
}

fn soft_values(probs: &Tensor, theta: f64, lens: &Lengths) -> Tensor {
    let mut tape = Tape::new();
    let a = tape.constant(probs.clone());
    let th = tape.constant(Tensor::scalar(theta));
    let m = attention::soft_mask(&mut tape, a, th, TEMPERATURE, lens).unwrap();
    tape.value(m).clone()
}

fn attention_out(p: &AttentionParams, x: &Tensor, lens: &Lengths, kind: usize, theta: f64) -> Tensor {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let policy = policy(&mut tape, kind, theta);
    let out = attention::self_attention(&mut tape, xv, &vars, lens, &policy).unwrap();
    tape.value(out.out).clone()
}

fn policy(tape: &mut Tape, kind: usize, theta: f64) -> MaskPolicy {
    match kind {
        0 => MaskPolicy::None,
        1 => MaskPolicy::Vanilla,
        2 => MaskPolicy::Hard { theta },
        _ => MaskPolicy::Soft {
            theta: tape.constant(Tensor::scalar(theta)),
            temperature: TEMPERATURE,
        },
    }
}

fn oracle_kind(kind: usize, theta: f64) -> OracleMask {
    match kind {
        0 => OracleMask::None,
        1 => OracleMask::Vanilla,
        2 => OracleMask::Hard(theta),
        _ => OracleMask::Soft(theta, TEMPERATURE),
    }
}

pub fn mask_invariants() -> Outcome {
    let mut o = Outcome::new(2, "mask invariant suite");
    let t = Instant::now();

    property(
        &mut o,
        "vanilla rows are non-empty",
        (any::<u64>(), lens_strategy(), 1usize..=2),
        |(seed, lens, heads)| {
            let a = random_probs(seed, &lens, heads);
            let m = vanilla_mask(&a, &lens).unwrap();
            for (b, &v) in lens.valid().iter().enumerate() {
                for h in 0..heads {
                    for i in 0..v {
                        prop_assert!((0..v).any(|j| at(&m.values, b, h, i, j) == 1.0));
                    }
                }
            }
            Ok(())
        },
    );

    property(
        &mut o,
        "OR-combined mask covers every head",
        (any::<u64>(), lens_strategy(), 1usize..=2),
        |(seed, lens, heads)| {
            let a = random_probs(seed, &lens, heads);
            let per_head = vanilla_mask(&a, &lens).unwrap();
            let union = head_union_mask(&a, &lens).unwrap();
            prop_assert_eq!(union.kind, MaskKind::OrCombined);
            for (b, &v) in lens.valid().iter().enumerate() {
                for i in 0..v {
                    for j in 0..v {
                        let u = at(&union.values, b, 0, i, j);
                        prop_assert!(u == 0.0 || u == 1.0);
                        for h in 0..heads {
                            prop_assert_eq!(at(&union.values, b, h, i, j), u);
                            prop_assert!(u >= at(&per_head.values, b, h, i, j));
                        }
                    }
                }
            }
            Ok(())
        },
    );

    property(
        &mut o,
        "hard mask shrinks as theta grows",
        (any::<u64>(), lens_strategy(), -1.0f64..4.0, 0.0f64..2.0),
        |(seed, lens, t1, dt)| {
            let a = random_probs(seed, &lens, 2);
            let lo = hard_mask(&a, t1, &lens).unwrap();
            let hi = hard_mask(&a, t1 + dt, &lens).unwrap();
            for (l, h) in lo.values.data().iter().zip(hi.values.data()) {
                prop_assert!(h <= l);
            }
            Ok(())
        },
    );

    let compared = Cell::new(0usize);
    property(
        &mut o,
        "soft and hard masks agree within 5e-5 at margin >= 10T",
        (any::<u64>(), lens_strategy(), -0.5f64..2.0),
        |(seed, lens, theta)| {
            let a = random_probs(seed, &lens, 2);
            let hard = hard_mask(&a, theta, &lens).unwrap();
            let soft = soft_values(&a, theta, &lens);
            for (b, &v) in lens.valid().iter().enumerate() {
                let cut = theta / v as f64;
                for h in 0..2 {
                    for i in 0..v {
                        for j in 0..v {
                            let av = at(&a, b, h, i, j);
                            if (av - cut).abs() >= 10.0 * TEMPERATURE {
                                compared.set(compared.get() + 1);
                                let diff = (at(&soft, b, h, i, j) - at(&hard.values, b, h, i, j)).abs();
                                prop_assert!(diff <= 5e-5, "A={} cut={} diff={}", av, cut, diff);
                            }
                        }
                    }
                }
            }
            Ok(())
        },
    );
    o.note(format!("{} entries beyond the margin compared", compared.get()));

    property(
        &mut o,
        "zero threshold leaves attention bitwise unchanged",
        (any::<u64>(), 1usize..=8, 0usize..=2, 1usize..=2),
        |(seed, n, pad, heads)| {
            let mut rng = stream(seed, Purpose::Checks);
            let p = rand_attention(&mut rng, 4, heads, 2);
            let padded = n + pad;
            let x = rand_tensor(&mut rng, &[1, padded, 4], 2.0);
            let lens = Lengths::new(vec![n], padded).unwrap();
            let plain = attention_out(&p, &x, &lens, 0, 0.0);
            let masked = attention_out(&p, &x, &lens, 2, 0.0);
            let valid = n * 4;
            for (a, b) in plain.data()[..valid].iter().zip(&masked.data()[..valid]) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            Ok(())
        },
    );

    let secs = t.elapsed().as_secs_f64();
    o.check(secs <= 60.0, format!("runtime {secs:.2} s (limit 60 s)"));
    o
}

fn to_oracle_attention(p: &AttentionParams) -> OracleAttention {
    let m = |t: &Tensor| mat_from(t.data(), t.shape()[0], t.shape()[1]);
    OracleAttention {
        w_q: m(&p.w_q),
        w_k: m(&p.w_k),
        w_v: m(&p.w_v),
        w_o: m(&p.w_o),
        heads: p.heads,
        head_dim: p.head_dim,
    }
}

fn to_oracle_block(b: &FftBlockParams) -> OracleBlock {
    let m = |t: &Tensor| mat_from(t.data(), t.shape()[0], t.shape()[1]);
    OracleBlock {
        attn: to_oracle_attention(&b.attn),
        ln1: (b.ln1_gain.data().to_vec(), b.ln1_bias.data().to_vec()),
        w1: m(&b.ffn.w1),
        b1: b.ffn.b1.data().to_vec(),
        w2: m(&b.ffn.w2),
        b2: b.ffn.b2.data().to_vec(),
        ln2: (b.ln2_gain.data().to_vec(), b.ln2_bias.data().to_vec()),
    }
}

fn small_config(heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        model_dim: 4,
        heads,
        enc_layers: 1,
        dec_layers: 1,
        ffn_hidden: 5,
        expansion: 2,
        out_dim: 3,
        style_dim: 2,
        prune_scope: PruneScope::DecoderOnly,
    }
}

/// A block with every tensor randomized, norms included.
fn random_block(cfg: &ModelConfig, rng: &mut impl Rng) -> FftBlockParams {
    let mut block = ModelParams::init(cfg, 0).unwrap().decoder.remove(0);
    for t in [
        &mut block.attn.w_q,
        &mut block.attn.w_k,
        &mut block.attn.w_v,
        &mut block.attn.w_o,
        &mut block.ln1_bias,
        &mut block.ffn.w1,
        &mut block.ffn.b1,
        &mut block.ffn.w2,
        &mut block.ffn.b2,
        &mut block.ln2_bias,
    ] {
        let shape = t.shape().to_vec();
        *t = rand_tensor(rng, &shape, 1.0);
    }
    for t in [&mut block.ln1_gain, &mut block.ln2_gain] {
        let shape = t.shape().to_vec();
        *t = rand_tensor(rng, &shape, 1.0).map(|g| 1.0 + 0.5 * g);
    }
    block
}

fn max_diff(got: &[f64], want: &[Vec<f64>], rows: usize, cols: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in want.iter().enumerate().take(rows) {
        for (c, w) in row.iter().enumerate().take(cols) {
            worst = worst.max((got[i * cols + c] - w).abs());
        }
    }
    worst
}

pub fn oracle_equivalence() -> Outcome {
    let mut o = Outcome::new(3, "oracle equivalence (N <= 6, H <= 2)");
    let instance = (any::<u64>(), 1usize..=6, 0usize..=2, 1usize..=2, 0usize..4, -1.0f64..3.0);

    let worst = Cell::new(0.0f64);
    property(
        &mut o,
        "masked multi-head attention",
        instance.clone(),
        |(seed, n, pad, heads, kind, theta)| {
            let mut rng = stream(seed, Purpose::Checks);
            let (dim, padded) = (3, n + pad);
            let p = rand_attention(&mut rng, dim, heads, 2);
            let x = rand_tensor(&mut rng, &[1, padded, dim], 1.5);
            let lens = Lengths::new(vec![n], padded).unwrap();
            let got = attention_out(&p, &x, &lens, kind, theta);
            let want = oracle::attention(
                &mat_from(x.data(), padded, dim),
                &to_oracle_attention(&p),
                n,
                oracle_kind(kind, theta),
            );
            let d = max_diff(got.data(), &want, n, dim);
            worst.set(worst.get().max(d));
            prop_assert!(d <= 1e-10, "max diff {}", d);
            Ok(())
        },
    );
    o.note(format!("attention max |diff| {:.2e}", worst.get()));

    let worst = Cell::new(0.0f64);
    property(
        &mut o,
        "FFT block",
        instance,
        |(seed, n, pad, heads, kind, theta)| {
            let mut rng = stream(seed, Purpose::Checks);
            let cfg = small_config(heads);
            let block = random_block(&cfg, &mut rng);
            let (dim, padded) = (cfg.model_dim, n + pad);
            let x = rand_tensor(&mut rng, &[1, padded, dim], 1.5);
            let lens = Lengths::new(vec![n], padded).unwrap();
            let mut tape = Tape::new();
            let vars = block.register(&mut tape, false);
            let xv = tape.constant(x.clone());
            let pol = policy(&mut tape, kind, theta);
            let (out, _) = fft_block(&mut tape, xv, &vars, &lens, &pol).unwrap();
            let want = oracle::block(
                &mat_from(x.data(), padded, dim),
                &to_oracle_block(&block),
                n,
                oracle_kind(kind, theta),
                1e-5,
            );
            let d = max_diff(tape.value(out).data(), &want, n, dim);
            worst.set(worst.get().max(d));
            prop_assert!(d <= 1e-10, "max diff {}", d);
            Ok(())
        },
    );
    o.note(format!("block max |diff| {:.2e}", worst.get()));
    o
}
