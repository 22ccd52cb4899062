//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! A FAIL is a reported result, not a harness error, so the run exits 0
//! unless `ACCEPTANCE_STRICT=1` is set. Panics always fail the run.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use c3ae::codec::{decode, encode, make_bins, BinGrid};
use c3ae::config::{ModelKind, TrainConfig};
use c3ae::cost::depthwise_reduction_ratio;
use c3ae::data::{
    load_samples, model_inputs, synth_dataset, write_synthetic, Sample, SynthSpec, DEFAULT_SCALES,
};
use c3ae::gradcheck::run_suite;
use c3ae::loss::{kl_divergence, LossReport};
use c3ae::nn::{deserialize, serialize};
use c3ae::train::train;
use c3ae::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXACT_TOL: f64 = 1e-12;
const DECODE_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const MIN_PROBES: usize = 20;
const LEARN_MAE: f64 = 1.0;
const CASCADE_SLACK: f64 = 0.25;
const DESK_EPOCHS: usize = 300;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_c3ae"))
        .args(args)
        .output()
        .expect("spawn c3ae");
    assert!(out.status.success(), "c3ae {args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

/// `(layer, params, macc)` rows of `analyze --format csv`, total last.
fn analyze_rows(arch: &str) -> Vec<(String, u64, u64)> {
    cli(&["analyze", "--arch", arch, "--format", "csv"])
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[4].parse().unwrap(), f[5].parse().unwrap())
        })
        .collect()
}

fn param_counts() -> Verdict {
    // Text output is what a user reads; parse the params column from it.
    let text = cli(&["analyze", "--arch", "plain"]);
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with("dense macc"))
        .map(|l| l.split_whitespace().collect())
        .collect();
    let per_layer: Vec<u64> = rows[..rows.len() - 1]
        .iter()
        .map(|r| r[r.len() - 2].parse().unwrap())
        .collect();
    let total_row = rows.last().unwrap();
    let total: u64 = total_row[total_row.len() - 2].parse().unwrap();
    let expect = [896, 128, 9248, 128, 9248, 128, 9248, 128, 1056, 6156, 13];
    verdict(
        per_layer == expect && total == 36377 && total_row[0] == "Total",
        format!("per-layer {per_layer:?}, total {total}"),
    )
}

fn macc_counts() -> Verdict {
    let rows = analyze_rows("plain");
    let conv: Vec<u64> = rows
        .iter()
        .filter(|(name, _, _)| name.starts_with("Conv"))
        .map(|r| r.2)
        .collect();
    let total = rows.last().unwrap().2;
    verdict(
        conv == [3_321_216, 7_750_656, 1_327_104, 147_456, 16_384] && total == 12_562_816,
        format!("conv {conv:?}, total {total}"),
    )
}

fn reduction_ratio() -> Verdict {
    let r = depthwise_reduction_ratio(144.0, 144.0, 32.0, 32.0, 3.0).unwrap();
    let mut worst = (r - 2.390625).abs();
    for n in [8.0, 32.0, 144.0] {
        let got = depthwise_reduction_ratio(n, n, n, n, 3.0).unwrap();
        worst = worst.max((got - (1.0 / n + 1.0 / 9.0)).abs());
    }
    verdict(
        worst < EXACT_TOL,
        format!("ratio(144,144,32,32,3) = {r}, max deviation {worst:e}"),
    )
}

fn two_points() -> Verdict {
    let grid = make_bins(10.0, 80.0, 10.0).unwrap();
    let v = encode(68.0, &grid).unwrap().weights;
    let expect = [0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.8, 0.0];
    let enc_err = v.iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(
        if v.len() == expect.len() {
            0.0
        } else {
            f64::INFINITY
        },
        f64::max,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train_grid = BinGrid::default_training();
    let mut dec_err: f64 = 0.0;
    for i in 0..10_000 {
        let g = if i % 2 == 0 { &grid } else { &train_grid };
        let age = rng.random_range(g.first()..=g.last());
        dec_err = dec_err.max((decode(&encode(age, g).unwrap().weights, g).unwrap() - age).abs());
    }
    let cli_line = cli(&["encode", "--age", "68", "--k", "10", "--min", "10", "--max", "80"]);
    verdict(
        enc_err < EXACT_TOL && dec_err < DECODE_TOL && cli_line == "0,0,0,0,0,0.2,0.8,0\n",
        format!("encode {v:?}, max decode error {dec_err:e}"),
    )
}

fn gradient_oracle() -> Verdict {
    let results = run_suite(7, MIN_PROBES).unwrap();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let has_model = results.iter().any(|r| r.name == "plain_model_loss");
    let ok = has_model
        && results
            .iter()
            .all(|r| r.max_rel_error < GRAD_TOL && r.probes >= MIN_PROBES);
    verdict(
        ok,
        format!(
            "{} checks, worst {} at {:.3e}",
            results.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn desk_samples(branches: usize) -> Vec<Sample> {
    synth_dataset(&SynthSpec::default())
        .unwrap()
        .into_iter()
        .map(|s| Sample {
            inputs: model_inputs(&s.image, None, branches, DEFAULT_SCALES).unwrap(),
            age: s.age,
        })
        .collect()
}

/// Schedule shared by every desk-scale run: regularizers off, small batches.
fn desk_config(model: ModelKind) -> TrainConfig {
    TrainConfig {
        model,
        epochs: DESK_EPOCHS,
        batch_size: 10,
        dropout_rate: 0.0,
        erase_probability: 0.0,
        val_fraction: 0.0,
        ..TrainConfig::phase2()
    }
}

fn learnability() -> Verdict {
    let plain = train(&desk_config(ModelKind::Plain), &desk_samples(1), &[]).unwrap();
    let full = train(&desk_config(ModelKind::Full), &desk_samples(3), &[]).unwrap();
    verdict(
        plain.train_mae < LEARN_MAE && full.train_mae <= plain.train_mae,
        format!(
            "train MAE plain {:.4}, full {:.4}",
            plain.train_mae, full.train_mae
        ),
    )
}

fn cascade() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic(dir.path(), &SynthSpec::default()).unwrap();
    let split = manifest.split(0.2, 0).unwrap();
    let samples = load_samples(&manifest, 1, DEFAULT_SCALES).unwrap();
    let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| samples[i].clone()).collect() };
    let (tr, va) = (pick(&split.train), pick(&split.val));
    let val_at_end = |alpha: f64| {
        let cfg = TrainConfig {
            alpha,
            ..desk_config(ModelKind::Plain)
        };
        let out = train(&cfg, &tr, &va).unwrap();
        out.log[DESK_EPOCHS - 1].val_mae.unwrap()
    };
    let with = val_at_end(10.0);
    let without = val_at_end(0.0);
    verdict(
        with <= without + CASCADE_SLACK,
        format!("val MAE at epoch {DESK_EPOCHS}: alpha=10 {with:.4}, alpha=0 {without:.4}"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for (kind, branches) in [(ModelKind::Plain, 1), (ModelKind::Full, 3)] {
        let data: Vec<Sample> = desk_samples(branches).into_iter().take(10).collect();
        let cfg = TrainConfig {
            model: kind,
            epochs: 3,
            batch_size: 5,
            ..TrainConfig::phase2()
        };
        let runs: Vec<_> = (0..2)
            .map(|run| {
                let out = train(&cfg, &data[..8], &data[8..]).unwrap();
                let p = dir.path().join(format!("{}_{run}.c3ae", kind.as_str()));
                std::fs::write(&p, serialize(&out.model)).unwrap();
                (p, out.model)
            })
            .collect();
        let a = std::fs::read(&runs[0].0).unwrap();
        let b = std::fs::read(&runs[1].0).unwrap();
        let model = deserialize(&a).unwrap();
        let reserialized = serialize(&model);
        let original = &runs[0].1;
        let pre = original.infer(&data[9].inputs).unwrap();
        let post = model.infer(&data[9].inputs).unwrap();
        let bits = |p: &c3ae::nn::Prediction| -> Vec<u64> {
            p.distribution
                .data()
                .iter()
                .chain(&p.age)
                .map(|v| v.to_bits())
                .collect()
        };
        let same = a == b && reserialized == a && bits(&pre) == bits(&post);
        ok &= same;
        notes.push(format!(
            "{} {} bytes {}",
            kind.as_str(),
            a.len(),
            if same { "identical" } else { "differ" }
        ));
    }
    verdict(ok, notes.join(", "))
}

fn loss_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut identity: f64 = 0.0;
    for _ in 0..1000 {
        let (kl, l1, mae) = (
            rng.random_range(0.0..5.0),
            rng.random_range(0.0..500.0),
            rng.random_range(0.0..50.0),
        );
        let (alpha, lambda) = (rng.random_range(0.0..20.0), rng.random_range(0.0..0.01));
        let r = LossReport::new(kl, l1, mae, alpha, lambda);
        identity = identity.max((r.total - (alpha * (kl + lambda * l1) + mae)).abs());
    }
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(2..16);
        let mut dist = || {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0)).collect();
            let s: f64 = raw.iter().sum();
            Tensor::new([1, n], raw.iter().map(|v| v / s).collect()).unwrap()
        };
        let (p, q) = (dist(), dist());
        min_kl = min_kl.min(kl_divergence(&p, &q).unwrap());
    }
    verdict(
        identity < EXACT_TOL && min_kl >= 0.0,
        format!("identity error {identity:e}, min KL {min_kl:e}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Verdict); 9] = [
        ("plain parameter counts", Duration::from_secs(1), param_counts),
        ("plain conv MACC counts", Duration::from_secs(1), macc_counts),
        (
            "depthwise reduction ratio",
            Duration::from_secs(1),
            reduction_ratio,
        ),
        ("two-point encoding", Duration::from_secs(1), two_points),
        ("gradient oracle", Duration::from_secs(60), gradient_oracle),
        ("desk-scale learnability", Duration::from_secs(600), learnability),
        ("cascade regression guard", Duration::from_secs(600), cascade),
        (
            "determinism and serialization",
            Duration::from_secs(30),
            determinism,
        ),
        ("loss algebra", Duration::from_secs(5), loss_algebra),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = run();
        let took = t.elapsed();
        // Over-budget runtimes are reported but only the checks decide the verdict.
        let slow = if took > *budget { " (over time budget)" } else { "" };
        let status = if v.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!v.pass);
        println!(
            "{status} {}. {name}: {} [{:.2}s{slow}]",
            i + 1,
            v.detail,
            took.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
