//! Central finite-difference checks of tape gradients.
//!
//! Each check records an op on random inputs in [−1, 1], reduces its output
//! to a scalar with fixed random weights, and compares the tape gradient of
//! that scalar with `(L(x + h) − L(x − h)) / 2h` at randomly chosen entries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::BinGrid;
use crate::error::{Error, Result};
use crate::nn::{build_plain, ModelGraph};
use crate::tensor::{BatchNormStats, Mode, Tape, Tensor, Var};
use crate::train::{record_loss, target_distributions};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the denominator of the relative error, so that gradients
/// that are zero up to rounding compare on an absolute scale.
pub const DENOM_FLOOR: f64 = 1e-6;
pub const MIN_PROBES: usize = 20;
/// Kink-straddling probes redrawn per requested probe before giving up.
pub const MAX_REDRAWS: usize = 10;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.probes > 0
    }
}

type OpFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..=1.0)).expect("valid shape")
}

/// Uniform in ±[0.1, 1]: keeps kinked ops (relu, |·|) away from the step at 0.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..=1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
    .expect("valid shape")
}

/// Scalar `Σ r ⊙ f(inputs)`, with `r` fixed by `weights_seed`.
fn scalar_loss(tape: &mut Tape, out: Var, weights_seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let r = (0..tape.value(out).len())
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    let weighted = tape.mul_const(out, r)?;
    Ok(tape.sum(weighted))
}

fn eval(f: &OpFn, inputs: &[Tensor], weights_seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars)?;
    let l = scalar_loss(&mut tape, out, weights_seed)?;
    Ok(tape.value(l)[0])
}

/// Checks `f` against finite differences at `probes` random entries of the
/// inputs flagged in `differentiable`.
pub fn check_op(
    name: &str,
    inputs: Vec<Tensor>,
    differentiable: &[bool],
    f: &OpFn,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let weights_seed = rng.random();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| {
            if d {
                tape.leaf(&t.clone().requiring_grad())
            } else {
                tape.constant(t)
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let l = scalar_loss(&mut tape, out, weights_seed)?;
    tape.backward(l)?;

    let candidates: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(i, _)| differentiable[*i])
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid(format!("{name}: nothing to differentiate")));
    }
    let mut worst: f64 = 0.0;
    let mut perturbed = inputs.clone();
    for _ in 0..probes {
        let (i, j) = candidates[rng.random_range(0..candidates.len())];
        let analytic = tape.grad(vars[i]).map_or(0.0, |g| g[j]);
        let x0 = inputs[i].data()[j];
        perturbed[i].data_mut()[j] = x0 + STEP;
        let up = eval(f, &perturbed, weights_seed)?;
        perturbed[i].data_mut()[j] = x0 - STEP;
        let down = eval(f, &perturbed, weights_seed)?;
        perturbed[i].data_mut()[j] = x0;
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * STEP)));
    }
    Ok(CheckResult {
        name: name.to_string(),
        probes,
        max_rel_error: worst,
    })
}

/// The cascade loss of `model` on a fixed batch, batch statistics in train mode.
struct Evaluation {
    loss: f64,
    relu_pattern: Vec<bool>,
    model: ModelGraph,
}

fn model_loss(model: &ModelGraph, images: &[Tensor], ages: &[f64], grid: &BinGrid) -> Result<Evaluation> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let rec = m.record(&mut tape, images, Mode::Train, None)?;
    let targets = target_distributions(ages, grid)?;
    let loss = record_loss(
        &mut tape,
        &rec,
        &targets,
        ages,
        crate::loss::DEFAULT_ALPHA,
        crate::loss::DEFAULT_LAMBDA,
    )?;
    tape.backward(loss.total)?;
    m.zero_grad();
    m.accumulate_grads(&tape, &rec)?;
    Ok(Evaluation {
        loss: tape.value(loss.total)[0],
        relu_pattern: tape.relu_pattern(),
        model: m,
    })
}

/// Finite-difference check of the full cascade loss with respect to randomly
/// chosen parameters of `model`.
///
/// A probe whose two shifted evaluations disagree on any ReLU activation
/// straddles a kink, where the central difference is not an estimate of the
/// derivative. Such probes are redrawn, up to `MAX_REDRAWS` per probe.
pub fn check_model(
    name: &str,
    model: &ModelGraph,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let grid = BinGrid::default_training();
    let batch = 3;
    let [h, w, c] = model.input_shape();
    let images: Vec<Tensor> = (0..model.branches())
        .map(|_| uniform(&[batch, h, w, c], rng))
        .collect();
    let ages: Vec<f64> = (0..batch).map(|_| rng.random_range(5.0..105.0)).collect();
    let with_grads = model_loss(model, &images, &ages, &grid)?.model;
    let keys: Vec<(String, usize)> = model.params().map(|(k, t)| (k.to_string(), t.len())).collect();
    let total: usize = keys.iter().map(|(_, n)| n).sum();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut redrawn = 0;
    while checked < probes && redrawn < MAX_REDRAWS * probes {
        // Uniform over all scalar parameters.
        let mut idx = rng.random_range(0..total);
        let (key, j) = keys
            .iter()
            .find_map(|(k, n)| {
                if idx < *n {
                    Some((k.clone(), idx))
                } else {
                    idx -= n;
                    None
                }
            })
            .expect("index within total");
        let mut shifted = model.clone();
        let x0 = model.param(&key).expect("key").data()[j];
        shifted.param_mut(&key).expect("key").data_mut()[j] = x0 + STEP;
        let up = model_loss(&shifted, &images, &ages, &grid)?;
        shifted.param_mut(&key).expect("key").data_mut()[j] = x0 - STEP;
        let down = model_loss(&shifted, &images, &ages, &grid)?;
        if up.relu_pattern != down.relu_pattern {
            redrawn += 1;
            continue;
        }
        let analytic = with_grads
            .param(&key)
            .and_then(|t| t.grad())
            .map_or(0.0, |g| g[j]);
        worst = worst.max(relative_error(analytic, (up.loss - down.loss) / (2.0 * STEP)));
        checked += 1;
    }
    Ok(CheckResult {
        name: name.to_string(),
        probes: checked,
        max_rel_error: worst,
    })
}

fn random_distribution(rows: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::new([rows, n], data).expect("valid shape")
}

/// Runs the finite-difference suite over every op kind and the plain model.
pub fn run_suite(seed: u64, probes: usize) -> Result<Vec<CheckResult>> {
    let probes = probes.max(MIN_PROBES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let x = uniform(&[2, 7, 6, 3], r);
    let k = uniform(&[3, 3, 3, 4], r);
    let b = uniform(&[4], r);
    out.push(check_op(
        "conv2d",
        vec![x.clone(), k.clone(), b.clone()],
        &[true; 3],
        &|t, v| t.conv2d(v[0], v[1], v[2], 1),
        probes,
        r,
    )?);
    out.push(check_op(
        "conv2d_stride2",
        vec![x, k, b],
        &[true; 3],
        &|t, v| t.conv2d(v[0], v[1], v[2], 2),
        probes,
        r,
    )?);
    let k1 = uniform(&[1, 1, 3, 3], r);
    let b1 = uniform(&[3], r);
    out.push(check_op(
        "conv2d_1x1",
        vec![uniform(&[2, 4, 4, 3], r), k1, b1],
        &[true; 3],
        &|t, v| t.conv2d(v[0], v[1], v[2], 1),
        probes,
        r,
    )?);

    out.push(check_op(
        "avgpool2d",
        vec![uniform(&[2, 7, 7, 3], r)],
        &[true],
        &|t, v| t.avgpool2d(v[0], 2, 2),
        probes,
        r,
    )?);

    let bn_in = vec![uniform(&[3, 4, 4, 3], r), uniform(&[3], r), uniform(&[3], r)];
    out.push(check_op(
        "batchnorm_train",
        bn_in.clone(),
        &[true; 3],
        &|t, v| {
            let mut s = BatchNormStats::new(3);
            t.batchnorm(v[0], v[1], v[2], &mut s, Mode::Train, 0.99, 1e-5)
        },
        probes,
        r,
    )?);
    let stats = BatchNormStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 0.8],
    };
    out.push(check_op(
        "batchnorm_infer",
        bn_in,
        &[true; 3],
        &move |t, v| {
            let mut s = stats.clone();
            t.batchnorm(v[0], v[1], v[2], &mut s, Mode::Infer, 0.99, 1e-5)
        },
        probes,
        r,
    )?);

    out.push(check_op(
        "dense",
        vec![uniform(&[4, 5], r), uniform(&[5, 3], r), uniform(&[3], r)],
        &[true; 3],
        &|t, v| t.dense(v[0], v[1], Some(v[2])),
        probes,
        r,
    )?);
    out.push(check_op(
        "dense_no_bias",
        vec![uniform(&[4, 5], r), uniform(&[5, 3], r)],
        &[true; 2],
        &|t, v| t.dense(v[0], v[1], None),
        probes,
        r,
    )?);
    out.push(check_op(
        "softmax",
        vec![uniform(&[3, 6], r)],
        &[true],
        &|t, v| t.softmax(v[0]),
        probes,
        r,
    )?);
    out.push(check_op(
        "relu",
        vec![off_kink(&[4, 5], r)],
        &[true],
        &|t, v| Ok(t.relu(v[0])),
        probes,
        r,
    )?);
    out.push(check_op(
        "sigmoid",
        vec![uniform(&[4, 5], r)],
        &[true],
        &|t, v| Ok(t.sigmoid(v[0])),
        probes,
        r,
    )?);
    out.push(check_op(
        "add",
        vec![uniform(&[3, 4], r), uniform(&[3, 4], r)],
        &[true; 2],
        &|t, v| t.add(v[0], v[1]),
        probes,
        r,
    )?);
    out.push(check_op(
        "mul",
        vec![uniform(&[3, 4], r), uniform(&[3, 4], r)],
        &[true; 2],
        &|t, v| t.mul(v[0], v[1]),
        probes,
        r,
    )?);
    out.push(check_op(
        "scale_channels",
        vec![uniform(&[2, 3, 3, 4], r), uniform(&[2, 4], r)],
        &[true; 2],
        &|t, v| t.scale_channels(v[0], v[1]),
        probes,
        r,
    )?);
    out.push(check_op(
        "concat",
        vec![uniform(&[2, 3], r), uniform(&[2, 5], r)],
        &[true; 2],
        &|t, v| t.concat(&[v[0], v[1]], 1),
        probes,
        r,
    )?);
    out.push(check_op(
        "flatten",
        vec![uniform(&[2, 3, 3, 2], r)],
        &[true],
        &|t, v| t.flatten(v[0]),
        probes,
        r,
    )?);
    out.push(check_op(
        "global_avg_pool",
        vec![uniform(&[2, 3, 3, 4], r)],
        &[true],
        &|t, v| t.global_avg_pool(v[0]),
        probes,
        r,
    )?);
    let factors: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..=1.0)).collect();
    out.push(check_op(
        "mul_const",
        vec![uniform(&[3, 4], r)],
        &[true],
        &move |t, v| t.mul_const(v[0], factors.clone()),
        probes,
        r,
    )?);
    out.push(check_op(
        "scale",
        vec![uniform(&[3, 4], r)],
        &[true],
        &|t, v| Ok(t.scale(v[0], -2.5)),
        probes,
        r,
    )?);
    out.push(check_op(
        "sum",
        vec![uniform(&[3, 4], r)],
        &[true],
        &|t, v| Ok(t.sum(v[0])),
        probes,
        r,
    )?);
    out.push(check_op(
        "l1_norm",
        vec![off_kink(&[3, 4], r)],
        &[true],
        &|t, v| Ok(t.l1_norm(v[0])),
        probes,
        r,
    )?);

    let target = random_distribution(3, 5, r);
    out.push(check_op(
        "kl_div",
        vec![uniform(&[3, 5], r)],
        &[true],
        &move |t, v| {
            let p = t.softmax(v[0])?;
            t.kl_div(&target, p)
        },
        probes,
        r,
    )?);
    // Targets at least 0.1 away from every prediction keep |t − p| off its kink.
    let pred = uniform(&[4], r);
    let ages: Vec<f64> = pred
        .data()
        .iter()
        .map(|p| p + if r.random::<bool>() { 0.5 } else { -0.5 })
        .collect();
    out.push(check_op(
        "mae",
        vec![pred],
        &[true],
        &move |t, v| t.mae(&ages, v[0]),
        probes,
        r,
    )?);

    let se_in = vec![
        uniform(&[2, 3, 3, 4], r),
        uniform(&[4, 2], r),
        uniform(&[2, 4], r),
    ];
    out.push(check_op(
        "se_block",
        se_in,
        &[true; 3],
        &|t, v| {
            let p = t.global_avg_pool(v[0])?;
            let s = t.dense(p, v[1], None)?;
            let s = t.relu(s);
            let e = t.dense(s, v[2], None)?;
            let g = t.sigmoid(e);
            t.scale_channels(v[0], g)
        },
        probes,
        r,
    )?);

    let mut plain = build_plain(false, false);
    plain.initialize(seed, BinGrid::default_training().bins())?;
    out.push(check_model("plain_model_loss", &plain, probes, r)?);
    Ok(out)
}

pub fn render_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(2).max(2);
    let mut s = format!("{:<width$}  probes  max_rel_error  status\n", "op");
    for r in results {
        s.push_str(&format!(
            "{:<width$}  {:>6}  {:>13.3e}  {}\n",
            r.name,
            r.probes,
            r.max_rel_error,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
