//! Mini-batch training of the cascade loss `α·(KL + λ·‖W₁‖₁) + MAE`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::random_erase;
use crate::codec::{encode, BinGrid};
use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::LossReport;
use crate::nn::{build, ModelGraph, Recorded};
use crate::optim::{Adam, Plateau};
use crate::tensor::{Mode, Tape, Tensor, Var};

/// Samples evaluated per forward pass outside training.
const EVAL_BATCH: usize = 50;

pub const LOG_HEADER: &str = "epoch,kl,mae,total,lr,val_mae";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's batches, train mode.
    pub kl: f64,
    pub mae: f64,
    pub total: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub val_mae: Option<f64>,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let val = self.val_mae.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{val}",
            self.epoch, self.kl, self.mae, self.total, self.lr
        )
    }
}

pub fn render_log(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub log: Vec<EpochLog>,
    /// Inference-mode MAE on the training samples after storage rounding.
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

/// Stacks the `branch`-th input of each sample into one `[B, H, W, C]` tensor.
fn stack(samples: &[&Sample], branch: usize) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?
        .inputs
        .get(branch)
        .ok_or_else(|| Error::shape(format!("sample has no input for branch {branch}")))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * samples.len());
    for s in samples {
        let t = s
            .inputs
            .get(branch)
            .filter(|t| t.shape() == first.shape())
            .ok_or_else(|| Error::shape("samples in a batch disagree on branch inputs"))?;
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

fn batch_inputs(model: &ModelGraph, samples: &[&Sample]) -> Result<Vec<Tensor>> {
    (0..model.branches()).map(|b| stack(samples, b)).collect()
}

/// Inference-mode mean absolute error over `samples`.
pub fn evaluate_mae(model: &ModelGraph, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on zero samples"));
    }
    let mut err = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let pred = model.infer(&batch_inputs(model, &refs)?)?;
        err += pred
            .age
            .iter()
            .zip(chunk)
            .map(|(p, s)| (p - s.age).abs())
            .sum::<f64>();
    }
    Ok(err / samples.len() as f64)
}

/// Terms of the cascade loss recorded on a tape.
pub struct LossVars {
    pub kl: Var,
    pub l1: Var,
    pub mae: Var,
    pub total: Var,
}

/// Records the cascade loss for one batch onto `tape`.
pub fn record_loss(
    tape: &mut Tape,
    rec: &Recorded,
    targets: &Tensor,
    ages: &[f64],
    alpha: f64,
    lambda: f64,
) -> Result<LossVars> {
    let kl = tape.kl_div(targets, rec.distribution)?;
    let l1 = tape.l1_norm(rec.feat_weight);
    let mae = tape.mae(ages, rec.age)?;
    let reg = tape.scale(l1, lambda);
    let cascade = tape.add(kl, reg)?;
    let weighted = tape.scale(cascade, alpha);
    let total = tape.add(weighted, mae)?;
    Ok(LossVars { kl, l1, mae, total })
}

pub fn target_distributions(ages: &[f64], grid: &BinGrid) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ages.len() * grid.n_bins());
    for &a in ages {
        data.extend(encode(a, grid).map_err(|e| Error::Data(e.to_string()))?.weights);
    }
    Tensor::new([ages.len(), grid.n_bins()], data)
}

/// Builds the configured model, seeds its weights and trains it.
pub fn train(cfg: &TrainConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutcome> {
    train_with(cfg, train_set, val_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut model = build(&cfg.architecture()?)?;
    model.initialize(cfg.seed, grid.bins())?;
    let log = train_model(&mut model, cfg, train_set, val_set, on_epoch)?;
    let train_mae = evaluate_mae(&model, train_set)?;
    let val_mae = match val_set {
        [] => None,
        v => Some(evaluate_mae(&model, v)?),
    };
    Ok(TrainOutcome {
        model,
        log,
        train_mae,
        val_mae,
    })
}

/// Trains an existing model in place and returns the epoch log. Parameters
/// are rounded to weight-file precision at the end.
pub fn train_model(
    model: &mut ModelGraph,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let grid = cfg.grid()?;
    if grid.n_bins() != model.n_bins() {
        return Err(Error::Config(format!(
            "bin grid has {} bins but the model head has {}",
            grid.n_bins(),
            model.n_bins()
        )));
    }
    for s in train_set.iter().chain(val_set) {
        if !grid.contains(s.age) {
            return Err(Error::Data(format!(
                "age {} outside [{}, {}]",
                s.age,
                grid.first(),
                grid.last()
            )));
        }
    }
    model.set_dropout(cfg.dropout_rate)?;

    // Initialization uses `seed`; shuffling, dropout and erasing draw from a separate stream.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.adam());
    let mut plateau = Plateau::new(cfg.plateau_patience, cfg.plateau_min_delta, cfg.plateau_factor)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut kl_sum, mut mae_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<Sample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            if cfg.erase_probability > 0.0 {
                for s in &mut batch {
                    for x in &mut s.inputs {
                        *x = random_erase(
                            x,
                            cfg.erase_probability,
                            (cfg.erase_area_min, cfg.erase_area_max),
                            &mut rng,
                        )?;
                    }
                }
            }
            let refs: Vec<&Sample> = batch.iter().collect();
            let inputs = batch_inputs(model, &refs)?;
            let ages: Vec<f64> = batch.iter().map(|s| s.age).collect();
            let targets = target_distributions(&ages, &grid)?;

            let mut tape = Tape::new();
            let rec = model.record(&mut tape, &inputs, Mode::Train, Some(&mut rng))?;
            // A probability that underflows to zero under a positive target makes KL infinite.
            let loss =
                record_loss(&mut tape, &rec, &targets, &ages, cfg.alpha, cfg.lambda).map_err(
                    |e| match e {
                        Error::InvalidArgument(m) => {
                            Error::NonFinite(format!("training loss at epoch {epoch}, batch {}: {m}", b + 1))
                        }
                        other => other,
                    },
                )?;
            let report = LossReport::new(
                tape.value(loss.kl)[0],
                tape.value(loss.l1)[0],
                tape.value(loss.mae)[0],
                cfg.alpha,
                cfg.lambda,
            );
            if !report.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {} (kl {}, mae {})",
                    b + 1,
                    report.kl,
                    report.mae
                )));
            }
            tape.backward(loss.total)?;
            model.zero_grad();
            model.accumulate_grads(&tape, &rec)?;
            adam.step(model.params_mut())?;

            let n = batch.len() as f64;
            kl_sum += report.kl * n;
            mae_sum += report.mae * n;
            total_sum += report.total * n;
        }
        let n = train_set.len() as f64;
        let val_mae = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_mae(model, val_set)?)
        };
        let entry = EpochLog {
            epoch,
            kl: kl_sum / n,
            mae: mae_sum / n,
            total: total_sum / n,
            lr: adam.config.lr,
            val_mae,
        };
        adam.config.lr = plateau.observe(val_mae.unwrap_or(entry.mae), adam.config.lr);
        on_epoch(&entry);
        log.push(entry);
    }
    model.zero_grad();
    model.round_to_storage_precision();
    Ok(log)
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(render_log(log).as_bytes())
        .map_err(|e| Error::io(path, e))
}
