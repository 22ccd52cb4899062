use std::collections::{BTreeMap, HashMap};

use rand::{Rng, RngCore};

use super::{ConcatMode, LayerKind, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Mode, Tape, Tensor, Var};

/// Handles to the interesting values of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Recorded {
    /// `Feat` softmax output, `[N, n_bins]`.
    pub distribution: Var,
    /// `Pred` output, `[N]`.
    pub age: Var,
    /// `Feat` weight matrix, the target of the L1 penalty.
    pub feat_weight: Var,
    /// Concatenated bottleneck feeding the head, `[N, width]`.
    pub bottleneck: Var,
    params: BTreeMap<String, Var>,
}

impl Recorded {
    pub fn param(&self, key: &str) -> Option<Var> {
        self.params.get(key).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[N, n_bins]`
    pub distribution: Tensor,
    pub age: Vec<f64>,
}

impl ModelGraph {
    fn batch_size(&self, inputs: &[Tensor]) -> Result<usize> {
        if inputs.len() != self.branches {
            return Err(Error::shape(format!(
                "model has {} branch(es) but {} input(s) were given",
                self.branches,
                inputs.len()
            )));
        }
        let [h, w, c] = self.input_shape;
        let mut batch = None;
        for (i, x) in inputs.iter().enumerate() {
            let n = match *x.shape() {
                [xh, xw, xc] if [xh, xw, xc] == [h, w, c] => 1,
                [n, xh, xw, xc] if [xh, xw, xc] == [h, w, c] => n,
                ref s => {
                    return Err(Error::shape(format!(
                        "input {i}: expected {h}×{w}×{c} (optionally batched), got {s:?}"
                    )))
                }
            };
            if *batch.get_or_insert(n) != n {
                return Err(Error::shape("branch inputs have different batch sizes"));
            }
        }
        Ok(batch.unwrap_or(1))
    }

    /// Records a forward pass. Train mode uses batch statistics (and
    /// updates the running ones) and applies dropout with `rng`.
    pub fn record(
        &mut self,
        tape: &mut Tape,
        inputs: &[Tensor],
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Recorded> {
        match mode {
            Mode::Train => {
                let mut stats = std::mem::take(&mut self.stats);
                let out = self.run(tape, inputs, mode, rng, &mut stats);
                self.stats = stats;
                out
            }
            Mode::Infer => {
                let mut stats = self.stats.clone();
                self.run(tape, inputs, mode, rng, &mut stats)
            }
        }
    }

    /// One forward pass returning the distribution and the regressed ages.
    pub fn forward(
        &mut self,
        inputs: &[Tensor],
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Prediction> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, inputs, mode, rng)?;
        Ok(Self::prediction(&tape, &rec))
    }

    /// Inference-mode forward pass; does not touch the model.
    pub fn infer(&self, inputs: &[Tensor]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut stats = self.stats.clone();
        let rec = self.run(&mut tape, inputs, Mode::Infer, None, &mut stats)?;
        Ok(Self::prediction(&tape, &rec))
    }

    fn prediction(tape: &Tape, rec: &Recorded) -> Prediction {
        Prediction {
            distribution: tape.tensor(rec.distribution),
            age: tape.value(rec.age).to_vec(),
        }
    }

    /// Adds the tape gradients of every parameter into the model's gradient slots.
    pub fn accumulate_grads(&mut self, tape: &Tape, rec: &Recorded) -> Result<()> {
        for (key, var) in &rec.params {
            if let (Some(g), Some(p)) = (tape.grad(*var), self.params.get_mut(key)) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn run(
        &self,
        tape: &mut Tape,
        inputs: &[Tensor],
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
        stats: &mut BTreeMap<String, BatchNormStats>,
    ) -> Result<Recorded> {
        let n = self.batch_size(inputs)?;
        let [h, w, c] = self.input_shape;

        let mut params = BTreeMap::new();
        for (key, t) in &self.params {
            let v = match mode {
                Mode::Train => tape.leaf(t),
                Mode::Infer => tape.constant(t),
            };
            params.insert(key.clone(), v);
        }
        let p = |key: &str| {
            params
                .get(key)
                .copied()
                .ok_or_else(|| Error::invalid(format!("missing parameter {key}")))
        };

        let mut bottlenecks = Vec::with_capacity(self.branches);
        for (b, input) in inputs.iter().enumerate() {
            let batched = input.clone().reshape([n, h, w, c])?;
            let mut x = tape.constant(&batched);
            let copy = Some(b);
            let mut outputs: HashMap<&str, Var> = HashMap::new();
            for layer in self.trunk() {
                let name = layer.name.as_str();
                x = match &layer.kind {
                    LayerKind::Conv { stride, .. } => tape.conv2d(
                        x,
                        p(&self.key(copy, name, "kernel"))?,
                        p(&self.key(copy, name, "bias"))?,
                        *stride,
                    )?,
                    LayerKind::BatchNorm { .. } => {
                        let key = self.key(copy, name, "stats");
                        let key = key.trim_end_matches(".stats");
                        let st = stats
                            .get_mut(key)
                            .ok_or_else(|| Error::invalid(format!("missing statistics {key}")))?;
                        tape.batchnorm(
                            x,
                            p(&self.key(copy, name, "gamma"))?,
                            p(&self.key(copy, name, "beta"))?,
                            st,
                            mode,
                            self.bn_momentum,
                            self.bn_epsilon,
                        )?
                    }
                    LayerKind::Relu => tape.relu(x),
                    LayerKind::AvgPool { window, stride } => tape.avgpool2d(x, *window, *stride)?,
                    LayerKind::Se { .. } => {
                        let pooled = tape.global_avg_pool(x)?;
                        let s = tape.dense(pooled, p(&self.key(copy, name, "squeeze"))?, None)?;
                        let s = tape.relu(s);
                        let e = tape.dense(s, p(&self.key(copy, name, "excite"))?, None)?;
                        let gate = tape.sigmoid(e);
                        tape.scale_channels(x, gate)?
                    }
                    LayerKind::Residual { from } => {
                        let skip = *outputs.get(from.as_str()).ok_or_else(|| {
                            Error::invalid(format!("{name}: shortcut source {from} not computed"))
                        })?;
                        tape.add(x, skip)?
                    }
                    other => return Err(Error::invalid(format!("{name}: {other:?} is not a trunk layer"))),
                };
                outputs.insert(name, x);
            }
            bottlenecks.push(x);
        }

        let mut x = match self.layers[self.join_index()].kind {
            LayerKind::Flatten => tape.flatten(bottlenecks[0])?,
            LayerKind::Concat { mode: cm } => {
                let parts = bottlenecks
                    .iter()
                    .map(|&v| match cm {
                        ConcatMode::Flatten => tape.flatten(v),
                        ConcatMode::Pooled => tape.global_avg_pool(v),
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.concat(&parts, 1)?
            }
            _ => unreachable!("validated join"),
        };
        let bottleneck = x;

        let mut distribution = None;
        let mut feat_weight = None;
        for layer in &self.layers[self.join_index() + 1..] {
            let name = layer.name.as_str();
            x = match &layer.kind {
                LayerKind::Dropout { rate } if mode == Mode::Train && *rate > 0.0 => {
                    let rng = rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::invalid("train-mode dropout needs an rng"))?;
                    let keep = 1.0 - rate;
                    let mask = (0..tape.value(x).len())
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    tape.mul_const(x, mask)?
                }
                LayerKind::Dropout { .. } => x,
                LayerKind::Dense { .. } => {
                    let wv = p(&self.key(None, name, "weight"))?;
                    if distribution.is_none() {
                        feat_weight = Some(wv);
                    }
                    tape.dense(x, wv, Some(p(&self.key(None, name, "bias"))?))?
                }
                LayerKind::Softmax => {
                    let y = tape.softmax(x)?;
                    distribution = Some(y);
                    y
                }
                other => return Err(Error::invalid(format!("{name}: {other:?} is not a head layer"))),
            };
        }
        let age = tape.reshape(x, vec![n])?;
        Ok(Recorded {
            distribution: distribution.expect("validated head"),
            age,
            feat_weight: feat_weight.expect("validated head"),
            bottleneck,
            params,
        })
    }
}
