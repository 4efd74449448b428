//! Mini-batch training with Adam, evaluation, and resumable train state.

use std::fs;
use std::path::Path;

use evmf_tensor::{read_checkpoint, save_checkpoint, write_checkpoint, Precision, SeedRng, Tensor};
use rayon::prelude::*;

use crate::error::{io_err, CoreError, Result};
use crate::metrics::{metrics_from_predictions, Metrics};
use crate::model::{argmax, softmax_row, Model, Sample};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub precision: Precision,
    /// Stop once a clean evaluation pass on the training set reaches this accuracy.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Precision::F64,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::Config("batch_size, lr, beta1, beta2 out of range".into()));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model.store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in model.store.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
            if cfg.precision == Precision::F32 {
                for w in p.value.data_mut() {
                    *w = *w as f32 as f64;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam: Adam,
    pub rng: SeedRng,
    pub best_accuracy: f64,
    pub best_epoch: usize,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        Self {
            epoch: 0,
            adam: Adam::new(model),
            rng: SeedRng::new(model.cfg.seed).fork("shuffle"),
            best_accuracy: 0.0,
            best_epoch: 0,
        }
    }

    fn split_u64(v: u64) -> Tensor {
        Tensor::vector(vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64])
    }

    fn join_u64(t: &Tensor) -> Result<u64> {
        match t.data() {
            [hi, lo] => Ok(((*hi as u64) << 32) | *lo as u64),
            _ => Err(CoreError::Checkpoint("malformed integer field".into())),
        }
    }

    /// Serializes into the checkpoint container format.
    pub fn save(&self, model: &Model, path: &Path) -> Result<()> {
        let (seed, draws) = self.rng.position();
        let header = [
            ("state.epoch", Self::split_u64(self.epoch as u64)),
            ("state.t", Self::split_u64(self.adam.t)),
            ("state.rng_seed", Self::split_u64(seed)),
            ("state.rng_draws", Self::split_u64(draws)),
            ("state.best_accuracy", Tensor::vector(vec![self.best_accuracy])),
            ("state.best_epoch", Self::split_u64(self.best_epoch as u64)),
        ];
        let names: Vec<(String, String)> = model
            .store
            .iter()
            .map(|(_, p)| (format!("adam.m.{}", p.name), format!("adam.v.{}", p.name)))
            .collect();
        let mut entries: Vec<(&str, &Tensor)> = header.iter().map(|(n, t)| (*n, t)).collect();
        for (i, (mn, vn)) in names.iter().enumerate() {
            entries.push((mn, &self.adam.m[i]));
            entries.push((vn, &self.adam.v[i]));
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries)?;
        fs::write(path, buf).map_err(io_err(path))
    }

    pub fn load(model: &Model, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let entries = read_checkpoint(bytes.as_slice())?;
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CoreError::Checkpoint(format!("{}: missing {name}", path.display())))
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, p) in model.store.iter() {
            let (mt, vt) = (get(&format!("adam.m.{}", p.name))?, get(&format!("adam.v.{}", p.name))?);
            if mt.shape() != p.value.shape() || vt.shape() != p.value.shape() {
                return Err(CoreError::Checkpoint(format!("moment shape mismatch for {}", p.name)));
            }
            m.push(mt.clone());
            v.push(vt.clone());
        }
        if entries.len() != 6 + 2 * m.len() {
            return Err(CoreError::Checkpoint(format!("{}: unexpected entries", path.display())));
        }
        Ok(Self {
            epoch: Self::join_u64(get("state.epoch")?)? as usize,
            adam: Adam {
                t: Self::join_u64(get("state.t")?)?,
                m,
                v,
            },
            rng: SeedRng::restore(Self::join_u64(get("state.rng_seed")?)?, Self::join_u64(get("state.rng_draws")?)?),
            best_accuracy: get("state.best_accuracy")?.item(),
            best_epoch: Self::join_u64(get("state.best_epoch")?)? as usize,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

pub const METRIC_HEADER: &str = "epoch,loss,acc,macro_f1,weighted_f1";

pub fn metric_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{METRIC_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.epoch, r.loss, r.accuracy, r.macro_f1, r.weighted_f1
        ));
    }
    s
}

/// Inverse of [`metric_csv`].
pub fn parse_metric_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRIC_HEADER) {
        return Err(CoreError::Data(format!("metric log must start with {METRIC_HEADER:?}")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || CoreError::Data(format!("bad metric row {l:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: x(1)?,
                accuracy: x(2)?,
                macro_f1: x(3)?,
                weighted_f1: x(4)?,
            })
        })
        .collect()
}

/// Loss and per-parameter gradients (indexed like the store) for one sample.
pub fn sample_gradients(model: &Model, sample: &Sample, precision: Precision) -> Result<(f64, Vec<Tensor>)> {
    let mut fwd = model.forward_sample(sample, precision)?;
    let loss = fwd.graph.cross_entropy(fwd.logits, &[sample.label])?;
    let grads = fwd.graph.backward(loss)?;
    let mut out: Vec<Tensor> = model.store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
    for (id, g) in grads.param_grads(&fwd.graph) {
        out[id.index()].add_assign(&g);
    }
    Ok((fwd.graph.data(loss)[0], out))
}

/// Mean loss and mean gradients over a batch, reduced in batch order.
pub fn batch_gradients(model: &Model, batch: &[&Sample], precision: Precision) -> Result<(f64, Vec<Tensor>)> {
    let per: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| sample_gradients(model, s, precision))
        .collect::<Result<_>>()?;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| CoreError::Data("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.scale_assign(inv);
    }
    Ok((loss * inv, grads))
}

fn first_non_finite(model: &Model, grads: &[Tensor]) -> Option<String> {
    model
        .store
        .iter()
        .zip(grads)
        .find(|(_, g)| !g.is_finite())
        .map(|((_, p), _)| p.name.clone())
}

/// Predicted class and its probability for each sample.
pub fn predict(model: &Model, data: &[Sample], precision: Precision) -> Result<Vec<(usize, f64)>> {
    let (logits, _) = model.forward(data, precision, false)?;
    let k = model.cfg.num_classes;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let p = softmax_row(row);
            let c = argmax(&p);
            (c, p[c])
        })
        .collect())
}

pub fn evaluate(model: &Model, data: &[Sample], precision: Precision) -> Result<Metrics> {
    if let Some(s) = data.iter().find(|s| s.label >= model.cfg.num_classes) {
        return Err(CoreError::Data(format!(
            "label {} of {} exceeds the model's {} classes",
            s.label, s.name, model.cfg.num_classes
        )));
    }
    let preds: Vec<usize> = predict(model, data, precision)?.into_iter().map(|p| p.0).collect();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    metrics_from_predictions(&labels, &preds, model.cfg.num_classes)
}

/// Runs one epoch of shuffled mini-batch updates; returns the mean loss.
pub fn train_epoch(model: &mut Model, data: &[Sample], state: &mut TrainState, cfg: &TrainConfig) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    state.rng.shuffle(&mut order);
    let mut total = 0.0;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
        let (loss, grads) = match batch_gradients(model, &batch, cfg.precision) {
            Ok(r) => r,
            Err(CoreError::Tensor(e)) => {
                return Err(CoreError::NonFiniteLoss {
                    epoch: state.epoch + 1,
                    batch: bi,
                    param: format!("forward failed before gradients existed ({e})"),
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::NonFiniteLoss {
                epoch: state.epoch + 1,
                batch: bi,
                param: first_non_finite(model, &grads).unwrap_or_else(|| "none (loss only)".into()),
            });
        }
        state.adam.step(model, &grads, cfg);
        total += loss * batch.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains for the remaining epochs of `cfg`, resuming from `state`. With an
/// output directory, writes `metrics.csv`, per-epoch checkpoints,
/// `model.evmf`, and `train_state.evmf` after every epoch. `log` carries the
/// records of earlier epochs when resuming.
pub fn train(
    model: &mut Model,
    data: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
    state: Option<TrainState>,
    mut log: Vec<EpochRecord>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainState, Vec<EpochRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Data("training set is empty".into()));
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(model));
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
    }
    while state.epoch < cfg.epochs {
        let loss = train_epoch(model, data, &mut state, cfg)?;
        state.epoch += 1;
        let m = evaluate(model, data, cfg.precision)?;
        if m.accuracy > state.best_accuracy {
            state.best_accuracy = m.accuracy;
            state.best_epoch = state.epoch;
        }
        let rec = EpochRecord {
            epoch: state.epoch,
            loss,
            accuracy: m.accuracy,
            macro_f1: m.macro_avg.f1,
            weighted_f1: m.weighted.f1,
        };
        on_epoch(&rec);
        log.push(rec);
        if let Some(dir) = out {
            save_checkpoint(&model.store, &dir.join("checkpoints").join(format!("epoch_{:04}.evmf", state.epoch)))?;
            save_checkpoint(&model.store, &dir.join("model.evmf"))?;
            state.save(model, &dir.join("train_state.evmf"))?;
            let p = dir.join("metrics.csv");
            fs::write(&p, metric_csv(&log)).map_err(io_err(&p))?;
        }
        if cfg.target_accuracy.is_some_and(|t| m.accuracy >= t) {
            break;
        }
    }
    Ok((state, log))
}
