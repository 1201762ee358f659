//! Minibatch training of the encoder on a preprocessed cohort.
//!
//! Every patient in a batch gets its own tape, so forward/backward passes can
//! run on separate workers. Per-patient losses and gradients are then reduced
//! in batch order, which keeps results independent of the worker count.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{ModelCheckpoint, TrainingMeta};
use crate::data::{Cohort, PatientRecord, Split};
use crate::error::{Error, Result};
use crate::model::{mse_loss, EncoderModel, ModelConfig};
use crate::nn::Mode;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Per-gene standardization of `log1p` expression, fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneTargetTransform {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GeneTargetTransform {
    pub fn fit(targets: &[&[f64]], gene_ids: &[String]) -> Result<Self> {
        let n = targets.len();
        if n == 0 {
            return Err(Error::input("cannot fit target transform on zero patients"));
        }
        let g = gene_ids.len();
        let mut mean = vec![0.0; g];
        let mut std = vec![0.0; g];
        for j in 0..g {
            let m = targets.iter().map(|t| t[j].ln_1p()).sum::<f64>() / n as f64;
            let v = targets.iter().map(|t| (t[j].ln_1p() - m).powi(2)).sum::<f64>() / n as f64;
            if v <= 0.0 {
                return Err(Error::input(format!(
                    "gene `{}` has zero log-expression variance on the training split",
                    gene_ids[j]
                )));
            }
            mean[j] = m;
            std[j] = v.sqrt();
        }
        Ok(GeneTargetTransform { mean, std })
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x.ln_1p() - m) / s)
            .collect()
    }

    /// Map standardized predictions back to expression units.
    pub fn invert(&self, standardized: &[f64]) -> Vec<f64> {
        standardized
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| (z * s + m).exp_m1())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 30,
            lr: adam.lr,
            batch_size: 8,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time: f64,
}

impl EpochLog {
    /// One `key=value` line.
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.10e} val_loss={:.10e} wall_time={:.3}",
            self.epoch, self.train_loss, self.val_loss, self.wall_time
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
}

struct Example<'a> {
    id: &'a str,
    slices: Vec<Tensor>,
    target: Tensor,
}

fn examples<'a>(records: &[&'a PatientRecord], size: usize, tf: &GeneTargetTransform) -> Vec<Example<'a>> {
    records
        .iter()
        .map(|r| Example {
            id: &r.patient_id,
            slices: r.slice_tensors(size),
            target: Tensor::new(&[tf.mean.len()], tf.apply(&r.target)).expect("gene count"),
        })
        .collect()
}

/// Eval-mode MSE averaged over patients, summed in patient order.
fn eval_loss(model: &EncoderModel, data: &[Example]) -> Result<f64> {
    let losses = data
        .par_iter()
        .map(|ex| {
            let pred = model.predict(&ex.slices)?;
            Ok(pred
                .iter()
                .zip(ex.target.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / pred.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Loss and parameter gradients for one patient in train mode.
fn patient_grads(model: &EncoderModel, ex: &Example, seed: u64, epoch: usize) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let mut rng = substream(seed, &format!("dropout/{epoch}/{}", ex.id));
    let pred = model.forward_patient(&mut tape, &p, &ex.slices, Mode::Train, &mut rng)?;
    let pred = tape.reshape(pred, ex.target.shape())?;
    let target = tape.constant(ex.target.clone());
    let loss = mse_loss(&mut tape, pred, target)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    Ok((value, model.params().collect_grads(&mut tape, &p)))
}

/// Train on the cohort's training split, selecting the parameters with the
/// lowest validation loss (the initial parameters included).
pub fn train(
    cohort: &Cohort,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::config(format!("learning rate {} must be non-negative", cfg.lr)));
    }
    if model_cfg.gene_count != cohort.gene_ids.len() {
        return Err(Error::config(format!(
            "model predicts {} genes but the cohort has {}",
            model_cfg.gene_count,
            cohort.gene_ids.len()
        )));
    }
    if model_cfg.input_size != cohort.manifest.config.input_size {
        return Err(Error::config(format!(
            "model input size {} differs from cohort slice size {}",
            model_cfg.input_size, cohort.manifest.config.input_size
        )));
    }
    let train_recs = cohort.records_in(Split::Train);
    let val_recs = cohort.records_in(Split::Validation);
    if train_recs.is_empty() || val_recs.is_empty() {
        return Err(Error::input(format!(
            "training needs non-empty train and validation splits (got {} and {})",
            train_recs.len(),
            val_recs.len()
        )));
    }
    let tf = GeneTargetTransform::fit(
        &train_recs.iter().map(|r| r.target.as_slice()).collect::<Vec<_>>(),
        &cohort.gene_ids,
    )?;
    let size = model_cfg.input_size;
    let train_ex = examples(&train_recs, size, &tf);
    let val_ex = examples(&val_recs, size, &tf);

    let mut model = EncoderModel::new(model_cfg.clone())?;
    let adam = cfg.adam();
    let mut state = AdamState::new();
    let initial_train = eval_loss(&model, &train_ex)?;
    let initial_val = eval_loss(&model, &val_ex)?;
    info!("initial loss: train {initial_train:.5} val {initial_val:.5}");
    let mut best = (0, initial_val, model.params().clone());
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();

    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| patient_grads(&model, &train_ex[i], cfg.seed, epoch))
                .collect::<Result<Vec<_>>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            for (l, g) in &results {
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss in epoch {epoch}, batch {b}"
                )));
            }
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            adam_step(model.params_mut(), &grads, &mut state, &adam)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / train_ex.len() as f64;
        let val_loss = eval_loss(&model, &val_ex)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss in epoch {epoch}")));
        }
        if val_loss < best.1 {
            best = (epoch, val_loss, model.params().clone());
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        info!("{}", entry.to_line());
        on_epoch(&entry);
        log.push(entry);
    }

    let (best_epoch, best_val, best_params) = best;
    *model.params_mut() = best_params;
    let meta = TrainingMeta {
        epochs: cfg.epochs,
        best_epoch,
        best_val_loss: best_val,
        initial_train_loss: initial_train,
        initial_val_loss: initial_val,
        final_train_loss: log.last().map(|e| e.train_loss),
        final_val_loss: log.last().map(|e| e.val_loss),
        seed: cfg.seed,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        data_digest: cohort.manifest.digest.clone(),
    };
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::new(model, tf, cohort.gene_ids.clone(), meta),
        log,
    })
}
