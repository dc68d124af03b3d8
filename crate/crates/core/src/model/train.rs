//! Mini-batch RMSprop training, held-out loss and k-fold selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{fold_ranges, Series};
use super::{Model, ModelConfig};
use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::optim::{RmsProp, StepDecay};
use crate::raster::SampleWindow;
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub rho: f64,
    pub eps: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            decay_every: 20,
            rho: 0.9,
            eps: 1e-8,
            val_fraction: 0.15,
            test_fraction: 0.15,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("train.lr_decay", "must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("train.decay_every", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::config("train.rho", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::config("train.folds", "need at least 2 folds"));
        }
        for (field, f) in [
            ("train.val_fraction", self.val_fraction),
            ("train.test_fraction", self.test_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base: self.learning_rate,
            decay: self.lr_decay,
            every: self.decay_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Starts at 1.
    pub epoch: usize,
    pub lr: f64,
    /// Mean mini-batch loss seen during the epoch, dropout active.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Training-set loss of the initial parameters, dropout off.
    pub initial_loss: f64,
    /// Training-set loss of the final parameters, dropout off.
    pub final_loss: f64,
    /// Epoch whose parameters are kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub best: ParamStore<f32>,
}

/// Mean loss over `samples` with dropout off.
pub fn dataset_loss(model: &Model, store: &ParamStore<f32>, samples: &[SampleWindow]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let losses = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let p = g.bind_all(store);
            let mut rng = substream(0, "eval");
            let out = model.forward(&mut g, &p, &s.inputs, false, &mut rng)?;
            let l = model.loss(&mut g, &out, &s.targets)?;
            Ok(g.value(l).data()[0] as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Loss and per-parameter gradients of one sample with dropout on.
fn sample_grads(
    model: &Model,
    store: &ParamStore<f32>,
    sample: &SampleWindow,
    seed: u64,
    epoch: usize,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let p = g.bind_all(store);
    let mut rng = substream(seed, &format!("dropout.{epoch}.{}", sample.start));
    let out = model.forward(&mut g, &p, &sample.inputs, true, &mut rng)?;
    let l = model.loss(&mut g, &out, &sample.targets)?;
    let loss = g.value(l).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence { epoch });
    }
    g.backward(l)?;
    let mut grads: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    for (id, gr) in g.param_grads() {
        grads[id.index()]
            .iter_mut()
            .zip(gr)
            .for_each(|(d, &x)| *d += x);
    }
    Ok((loss, grads))
}

/// Trains from `init` and keeps the parameters with the lowest validation
/// loss (the last epoch's when `val` is empty).
pub fn train(
    model: &Model,
    init: ParamStore<f32>,
    train: &[SampleWindow],
    val: &[SampleWindow],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut store = init;
    let opt = RmsProp {
        rho: cfg.rho,
        eps: cfg.eps,
    };
    let schedule = cfg.schedule();
    let initial_loss = dataset_loss(model, &store, train)?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut best_val = if val.is_empty() {
        f64::INFINITY
    } else {
        dataset_loss(model, &store, val)?
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr_at(epoch - 1);
        order.shuffle(&mut substream(seed, &format!("shuffle.{epoch}")));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| sample_grads(model, &store, &train[i], seed, epoch))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f32;
            store.zero_grad();
            for (loss, grads) in results {
                loss_sum += loss;
                for (p, gr) in store.iter_mut().zip(grads) {
                    p.grad.iter_mut().zip(gr).for_each(|(d, x)| *d += x * scale);
                }
            }
            opt.step(&mut store, lr);
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() || store.iter().any(|(_, p)| p.value.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence { epoch });
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(dataset_loss(model, &store, val)?)
        };
        match val_loss {
            Some(v) if v < best_val => {
                best_val = v;
                best_epoch = epoch;
                best.copy_values_from(&store);
            }
            None => {
                best_epoch = epoch;
                best.copy_values_from(&store);
            }
            _ => {}
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
    }
    let final_loss = dataset_loss(model, &store, train)?;
    Ok(TrainOutcome {
        history,
        initial_loss,
        final_loss,
        best_epoch,
        best,
    })
}

/// `epoch,lr,train_loss,val_loss` rows; an empty last column means no
/// validation set.
pub fn write_history<W: Write>(mut w: W, history: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,lr,train_loss,val_loss")?;
    for r in history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.epoch, r.lr, r.train_loss, val)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScore {
    pub label: String,
    pub fold_losses: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub candidates: Vec<CandidateScore>,
    /// Index of the candidate with the lowest mean validation loss.
    pub selected: usize,
}

impl CvReport {
    /// Selects the lowest mean; ties go to the earlier candidate.
    pub fn from_scores(candidates: Vec<CandidateScore>) -> Self {
        let selected = candidates
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
            .map_or(0, |(i, _)| i);
        CvReport {
            candidates,
            selected,
        }
    }
}

/// Scores each candidate by k-fold cross-validation over contiguous
/// blocks of the window sequence. Training windows within
/// `lag + max_horizon - 1` of a held-out block are dropped.
pub fn cross_validate(
    series: &Series,
    candidates: &[ModelConfig],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<CvReport> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::config("cv.candidates", "need at least one candidate"));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (ci, mc) in candidates.iter().enumerate() {
        let windows = series.windows(mc.lag, &mc.horizons)?;
        let folds = fold_ranges(windows.len(), cfg.folds)?;
        let gap = mc.lag + mc.horizons.iter().max().copied().unwrap_or(1) - 1;
        let mut fold_losses = Vec::with_capacity(folds.len());
        for (k, held) in folds.iter().enumerate() {
            let train_set: Vec<SampleWindow> = windows
                .iter()
                .enumerate()
                .filter(|(i, _)| *i + gap < held.start || *i >= held.end + gap)
                .map(|(_, w)| w.clone())
                .collect();
            if train_set.is_empty() {
                return Err(Error::TooFewSamples {
                    samples: windows.len(),
                    folds: cfg.folds,
                });
            }
            let run_seed = seed ^ ((ci as u64) << 32 | k as u64);
            let (model, init) = Model::init::<f32>(mc, run_seed)?;
            let out = train(&model, init, &train_set, &windows[held.clone()], cfg, run_seed)?;
            fold_losses.push(dataset_loss(&model, &out.best, &windows[held.clone()])?);
        }
        let mean = fold_losses.iter().sum::<f64>() / fold_losses.len() as f64;
        scores.push(CandidateScore {
            label: format!("{}/lag{}", mc.architecture, mc.lag),
            fold_losses,
            mean,
        });
    }
    Ok(CvReport::from_scores(scores))
}
