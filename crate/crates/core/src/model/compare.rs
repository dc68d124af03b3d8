//! Side-by-side training of several architectures on one series, with an
//! accuracy report and a lag-sensitivity/timing report.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{chronological_split, Series};
use super::eval::{evaluate, Evaluation, Persistence, Trained};
use super::train::{train, EpochRecord, TrainConfig};
use super::{Architecture, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::raster::SampleWindow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonSpec {
    pub architectures: Vec<Architecture>,
    /// Architectures retrained at every entry of `lags`.
    pub lag_architectures: Vec<Architecture>,
    pub lags: Vec<usize>,
}

impl Default for ComparisonSpec {
    fn default() -> Self {
        ComparisonSpec {
            architectures: vec![
                Architecture::CapsnetNlstm,
                Architecture::CnnLstm,
                Architecture::LstmStack,
                Architecture::NlstmOnly,
            ],
            lag_architectures: vec![Architecture::LstmStack, Architecture::NlstmOnly],
            lags: vec![6, 8],
        }
    }
}

pub struct ComparisonRow {
    pub config: ModelConfig,
    pub history: Vec<EpochRecord>,
    pub initial_loss: f64,
    pub evaluation: Evaluation,
    pub train_seconds: f64,
    pub params: u64,
}

pub struct Comparison {
    pub persistence: Evaluation,
    pub rows: Vec<ComparisonRow>,
    pub lag_rows: Vec<ComparisonRow>,
}

struct Parts {
    train: Vec<SampleWindow>,
    val: Vec<SampleWindow>,
    test: Vec<SampleWindow>,
}

fn split_windows(series: &Series, config: &ModelConfig, cfg: &TrainConfig) -> Result<Parts> {
    let windows = series.windows(config.lag, &config.horizons)?;
    let max_h = config.horizons.iter().max().copied().unwrap_or(1);
    let s = chronological_split(
        windows.len(),
        cfg.val_fraction,
        cfg.test_fraction,
        config.lag + max_h - 1,
    )?;
    if s.test.is_empty() {
        return Err(Error::config("train.test_fraction", "comparison needs a test set"));
    }
    Ok(Parts {
        train: windows[s.train].to_vec(),
        val: windows[s.val].to_vec(),
        test: windows[s.test].to_vec(),
    })
}

fn run_one(
    series: &Series,
    config: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    threshold: f64,
) -> Result<ComparisonRow> {
    let parts = split_windows(series, config, cfg)?;
    let (model, init) = Model::init::<f32>(config, seed)?;
    let started = Instant::now();
    let out = train(&model, init, &parts.train, &parts.val, cfg, seed)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let params = config.param_count()?;
    let trained = Trained {
        model,
        store: out.best,
    };
    let evaluation = evaluate(&trained, &parts.test, &series.link_ids, threshold)?;
    Ok(ComparisonRow {
        config: config.clone(),
        history: out.history,
        initial_loss: out.initial_loss,
        evaluation,
        train_seconds,
        params,
    })
}

/// Trains every architecture of `spec` from `base` and scores them on the
/// same chronological test block, next to persistence.
pub fn run_comparison(
    series: &Series,
    base: &ModelConfig,
    cfg: &TrainConfig,
    spec: &ComparisonSpec,
    seed: u64,
    threshold: f64,
) -> Result<Comparison> {
    let parts = split_windows(series, base, cfg)?;
    let persistence = evaluate(&Persistence, &parts.test, &series.link_ids, threshold)?;
    let rows = spec
        .architectures
        .iter()
        .map(|&a| run_one(series, &base.with_architecture(a), cfg, seed, threshold))
        .collect::<Result<Vec<_>>>()?;
    let mut lag_rows = Vec::new();
    for &a in &spec.lag_architectures {
        for &lag in &spec.lags {
            let mut c = base.with_architecture(a);
            c.lag = lag;
            lag_rows.push(run_one(series, &c, cfg, seed, threshold)?);
        }
    }
    Ok(Comparison {
        persistence,
        rows,
        lag_rows,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

impl Comparison {
    /// Test MSE and both MAPE forms per model and horizon.
    pub fn accuracy_report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>12} {:>14} {:>14}",
            "model", "horizon", "mse", "mape_standard", "mape_paper"
        );
        let evals = std::iter::once(&self.persistence).chain(self.rows.iter().map(|r| &r.evaluation));
        for e in evals {
            for (h, m) in &e.per_horizon {
                let _ = writeln!(
                    s,
                    "{:<16} {:>7} {:>12.4} {:>14} {:>14}",
                    e.name,
                    h,
                    m.mse,
                    pct(Some(m.mape_standard)),
                    pct(m.mape_paper)
                );
            }
        }
        s
    }

    /// Test MSE, parameter count and training time per architecture and lag.
    pub fn lag_report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>4} {:>12} {:>10} {:>12} {:>14}",
            "model", "lag", "params", "epochs", "train_secs", "mse"
        );
        for r in &self.lag_rows {
            let _ = writeln!(
                s,
                "{:<16} {:>4} {:>12} {:>10} {:>12.2} {:>14.4}",
                r.config.architecture,
                r.config.lag,
                r.params,
                r.history.len(),
                r.train_seconds,
                r.evaluation.overall.mse
            );
        }
        s
    }
}
