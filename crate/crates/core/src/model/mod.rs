//! End-to-end forecasters: a per-frame spatial trunk, a temporal stage and
//! one affine head per horizon, plus training, evaluation and reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::shape::{conv2d_output, maxpool2d_output};
use crate::autodiff::{Graph, Padding, ParamId, ParamStore, Var};
use crate::capsnet::{CapsNet, CapsNetConfig};
use crate::error::{Error, Result};
use crate::plan::{conv_params, dense_params, LayerRow};
use crate::raster::NormalizedFrame;
use crate::recurrent::{lstm_param_count, nlstm_param_count, LstmCell, NlstmCell, Recurrent};
use crate::rng::substream;
use crate::tensor::{Scalar, Tensor};

pub mod check;
pub mod checkpoint;
pub mod compare;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod train;

pub use checkpoint::{load_model, read_model, save_model, write_model};
pub use compare::{run_comparison, Comparison, ComparisonRow, ComparisonSpec};
pub use data::{
    chronological_split, fold_ranges, frames_from_records, Series, Split, SynthConfig, SynthOutput,
};
pub use eval::{
    evaluate, Evaluation, Forecaster, LinkError, Persistence, Trained, DEFAULT_FLAG_THRESHOLD,
};
pub use metrics::{mape_paper, mape_standard, mse, Metrics};
pub use train::{
    cross_validate, dataset_loss, train, write_history, CandidateScore, CvReport, EpochRecord,
    TrainConfig,
    TrainOutcome,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    CapsnetNlstm,
    CnnLstm,
    LstmStack,
    NlstmOnly,
    Dcnn,
    CapsnetOnly,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::CapsnetNlstm,
        Architecture::CnnLstm,
        Architecture::LstmStack,
        Architecture::NlstmOnly,
        Architecture::Dcnn,
        Architecture::CapsnetOnly,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::CapsnetNlstm => "capsnet_nlstm",
            Architecture::CnnLstm => "cnn_lstm",
            Architecture::LstmStack => "lstm_stack",
            Architecture::NlstmOnly => "nlstm_only",
            Architecture::Dcnn => "dcnn",
            Architecture::CapsnetOnly => "capsnet_only",
        }
    }

    fn uses_capsnet(self) -> bool {
        matches!(self, Architecture::CapsnetNlstm | Architecture::CapsnetOnly)
    }

    fn uses_cnn(self) -> bool {
        matches!(self, Architecture::CnnLstm | Architecture::Dcnn)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

/// Convolutional trunk: per stage a `kernel`×`kernel` same-padded
/// convolution, ReLU, then `pool`×`pool` ceil-mode max pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
}

impl CnnConfig {
    pub fn paper() -> Self {
        CnnConfig {
            channels: vec![16, 32, 64, 128],
            kernel: 3,
            pool: 2,
        }
    }

    pub fn desk() -> Self {
        CnnConfig {
            channels: vec![4, 8, 8, 16],
            kernel: 3,
            pool: 2,
        }
    }

    /// `[H, W, C]` after each stage.
    pub fn stage_shapes(&self, input: (usize, usize)) -> Result<Vec<[usize; 3]>> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("cnn.channels", "need at least one positive entry"));
        }
        if self.kernel == 0 || self.pool == 0 {
            return Err(Error::config("cnn.kernel", "kernel and pool must be positive"));
        }
        let mut hw = input;
        let mut out = Vec::new();
        for &c in &self.channels {
            let conv = conv2d_output(hw, self.kernel, 1, Padding::Same)?;
            hw = maxpool2d_output(conv, self.pool, self.pool, true)?;
            out.push([hw.0, hw.1, c]);
        }
        Ok(out)
    }

    pub fn flat_dim(&self, input: (usize, usize)) -> Result<usize> {
        let last = *self.stage_shapes(input)?.last().unwrap();
        Ok(last.iter().product())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// `(H, W)` of the input frames.
    pub grid: (usize, usize),
    pub lag: usize,
    pub horizons: Vec<usize>,
    pub links: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub v_max: f64,
    pub capsnet: Option<CapsNetConfig>,
    pub cnn: Option<CnnConfig>,
}

impl ModelConfig {
    /// Full-size layout: 164×148 frames, lag 15, 278 links, 800 hidden
    /// units and a single horizon head.
    pub fn paper(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            grid: (164, 148),
            lag: 15,
            horizons: vec![1],
            links: 278,
            hidden: 800,
            dropout: 0.2,
            v_max: 80.0,
            capsnet: architecture.uses_capsnet().then(CapsNetConfig::paper),
            cnn: architecture.uses_cnn().then(CnnConfig::paper),
        }
    }

    /// Laptop-size layout: 20×20 frames, 8 links, lag 6, horizons {1, 3}.
    pub fn desk(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            grid: (20, 20),
            lag: 6,
            horizons: vec![1, 3],
            links: 8,
            hidden: 32,
            dropout: 0.1,
            v_max: 80.0,
            capsnet: architecture.uses_capsnet().then(CapsNetConfig::desk),
            cnn: architecture.uses_cnn().then(CnnConfig::desk),
        }
    }

    /// The same settings under another architecture, with sub-configs
    /// filled from the desk presets when missing.
    pub fn with_architecture(&self, architecture: Architecture) -> Self {
        let mut c = self.clone();
        c.architecture = architecture;
        if architecture.uses_capsnet() && c.capsnet.is_none() {
            c.capsnet = Some(CapsNetConfig::desk());
        }
        if architecture.uses_cnn() && c.cnn.is_none() {
            c.cnn = Some(CnnConfig::desk());
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::config("model.grid", "extents must be positive"));
        }
        if self.lag == 0 {
            return Err(Error::config("model.lag", "must be at least 1"));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::config("model.horizons", "need at least one positive horizon"));
        }
        if self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("model.horizons", "must be strictly increasing"));
        }
        if self.links == 0 {
            return Err(Error::config("model.links", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("model.hidden", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if !(self.v_max > 0.0) {
            return Err(Error::config("model.v_max", "must be positive"));
        }
        if self.architecture.uses_capsnet() {
            self.capsnet
                .as_ref()
                .ok_or_else(|| Error::config("model.capsnet", "required by this architecture"))?
                .shapes(self.grid)?;
        }
        if self.architecture.uses_cnn() {
            self.cnn
                .as_ref()
                .ok_or_else(|| Error::config("model.cnn", "required by this architecture"))?
                .stage_shapes(self.grid)?;
        }
        Ok(())
    }

    fn feature_dim(&self) -> Result<usize> {
        Ok(match self.architecture {
            Architecture::CapsnetNlstm | Architecture::CapsnetOnly => {
                self.capsnet.as_ref().unwrap().shapes(self.grid)?.flat
            }
            Architecture::CnnLstm | Architecture::Dcnn => {
                self.cnn.as_ref().unwrap().flat_dim(self.grid)?
            }
            Architecture::LstmStack | Architecture::NlstmOnly => self.grid.0 * self.grid.1,
        })
    }

    fn head_input(&self) -> Result<usize> {
        Ok(match self.architecture {
            Architecture::Dcnn | Architecture::CapsnetOnly => self.lag * self.feature_dim()?,
            _ => self.hidden,
        })
    }

    /// Layer table with output shapes and parameter counts, derived from
    /// the config alone. Convolution stages of the CNN trunk report their
    /// shape after pooling.
    pub fn plan(&self) -> Result<Vec<LayerRow>> {
        self.validate()?;
        let (h, w) = self.grid;
        let mut rows = vec![LayerRow::new("input", [h, w, 1], 0)];
        let feat = self.feature_dim()?;
        match self.architecture {
            Architecture::CapsnetNlstm | Architecture::CapsnetOnly => {
                rows.extend(self.capsnet.as_ref().unwrap().plan(self.grid)?);
            }
            Architecture::CnnLstm | Architecture::Dcnn => {
                let cnn = self.cnn.as_ref().unwrap();
                let mut cin = 1;
                for (k, shape) in cnn.stage_shapes(self.grid)?.into_iter().enumerate() {
                    rows.push(LayerRow::new(
                        format!("conv{}+pool", k + 1),
                        shape,
                        conv_params(cnn.kernel, cin, shape[2]),
                    ));
                    cin = shape[2];
                }
                rows.push(LayerRow::new("flatten", [feat], 0));
            }
            Architecture::LstmStack | Architecture::NlstmOnly => {
                rows.push(LayerRow::new("flatten", [feat], 0));
            }
        }
        let hd = self.hidden;
        match self.architecture {
            Architecture::CapsnetNlstm | Architecture::NlstmOnly => {
                rows.push(LayerRow::new("nlstm", [hd], nlstm_param_count(feat, hd)));
            }
            Architecture::CnnLstm | Architecture::LstmStack => {
                rows.push(LayerRow::new("lstm1", [hd], lstm_param_count(feat, hd)));
                rows.push(LayerRow::new("lstm2", [hd], lstm_param_count(hd, hd)));
            }
            Architecture::Dcnn | Architecture::CapsnetOnly => {
                rows.push(LayerRow::new("concat_steps", [self.lag * feat], 0));
            }
        }
        let head_in = self.head_input()?;
        rows.push(LayerRow::new("dropout", [head_in], 0));
        let nh = self.horizons.len();
        let out: Vec<usize> = if nh == 1 {
            vec![self.links]
        } else {
            vec![nh, self.links]
        };
        rows.push(LayerRow::new(
            "fully_connected",
            out,
            nh as u64 * dense_params(head_in, self.links),
        ));
        Ok(rows)
    }

    pub fn param_count(&self) -> Result<u64> {
        Ok(crate::plan::total_params(&self.plan()?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Dense {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::glorot([input, output], input, output, rng),
            ),
            b: store.add(format!("{prefix}.b"), Tensor::zeros([output])),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w.index()])?;
        g.add_bias(y, p[self.b.index()])
    }
}

#[derive(Clone, Debug, PartialEq)]
struct CnnTrunk {
    config: CnnConfig,
    stages: Vec<(ParamId, ParamId)>,
    flat: usize,
}

impl CnnTrunk {
    fn new<T: Scalar, R: Rng + ?Sized>(
        config: &CnnConfig,
        grid: (usize, usize),
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let k = config.kernel;
        let mut cin = 1;
        let mut stages = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            let w = store.add(
                format!("cnn.conv{}.w", i + 1),
                Tensor::glorot([k, k, cin, c], k * k * cin, k * k * c, rng),
            );
            let b = store.add(format!("cnn.conv{}.b", i + 1), Tensor::zeros([c]));
            stages.push((w, b));
            cin = c;
        }
        Ok(CnnTrunk {
            config: config.clone(),
            stages,
            flat: config.flat_dim(grid)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], frame: Var) -> Result<Var> {
        let mut x = frame;
        for &(w, b) in &self.stages {
            x = g.conv2d(x, p[w.index()], 1, Padding::Same)?;
            x = g.add_bias(x, p[b.index()])?;
            x = g.relu(x);
            x = g.maxpool2d(x, self.config.pool, self.config.pool, true)?;
        }
        g.reshape(x, [self.flat])
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Trunk {
    Caps(CapsNet),
    Cnn(CnnTrunk),
    Flat,
}

#[derive(Clone, Debug, PartialEq)]
enum Temporal {
    Nested(NlstmCell),
    Stacked(LstmCell, LstmCell),
    Concat,
}

/// Parameter layout of one forecaster. Values live in a separate
/// [`ParamStore`] so the same model can run in `f32` and `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    trunk: Trunk,
    temporal: Temporal,
    heads: Vec<Dense>,
}

impl Model {
    /// Builds the layout and draws initial values from the `init`
    /// sub-stream of `seed`.
    pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let mut store = ParamStore::new();
        let feat = config.feature_dim()?;
        let trunk = match config.architecture {
            Architecture::CapsnetNlstm | Architecture::CapsnetOnly => Trunk::Caps(CapsNet::new(
                *config.capsnet.as_ref().unwrap(),
                config.grid,
                &mut store,
                "caps",
                &mut rng,
            )?),
            Architecture::CnnLstm | Architecture::Dcnn => Trunk::Cnn(CnnTrunk::new(
                config.cnn.as_ref().unwrap(),
                config.grid,
                &mut store,
                &mut rng,
            )?),
            Architecture::LstmStack | Architecture::NlstmOnly => Trunk::Flat,
        };
        let hd = config.hidden;
        let temporal = match config.architecture {
            Architecture::CapsnetNlstm | Architecture::NlstmOnly => {
                Temporal::Nested(NlstmCell::new(&mut store, "nlstm", feat, hd, &mut rng))
            }
            Architecture::CnnLstm | Architecture::LstmStack => Temporal::Stacked(
                LstmCell::new(&mut store, "lstm1", feat, hd, &mut rng),
                LstmCell::new(&mut store, "lstm2", hd, hd, &mut rng),
            ),
            Architecture::Dcnn | Architecture::CapsnetOnly => Temporal::Concat,
        };
        let head_in = config.head_input()?;
        let heads = config
            .horizons
            .iter()
            .map(|h| Dense::new(&mut store, &format!("head.h{h}"), head_in, config.links, &mut rng))
            .collect();
        Ok((
            Model {
                config: config.clone(),
                trunk,
                temporal,
                heads,
            },
            store,
        ))
    }

    pub fn horizons(&self) -> &[usize] {
        &self.config.horizons
    }

    /// Normalized per-horizon outputs `[L]`, in horizon order.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        frames: &[Arc<NormalizedFrame>],
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let (h, w) = self.config.grid;
        if frames.len() != self.config.lag {
            return Err(Error::shape(format!(
                "model expects {} frames, got {}",
                self.config.lag,
                frames.len()
            )));
        }
        let mut feats = Vec::with_capacity(frames.len());
        for f in frames {
            if (f.rows, f.cols) != (h, w) {
                return Err(Error::shape(format!(
                    "frame is {}x{}, model expects {h}x{w}",
                    f.rows, f.cols
                )));
            }
            let x = g.constant(Tensor::from_fn([h, w, 1], |i| T::from_f64(f.values[i] as f64)));
            let feat = match &self.trunk {
                Trunk::Caps(net) => net.forward(g, params, x)?,
                Trunk::Cnn(cnn) => cnn.forward(g, params, x)?,
                Trunk::Flat => g.reshape(x, [h * w])?,
            };
            let n = g.value(feat).len();
            feats.push(g.reshape(feat, [1, n])?);
        }
        let summary = match &self.temporal {
            Temporal::Nested(cell) => cell.unroll(g, params, &feats)?.0,
            Temporal::Stacked(first, second) => {
                let (_, trace) = first.unroll(g, params, &feats)?;
                second.unroll(g, params, &trace)?.0
            }
            Temporal::Concat => {
                let flat = g.concat(&feats)?;
                let n = g.value(flat).len();
                g.reshape(flat, [1, n])?
            }
        };
        let summary = g.dropout(summary, self.config.dropout, training, rng)?;
        self.heads
            .iter()
            .map(|head| {
                let y = head.apply(g, params, summary)?;
                g.reshape(y, [self.config.links])
            })
            .collect()
    }

    /// Mean squared error over horizons and links, on normalized values.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        outputs: &[Var],
        targets: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<Var> {
        let mut want = Vec::with_capacity(outputs.len() * self.config.links);
        for h in &self.config.horizons {
            let t = targets
                .get(h)
                .ok_or_else(|| Error::shape(format!("sample has no target for horizon {h}")))?;
            if t.len() != self.config.links {
                return Err(Error::shape(format!(
                    "target of {} links, model has {}",
                    t.len(),
                    self.config.links
                )));
            }
            want.extend(t.iter().map(|&v| T::from_f64(normalize(v, self.config.v_max))));
        }
        let pred = g.concat(outputs)?;
        let target = g.constant(Tensor::from_vec(want));
        g.mse(pred, target)
    }

    /// Inference forecast in km/h for every horizon.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        frames: &[Arc<NormalizedFrame>],
    ) -> Result<BTreeMap<usize, Vec<f64>>> {
        let mut g = Graph::new();
        let params = g.bind_all(store);
        let mut no_rng = substream(0, "inference");
        let outs = self.forward(&mut g, &params, frames, false, &mut no_rng)?;
        Ok(self
            .config
            .horizons
            .iter()
            .zip(outs)
            .map(|(&h, v)| {
                let speeds = g
                    .value(v)
                    .data()
                    .iter()
                    .map(|&x| x.as_f64() * self.config.v_max)
                    .collect();
                (h, speeds)
            })
            .collect())
    }

    /// Pre-activation of the capsule trunk's first convolution for one
    /// frame, when the model has a capsule trunk.
    pub fn capsule_preactivation<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        frame: &NormalizedFrame,
    ) -> Result<Option<Tensor<T>>> {
        match &self.trunk {
            Trunk::Caps(net) => {
                let x = Tensor::from_fn([frame.rows, frame.cols, 1], |i| {
                    T::from_f64(frame.values[i] as f64)
                });
                Ok(Some(net.conv1_preactivation(store, &x)?))
            }
            _ => Ok(None),
        }
    }
}

fn normalize(v: f64, v_max: f64) -> f64 {
    v.clamp(0.0, v_max) / v_max
}

#[cfg(test)]
mod tests;
