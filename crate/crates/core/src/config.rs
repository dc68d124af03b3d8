//! Run configuration: one TOML file with sections for paths, rasterization,
//! synthetic data, model, training, evaluation and comparison.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capsnet::CapsNetConfig;
use crate::error::{Error, Result};
use crate::model::{
    Architecture, CnnConfig, ComparisonSpec, ModelConfig, SynthConfig, TrainConfig,
    DEFAULT_FLAG_THRESHOLD,
};
use crate::raster::{DEFAULT_PERIOD_SECS, DEFAULT_V_MAX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub network: PathBuf,
    pub records: PathBuf,
    pub archive: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            network: "network.txt".into(),
            records: "records.csv".into(),
            archive: "frames.sfr".into(),
            checkpoint: "model.ckpt".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterConfig {
    /// Cell extent `(lat, lon)` in degrees.
    pub cell_size: (f64, f64),
    pub v_max: f64,
    pub period_secs: i64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            cell_size: (1e-4, 1e-4),
            v_max: DEFAULT_V_MAX,
            period_secs: DEFAULT_PERIOD_SECS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

/// A preset plus optional overrides. `v_max` comes from `[raster]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub scale: Scale,
    pub grid: Option<(usize, usize)>,
    pub lag: Option<usize>,
    pub horizons: Option<Vec<usize>>,
    pub links: Option<usize>,
    pub hidden: Option<usize>,
    pub dropout: Option<f64>,
    pub capsnet: Option<CapsNetConfig>,
    pub cnn: Option<CnnConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: Architecture::CapsnetNlstm,
            scale: Scale::Desk,
            grid: None,
            lag: None,
            horizons: None,
            links: None,
            hidden: None,
            dropout: None,
            capsnet: None,
            cnn: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, v_max: f64) -> Result<ModelConfig> {
        let mut c = match self.scale {
            Scale::Desk => ModelConfig::desk(self.architecture),
            Scale::Paper => ModelConfig::paper(self.architecture),
        };
        c.v_max = v_max;
        if let Some(g) = self.grid {
            c.grid = g;
        }
        if let Some(l) = self.lag {
            c.lag = l;
        }
        if let Some(h) = &self.horizons {
            c.horizons = h.clone();
        }
        if let Some(l) = self.links {
            c.links = l;
        }
        if let Some(h) = self.hidden {
            c.hidden = h;
        }
        if let Some(d) = self.dropout {
            c.dropout = d;
        }
        if self.capsnet.is_some() {
            c.capsnet = self.capsnet;
        }
        if self.cnn.is_some() {
            c.cnn = self.cnn.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Links with MAE above this many km/h are flagged.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DEFAULT_FLAG_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    /// Random points per primitive op.
    pub points: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            points: 5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub raster: RasterConfig,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
    pub compare: ComparisonSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let message = e.inner().message().to_string();
            Error::Config {
                field: if field == "." { "<root>".into() } else { field },
                message,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("--config", format!("cannot read {}: {e}", path.display()))
        })?;
        let mut cfg = RunConfig::from_toml(&text)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            cfg.paths.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.raster;
        if !(r.cell_size.0 > 0.0 && r.cell_size.1 > 0.0) {
            return Err(Error::config("raster.cell_size", "extents must be positive"));
        }
        if !(r.v_max > 0.0) {
            return Err(Error::config("raster.v_max", "must be positive"));
        }
        if r.period_secs <= 0 {
            return Err(Error::config("raster.period_secs", "must be positive"));
        }
        if !(self.eval.threshold >= 0.0) {
            return Err(Error::config("eval.threshold", "must be non-negative"));
        }
        if self.gradcheck.points == 0 {
            return Err(Error::config("gradcheck.points", "must be at least 1"));
        }
        if !(self.gradcheck.tolerance > 0.0) {
            return Err(Error::config("gradcheck.tolerance", "must be positive"));
        }
        if self.compare.lags.contains(&0) {
            return Err(Error::config("compare.lags", "lags must be positive"));
        }
        self.synth.validate()?;
        self.train.validate()?;
        self.model.resolve(self.raster.v_max)?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve(self.raster.v_max)
    }
}

impl Paths {
    fn rebase(&mut self, dir: &Path) {
        for p in [
            &mut self.network,
            &mut self.records,
            &mut self.archive,
            &mut self.checkpoint,
            &mut self.report_dir,
        ] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

/// Errors unless `path` is an existing file; `field` names the setting.
pub fn require_file(field: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(field, format!("file not found: {}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model_config().unwrap(), ModelConfig::desk(Architecture::CapsnetNlstm));
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml(
            r#"
seed = 3
[model]
architecture = "cnn_lstm"
lag = 4
horizons = [1, 2]
[train]
epochs = 2
"#,
        )
        .unwrap();
        let m = c.model_config().unwrap();
        assert_eq!((m.architecture, m.lag, m.horizons.clone()), (Architecture::CnnLstm, 4, vec![1, 2]));
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.seed, 3);
    }

    fn field_of(text: &str) -> String {
        match RunConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_fields_are_named() {
        assert_eq!(field_of("[train]\nbatch_size = 0\n"), "train.batch_size");
        assert_eq!(field_of("[train]\nbatch_size = \"big\"\n"), "train.batch_size");
        assert_eq!(field_of("[model]\narchitecture = \"rnn\"\n"), "model.architecture");
        assert_eq!(field_of("[model]\nlag = 0\n"), "model.lag");
        assert_eq!(field_of("[raster]\nv_max = -1.0\n"), "raster.v_max");
        assert!(field_of("[train]\nepoch = 3\n").starts_with("train"));
        assert_eq!(field_of("[model.capsnet]\ncapsules = 0\n"), "model.capsnet");
    }

    #[test]
    fn paths_rebase_on_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[paths]\nnetwork = \"net.txt\"\nrecords = \"/abs/r.csv\"\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.paths.network, dir.path().join("net.txt"));
        assert_eq!(c.paths.records, PathBuf::from("/abs/r.csv"));
        assert!(matches!(
            RunConfig::load(&dir.path().join("missing.toml")),
            Err(Error::Config { .. })
        ));
    }
}
