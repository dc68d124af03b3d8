//! Command-line front end. Every command reads one [`RunConfig`]; the
//! binary maps `Ok(true)` to exit 0, failed checks to 1 and errors to 2.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::autodiff::suite::check_ops;
use crate::autodiff::DEFAULT_STEP;
use crate::config::{require_file, RunConfig, Scale};
use crate::error::{Error, Result};
use crate::model::check::composed_grad_check;
use crate::model::{
    chronological_split, evaluate, frames_from_records, load_model, run_comparison, save_model,
    train, write_history, Architecture, Evaluation, Model, ModelConfig, Persistence, Series,
    Trained,
};
use crate::plan::render_table;
use crate::raster::{io, write_archive, RoadNetwork, SampleWindow};

#[derive(Debug, Parser)]
#[command(name = "trafficaps", version, about = "Grid-based traffic speed forecasting")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for generated artifacts and reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate speed records, fill gaps and write a frame archive.
    Rasterize,
    /// Generate a synthetic network, records and frame archive.
    Synth,
    /// Train the configured model and save a checkpoint.
    Train,
    /// Score a checkpoint on the test block against persistence.
    Eval,
    /// Forecast from the `lag` frames ending at period `t`.
    Predict {
        /// Index of the last input period
        #[arg(long)]
        t: usize,
    },
    /// Print the layer table with output shapes and parameter counts.
    Paramcount {
        #[arg(long, value_enum)]
        scale: Option<ScaleArg>,
        /// Architecture tag, e.g. capsnet_nlstm or cnn_lstm.
        #[arg(long)]
        arch: Option<String>,
    },
    /// Finite-difference check of every primitive op and the composed model.
    Gradcheck,
    /// Train several architectures and write accuracy and lag reports.
    Compare,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<bool>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(true);
            }
            return Err(Error::config("arguments", e.to_string()));
        }
    };
    execute(&cli)
}

struct Ctx {
    cfg: RunConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    /// Where an output artifact goes: under `--out` when given.
    fn output(&self, configured: &Path) -> PathBuf {
        match &self.out {
            Some(dir) => dir.join(configured.file_name().unwrap_or(configured.as_os_str())),
            None => configured.to_path_buf(),
        }
    }

    fn report_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| self.cfg.paths.report_dir.clone());
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn archive(&self) -> PathBuf {
        self.output(&self.cfg.paths.archive)
    }

    fn checkpoint(&self) -> PathBuf {
        self.output(&self.cfg.paths.checkpoint)
    }
}

pub fn execute(cli: &Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
    }
    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Rasterize => cmd_rasterize(&ctx),
        Command::Synth => cmd_synth(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Eval => cmd_eval(&ctx),
        Command::Predict { t } => cmd_predict(&ctx, *t),
        Command::Paramcount { scale, arch } => cmd_paramcount(&ctx, *scale, arch.as_deref()),
        Command::Gradcheck => cmd_gradcheck(&ctx),
        Command::Compare => cmd_compare(&ctx),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_network(cfg: &RunConfig) -> Result<RoadNetwork> {
    let path = &cfg.paths.network;
    require_file("paths.network", path)?;
    let links = io::parse_geometry(BufReader::new(File::open(path)?), &path.display().to_string())?;
    RoadNetwork::new(links, cfg.raster.cell_size, None)
}

fn load_records(cfg: &RunConfig) -> Result<Vec<crate::raster::SpeedRecord>> {
    let path = &cfg.paths.records;
    require_file("paths.records", path)?;
    io::parse_records(BufReader::new(File::open(path)?), &path.display().to_string())
}

/// The series behind every model command, checked against the model.
fn load_series(cfg: &RunConfig, model: &ModelConfig) -> Result<Series> {
    let network = load_network(cfg)?;
    let records = load_records(cfg)?;
    let (series, _) = Series::from_records(&network, &records, cfg.raster.period_secs, cfg.raster.v_max)?;
    if series.grid() != model.grid {
        return Err(Error::config(
            "model.grid",
            format!("model expects {:?}, network rasterizes to {:?}", model.grid, series.grid()),
        ));
    }
    if series.link_ids.len() != model.links {
        return Err(Error::config(
            "model.links",
            format!("model expects {}, network has {}", model.links, series.link_ids.len()),
        ));
    }
    Ok(series)
}

fn cmd_rasterize(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let network = load_network(cfg)?;
    let records = load_records(cfg)?;
    let (_, frames) = frames_from_records(&network, &records, cfg.raster.period_secs)?;
    let path = ctx.archive();
    let mut w = create(&path)?;
    write_archive(&mut w, &frames)?;
    w.flush()?;
    let (h, wd) = network.grid_dims();
    println!("{} frames of {h}x{wd} written to {}", frames.len(), path.display());
    Ok(true)
}

fn cmd_synth(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let r = &cfg.raster;
    let out = Series::synthetic(&cfg.synth, r.cell_size, r.period_secs, r.v_max, cfg.seed)?;
    let net_path = ctx.output(&cfg.paths.network);
    let rec_path = ctx.output(&cfg.paths.records);
    let arc_path = ctx.archive();
    let mut w = create(&net_path)?;
    io::write_geometry(&mut w, out.network.links())?;
    w.flush()?;
    let mut w = create(&rec_path)?;
    io::write_records(&mut w, &out.records)?;
    w.flush()?;
    let mut w = create(&arc_path)?;
    write_archive(&mut w, &out.frames)?;
    w.flush()?;
    let (h, wd) = out.network.grid_dims();
    println!(
        "{} links, {} records, {} frames of {h}x{wd}",
        out.network.links().len(),
        out.records.len(),
        out.frames.len()
    );
    println!("network  {}", net_path.display());
    println!("records  {}", rec_path.display());
    println!("archive  {}", arc_path.display());
    Ok(true)
}

struct Parts {
    train: Vec<SampleWindow>,
    val: Vec<SampleWindow>,
    test: Vec<SampleWindow>,
}

fn split(cfg: &RunConfig, model: &ModelConfig, series: &Series) -> Result<Parts> {
    let windows = series.windows(model.lag, &model.horizons)?;
    let max_h = model.horizons.iter().max().copied().unwrap_or(1);
    let s = chronological_split(
        windows.len(),
        cfg.train.val_fraction,
        cfg.train.test_fraction,
        model.lag + max_h - 1,
    )?;
    Ok(Parts {
        train: windows[s.train].to_vec(),
        val: windows[s.val].to_vec(),
        test: windows[s.test].to_vec(),
    })
}

fn cmd_train(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let mc = cfg.model_config()?;
    let series = load_series(cfg, &mc)?;
    let parts = split(cfg, &mc, &series)?;
    let (model, init) = Model::init::<f32>(&mc, cfg.seed)?;
    println!(
        "{}: {} parameters, {} train / {} val / {} test windows",
        mc.architecture,
        init.count(),
        parts.train.len(),
        parts.val.len(),
        parts.test.len()
    );
    let out = train(&model, init, &parts.train, &parts.val, &cfg.train, cfg.seed)?;
    for r in &out.history {
        let val = r.val_loss.map_or_else(|| "-".into(), |v| format!("{v:.6}"));
        println!("epoch {:>3}  lr {:.2e}  train {:.6}  val {val}", r.epoch, r.lr, r.train_loss);
    }
    let ckpt = ctx.checkpoint();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_model(&ckpt, &mc, &out.best)?;
    let hist = ctx.report_dir()?.join("history.csv");
    let mut w = create(&hist)?;
    write_history(&mut w, &out.history)?;
    w.flush()?;
    println!(
        "initial loss {:.6}, final loss {:.6}, kept epoch {}",
        out.initial_loss, out.final_loss, out.best_epoch
    );
    println!("checkpoint {}", ckpt.display());
    println!("history    {}", hist.display());
    Ok(true)
}

fn metrics_table(evals: &[&Evaluation]) -> String {
    let mut s = format!(
        "{:<16} {:>8} {:>12} {:>14} {:>14} {:>8}\n",
        "model", "horizon", "mse", "mape_standard", "mape_paper", "flagged"
    );
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |v| format!("{:.2}%", 100.0 * v));
    for e in evals {
        let rows = e
            .per_horizon
            .iter()
            .map(|(h, m)| (h.to_string(), m))
            .chain(std::iter::once(("all".to_string(), &e.overall)));
        for (h, m) in rows {
            s += &format!(
                "{:<16} {:>8} {:>12.4} {:>14} {:>14} {:>8}\n",
                e.name,
                h,
                m.mse,
                pct(Some(m.mape_standard)),
                pct(m.mape_paper),
                if h == "all" { e.flagged().to_string() } else { String::new() }
            );
        }
    }
    s
}

fn cmd_eval(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let want = cfg.model_config()?.architecture;
    let (model, store) = load_model(&ctx.checkpoint(), Some(want))?;
    let mc = model.config.clone();
    let series = load_series(cfg, &mc)?;
    let parts = split(cfg, &mc, &series)?;
    let threshold = cfg.eval.threshold;
    let trained = Trained { model, store };
    let ev = evaluate(&trained, &parts.test, &series.link_ids, threshold)?;
    let base = evaluate(&Persistence, &parts.test, &series.link_ids, threshold)?;
    let table = metrics_table(&[&ev, &base]);
    print!("{table}");
    let dir = ctx.report_dir()?;
    fs::write(dir.join("metrics.txt"), &table)?;
    let links = dir.join("link_errors.csv");
    let mut w = create(&links)?;
    ev.write_link_report(&mut w)?;
    w.flush()?;
    println!("{} of {} links above {threshold} km/h; report {}", ev.flagged(), ev.links.len(), links.display());
    Ok(true)
}

fn cmd_predict(ctx: &Ctx, t: usize) -> Result<bool> {
    let cfg = &ctx.cfg;
    let want = cfg.model_config()?.architecture;
    let (model, store) = load_model(&ctx.checkpoint(), Some(want))?;
    let mc = model.config.clone();
    let series = load_series(cfg, &mc)?;
    if t + 1 < mc.lag || t >= series.len() {
        return Err(Error::config(
            "--t",
            format!("needs {} <= t < {}", mc.lag - 1, series.len()),
        ));
    }
    let frames = &series.frames[t + 1 - mc.lag..=t];
    let forecast = model.predict(&store, frames)?;
    let mut text = String::from("link_id");
    for h in forecast.keys() {
        text += &format!(",h{h}");
    }
    text.push('\n');
    for (i, id) in series.link_ids.iter().enumerate() {
        text += &id.to_string();
        for v in forecast.values() {
            text += &format!(",{:.4}", v[i]);
        }
        text.push('\n');
    }
    print!("{text}");
    fs::write(ctx.report_dir()?.join(format!("predict_t{t}.csv")), text)?;
    Ok(true)
}

fn cmd_paramcount(ctx: &Ctx, scale: Option<ScaleArg>, arch: Option<&str>) -> Result<bool> {
    let cfg = &ctx.cfg;
    let mut section = cfg.model.clone();
    if let Some(tag) = arch {
        section.architecture = tag.parse::<Architecture>()?;
    }
    let mc = match scale {
        Some(ScaleArg::Paper) => ModelConfig::paper(section.architecture),
        Some(ScaleArg::Desk) => ModelConfig::desk(section.architecture),
        None if section.scale == Scale::Paper && arch.is_some() => {
            ModelConfig::paper(section.architecture)
        }
        None => section.resolve(cfg.raster.v_max)?,
    };
    let rows = mc.plan()?;
    println!("{}", mc.architecture);
    print!("{}", render_table(&rows));
    Ok(true)
}

/// Parameter count above which the composed check would take hours.
const COMPOSED_CHECK_LIMIT: u64 = 200_000;

fn cmd_gradcheck(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let gc = &cfg.gradcheck;
    let mut rows: Vec<(String, f64)> = check_ops(gc.points, cfg.seed)?
        .into_iter()
        .map(|(n, e)| (n.to_string(), e))
        .collect();
    let mc = cfg.model_config()?;
    if mc.param_count()? > COMPOSED_CHECK_LIMIT {
        return Err(Error::config(
            "model.scale",
            "the composed gradient check needs a desk-scale model",
        ));
    }
    let report = composed_grad_check(&mc, cfg.seed, DEFAULT_STEP)?;
    rows.push((format!("model:{}+mse", mc.architecture), report.max_rel_error));
    let mut text = String::from("op,max_rel_error,status\n");
    let mut ok = true;
    for (name, err) in &rows {
        let pass = *err < gc.tolerance;
        ok &= pass;
        let status = if pass { "PASS" } else { "FAIL" };
        println!("{name:<28} {err:>12.3e}  {status}");
        text += &format!("{name},{err:e},{status}\n");
    }
    fs::write(ctx.report_dir()?.join("gradcheck.csv"), text)?;
    println!(
        "{} checks, tolerance {:e}: {}",
        rows.len(),
        gc.tolerance,
        if ok { "all passed" } else { "FAILED" }
    );
    Ok(ok)
}

fn cmd_compare(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let mc = cfg.model_config()?;
    let series = load_series(cfg, &mc)?;
    let cmp = run_comparison(&series, &mc, &cfg.train, &cfg.compare, cfg.seed, cfg.eval.threshold)?;
    let dir = ctx.report_dir()?;
    let acc = cmp.accuracy_report();
    let lag = cmp.lag_report();
    println!("{acc}\n{lag}");
    fs::write(dir.join("accuracy.txt"), &acc)?;
    fs::write(dir.join("lag.txt"), &lag)?;
    for r in cmp.rows.iter().chain(&cmp.lag_rows) {
        let name = format!("history_{}_lag{}.csv", r.config.architecture, r.config.lag);
        let mut w = create(&dir.join(name))?;
        write_history(&mut w, &r.history)?;
        w.flush()?;
    }
    Ok(true)
}
