//! C ABI over the forecasting engine.
//!
//! Every function returns a [`TcStatus`]. On failure a message is kept per
//! thread and can be read with [`tc_last_error`]. Handles are opaque and
//! must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use trafficaps::autodiff::ParamStore;
use trafficaps::model::{load_model, Architecture, Model, ModelConfig};
use trafficaps::raster::{io, rasterize_speeds, Normalizer, RoadNetwork, SpeedFrame};
use trafficaps::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Shape = 7,
    MissingCheckpoint = 8,
    ArchitectureMismatch = 9,
    Numeric = 10,
    Panic = 11,
    Other = 12,
}

/// A trained model and its parameters.
pub struct TcModel {
    model: Model,
    store: ParamStore<f32>,
}

/// A road network indexed onto its grid.
pub struct TcNetwork {
    network: RoadNetwork,
}

/// Dimensions of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TcModelInfo {
    pub rows: usize,
    pub cols: usize,
    pub lag: usize,
    pub links: usize,
    pub horizons: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> TcStatus {
    match e {
        Error::Shape(_) => TcStatus::Shape,
        Error::Config { .. } | Error::UnknownArchitecture(_) => TcStatus::Config,
        Error::Parse { .. }
        | Error::Format(_)
        | Error::RejectedRecord(_)
        | Error::NoRecords
        | Error::UnknownLink(_) => TcStatus::Parse,
        Error::MissingCheckpoint(_) => TcStatus::MissingCheckpoint,
        Error::ArchitectureMismatch { .. } => TcStatus::ArchitectureMismatch,
        Error::NumericFailure { .. } | Error::Divergence { .. } | Error::DivisionGuard { .. } => {
            TcStatus::Numeric
        }
        Error::Io(_) => TcStatus::Io,
        _ => TcStatus::Other,
    }
}

struct Fail(TcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(
            TcStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Total trainable parameters of an architecture preset.
/// `paper_scale` nonzero selects the full-size layout, zero the desk one.
///
/// # Safety
/// `arch` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_param_count(arch: *const c_char, paper_scale: c_int, out: *mut u64) -> TcStatus {
    guard(|| {
        let a: Architecture = text(arch, "arch")?.parse()?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = if paper_scale != 0 {
            ModelConfig::paper(a)
        } else {
            ModelConfig::desk(a)
        };
        *out = c.param_count()?;
        Ok(())
    })
}

/// Loads a model file written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable. On success
/// `*out` owns a handle to release with [`tc_model_free`].
#[no_mangle]
pub unsafe extern "C" fn tc_model_load(path: *const c_char, out: *mut *mut TcModel) -> TcStatus {
    guard(|| {
        let p = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let (model, store) = load_model(Path::new(p), None)?;
        *out = Box::into_raw(Box::new(TcModel { model, store }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`tc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tc_model_free(model: *mut TcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_model_info(model: *const TcModel, out: *mut TcModelInfo) -> TcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.model.config;
        *out = TcModelInfo {
            rows: c.grid.0,
            cols: c.grid.1,
            lag: c.lag,
            links: c.links,
            horizons: c.horizons.len(),
        };
        Ok(())
    })
}

/// Writes the model's horizons (in periods, ascending) to `out`.
///
/// # Safety
/// `model` must be a live handle; `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn tc_model_horizons(model: *const TcModel, out: *mut usize, out_len: usize) -> TcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let hs = &m.model.config.horizons;
        out_slice(out, out_len, hs.len(), "out")?.copy_from_slice(hs);
        Ok(())
    })
}

/// Forecasts from `lag` consecutive frames of km/h values, row-major and
/// oldest first (`lag * rows * cols` values). Writes `horizons * links`
/// km/h values, one row of links per horizon in ascending horizon order.
///
/// # Safety
/// `model` must be a live handle; `frames` must hold `frames_len` values
/// and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn tc_model_predict(
    model: *const TcModel,
    frames: *const f32,
    frames_len: usize,
    out: *mut f64,
    out_len: usize,
) -> TcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.model.config;
        let (rows, cols) = c.grid;
        let cells = rows * cols;
        if frames.is_null() {
            return Err(null("frames"));
        }
        if frames_len != c.lag * cells {
            return Err(Fail(
                TcStatus::Shape,
                format!("expected {} frame values, got {frames_len}", c.lag * cells),
            ));
        }
        let data = std::slice::from_raw_parts(frames, frames_len);
        let out = out_slice(out, out_len, c.horizons.len() * c.links, "out")?;
        let norm = Normalizer::new(c.v_max)?;
        let input: Vec<_> = data
            .chunks(cells)
            .map(|v| {
                Arc::new(norm.normalize_frame(&SpeedFrame {
                    timestamp: 0,
                    rows,
                    cols,
                    values: v.to_vec(),
                }))
            })
            .collect();
        let forecast = m.model.predict(&m.store, &input)?;
        for (dst, src) in out.chunks_mut(c.links).zip(forecast.values()) {
            dst.copy_from_slice(src);
        }
        Ok(())
    })
}

/// Loads a geometry file and indexes it on cells of `cell_lat` by
/// `cell_lon` degrees.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable. On success
/// `*out` owns a handle to release with [`tc_network_free`].
#[no_mangle]
pub unsafe extern "C" fn tc_network_load(
    path: *const c_char,
    cell_lat: f64,
    cell_lon: f64,
    out: *mut *mut TcNetwork,
) -> TcStatus {
    guard(|| {
        let p = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let links = io::parse_geometry(BufReader::new(File::open(p).map_err(Error::from)?), p)?;
        let network = RoadNetwork::new(links, (cell_lat, cell_lon), None)?;
        *out = Box::into_raw(Box::new(TcNetwork { network }));
        Ok(())
    })
}

/// # Safety
/// `network` must come from [`tc_network_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tc_network_free(network: *mut TcNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Grid rows, columns and link count.
///
/// # Safety
/// `network` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tc_network_dims(
    network: *const TcNetwork,
    rows: *mut usize,
    cols: *mut usize,
    links: *mut usize,
) -> TcStatus {
    guard(|| {
        let n = network.as_ref().ok_or_else(|| null("network"))?;
        if rows.is_null() || cols.is_null() || links.is_null() {
            return Err(null("output"));
        }
        let (r, c) = n.network.grid_dims();
        *rows = r;
        *cols = c;
        *links = n.network.links().len();
        Ok(())
    })
}

/// Rasterizes one speed per link (ascending link id order) into a
/// row-major `rows * cols` frame; untouched cells are zero.
///
/// # Safety
/// `network` must be a live handle; `speeds` must hold `speeds_len`
/// values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn tc_network_rasterize(
    network: *const TcNetwork,
    speeds: *const f64,
    speeds_len: usize,
    out: *mut f32,
    out_len: usize,
) -> TcStatus {
    guard(|| {
        let n = network.as_ref().ok_or_else(|| null("network"))?;
        if speeds.is_null() {
            return Err(null("speeds"));
        }
        let links = n.network.links().len();
        if speeds_len != links {
            return Err(Fail(
                TcStatus::Shape,
                format!("expected {links} link speeds, got {speeds_len}"),
            ));
        }
        let (r, c) = n.network.grid_dims();
        let out = out_slice(out, out_len, r * c, "out")?;
        let v = std::slice::from_raw_parts(speeds, speeds_len);
        if let Some(bad) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Fail(TcStatus::InvalidArgument, format!("invalid speed {bad}")));
        }
        out.copy_from_slice(&rasterize_speeds(&n.network, v, 0).values);
        Ok(())
    })
}
