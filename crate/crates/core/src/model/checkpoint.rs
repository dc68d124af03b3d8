//! Model files: a TOML `ModelConfig` block, a `%%CKPT` marker line, then
//! the binary parameter checkpoint.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, Model, ModelConfig};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

const MARKER: &[u8] = b"%%CKPT\n";

pub fn write_model<W: Write>(mut w: W, config: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    let header = toml::to_string(config).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(header.as_bytes())?;
    if !header.ends_with('\n') {
        w.write_all(b"\n")?;
    }
    w.write_all(MARKER)?;
    store.write_checkpoint(w)
}

/// Parses a model file and checks the parameters against the layout the
/// header describes.
pub fn read_model<R: Read>(mut r: R) -> Result<(Model, ParamStore<f32>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let split = find_marker(&bytes)
        .ok_or_else(|| Error::Format("model file has no checkpoint marker".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Format("model header is not UTF-8".into()))?;
    let config: ModelConfig =
        toml::from_str(header).map_err(|e| Error::Format(format!("model header: {e}")))?;
    let stored = ParamStore::<f32>::read_checkpoint(&bytes[split + MARKER.len()..])?;
    let (model, mut store) = Model::init::<f32>(&config, 0)?;
    store.load_values(&stored)?;
    Ok((model, store))
}

fn find_marker(bytes: &[u8]) -> Option<usize> {
    if bytes.starts_with(MARKER) {
        return Some(0);
    }
    bytes
        .windows(MARKER.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == MARKER)
        .map(|i| i + 1)
}

pub fn save_model(path: &Path, config: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, config, store)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a model file, optionally insisting on an architecture.
pub fn load_model(
    path: &Path,
    expected: Option<Architecture>,
) -> Result<(Model, ParamStore<f32>)> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let (model, store) = read_model(fs::File::open(path)?)?;
    if let Some(want) = expected {
        if model.config.architecture != want {
            return Err(Error::ArchitectureMismatch {
                expected: want.to_string(),
                found: model.config.architecture.to_string(),
            });
        }
    }
    Ok((model, store))
}
