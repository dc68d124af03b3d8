//! Finite-difference check of a whole forecaster: trunk, recurrence,
//! dropout with a fixed mask, heads and the loss.

use super::data::{Series, SynthConfig};
use super::{Model, ModelConfig};
use crate::autodiff::{grad_check, GradCheckReport, ParamStore};
use crate::error::{Error, Result};
use crate::raster::SampleWindow;
use crate::rng::substream;
use crate::tensor::Tensor;

/// A probe moves one parameter by at most `2 * step`, which shifts any
/// first-convolution pre-activation by at most that much (inputs lie in
/// [0, 1]). Requiring this many steps of clearance keeps every probe on
/// one side of each ReLU kink.
pub const KINK_STEPS: f64 = 4.0;

/// One synthetic window matching `config`'s grid, link count and horizons.
pub fn probe_window(config: &ModelConfig, seed: u64) -> Result<SampleWindow> {
    let max_h = config.horizons.iter().max().copied().unwrap_or(1);
    let synth = SynthConfig {
        links: config.links,
        grid: config.grid,
        periods: config.lag + max_h + 4,
        ..SynthConfig::default()
    };
    let out = Series::synthetic(&synth, (1e-4, 1e-4), 120, config.v_max, seed)?;
    let mut w = out.series.windows(config.lag, &config.horizons)?;
    Ok(w.swap_remove(2))
}

/// Re-centres each first-convolution bias in the widest gap between that
/// channel's bias-free pre-activations over `sample`, returning the
/// smallest clearance achieved. `None` without a capsule trunk.
fn place_biases(model: &Model, store: &mut ParamStore<f64>, sample: &SampleWindow) -> Result<Option<f64>> {
    let Some(id) = store.find("caps.conv1.b") else {
        return Ok(None);
    };
    store.get_mut(id).value.data_mut().iter_mut().for_each(|b| *b = 0.0);
    let channels = store.get(id).value.len();
    let mut per_channel = vec![Vec::new(); channels];
    for f in &sample.inputs {
        if let Some(pre) = model.capsule_preactivation(store, f)? {
            for (i, &x) in pre.data().iter().enumerate() {
                per_channel[i % channels].push(x);
            }
        }
    }
    let mut clearance = f64::INFINITY;
    for (c, xs) in per_channel.iter_mut().enumerate() {
        xs.sort_by(f64::total_cmp);
        let (gap, mid) = xs
            .windows(2)
            .map(|w| (w[1] - w[0], 0.5 * (w[0] + w[1])))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap_or((f64::INFINITY, xs.first().copied().unwrap_or(0.0) + 1.0));
        store.get_mut(id).value.data_mut()[c] = -mid;
        clearance = clearance.min(0.5 * gap);
    }
    Ok(Some(clearance))
}

/// Checks d(loss)/d(params) of `config` in 64-bit at step `step`.
///
/// The first-convolution biases of the point are placed so that no
/// pre-activation lies within `KINK_STEPS * step` of the ReLU kink; the
/// first seed from `seed` upward where that is possible is used.
pub fn composed_grad_check(config: &ModelConfig, seed: u64, step: f64) -> Result<GradCheckReport> {
    let sample = probe_window(config, seed)?;
    let mut chosen = None;
    for s in seed..seed + 100 {
        let (model, mut store) = Model::init::<f64>(config, s)?;
        match place_biases(&model, &mut store, &sample)? {
            Some(c) if c <= KINK_STEPS * step => continue,
            _ => {
                chosen = Some((model, store));
                break;
            }
        }
    }
    let (model, store) =
        chosen.ok_or_else(|| Error::numeric("no kink-free point for the gradient check"))?;
    let point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    grad_check(
        |g, params| {
            let mut rng = substream(seed, "gradcheck.dropout");
            let out = model.forward(g, params, &sample.inputs, true, &mut rng)?;
            model.loss(g, &out, &sample.targets)
        },
        &point,
        step,
    )
}
