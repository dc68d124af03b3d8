//! Closed-form output extents for the windowed operators. The graph ops and
//! the symbolic layer planner both go through these functions.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; `floor((n - k) / s) + 1`.
    Valid,
    /// Zero padding so that the output is `ceil(n / s)`.
    Same,
}

/// Output extent and leading pad of a convolution along one axis.
pub fn conv_axis(n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 || k == 0 {
        return Err(Error::shape("kernel and stride must be positive"));
    }
    match padding {
        Padding::Valid => {
            if k > n {
                return Err(Error::shape(format!(
                    "kernel {k} larger than input extent {n}"
                )));
            }
            Ok(((n - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            if k > n + total {
                return Err(Error::shape(format!(
                    "kernel {k} larger than padded input extent {}",
                    n + total
                )));
            }
            Ok((out, total / 2))
        }
    }
}

/// `(H', W')` of a 2-D convolution over an `H×W` input.
pub fn conv2d_output(
    hw: (usize, usize),
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let (h, _) = conv_axis(hw.0, kernel, stride, padding)?;
    let (w, _) = conv_axis(hw.1, kernel, stride, padding)?;
    Ok((h, w))
}

/// Output extent of max pooling along one axis. With `ceil_mode` a partial
/// window at the trailing edge is kept as long as it starts inside the input.
pub fn pool_axis(n: usize, window: usize, stride: usize, ceil_mode: bool) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be positive"));
    }
    if n == 0 {
        return Err(Error::shape("empty pooling input"));
    }
    if ceil_mode {
        let span = n.saturating_sub(window);
        let mut out = span.div_ceil(stride) + 1;
        while out > 1 && (out - 1) * stride >= n {
            out -= 1;
        }
        Ok(out)
    } else {
        if window > n {
            return Err(Error::shape(format!(
                "pool window {window} larger than input extent {n}"
            )));
        }
        Ok((n - window) / stride + 1)
    }
}

pub fn maxpool2d_output(
    hw: (usize, usize),
    window: usize,
    stride: usize,
    ceil_mode: bool,
) -> Result<(usize, usize)> {
    Ok((
        pool_axis(hw.0, window, stride, ceil_mode)?,
        pool_axis(hw.1, window, stride, ceil_mode)?,
    ))
}
