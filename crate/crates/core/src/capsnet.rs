//! Capsule trunk: a ReLU convolution, a primary-capsule convolution whose
//! channels are regrouped into squashed vectors, and a fully connected
//! capsule layer resolved by dynamic routing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::shape::conv2d_output;
use crate::autodiff::{Graph, Padding, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::plan::{conv_params, LayerRow};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimarySpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    pub capsule_dim: usize,
}

/// Which parts of the routing loop the backward pass sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingGradient {
    /// Differentiate through every iteration, including the logit updates.
    #[default]
    Full,
    /// Coupling coefficients and logit updates are treated as constants;
    /// only the last weighted sum and squash carry gradient.
    FinalIteration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsNetConfig {
    pub conv1: ConvSpec,
    pub primary: PrimarySpec,
    /// Number of advanced capsules `p`.
    pub capsules: usize,
    /// Dimension `d_a` of each advanced capsule.
    pub capsule_dim: usize,
    pub routing_iters: usize,
    #[serde(default)]
    pub routing_gradient: RoutingGradient,
}

/// Intermediate shapes for one input frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsShapes {
    pub conv1: [usize; 3],
    pub primary: [usize; 3],
    /// `(N, d_p)`.
    pub primary_capsules: (usize, usize),
    /// `(p, d_a)`.
    pub advanced: (usize, usize),
    pub flat: usize,
}

impl CapsNetConfig {
    pub fn paper() -> Self {
        CapsNetConfig {
            conv1: ConvSpec {
                kernel: 9,
                channels: 128,
                stride: 2,
            },
            primary: PrimarySpec {
                kernel: 9,
                channels: 128,
                stride: 4,
                capsule_dim: 8,
            },
            capsules: 30,
            capsule_dim: 16,
            routing_iters: 3,
            routing_gradient: RoutingGradient::Full,
        }
    }

    /// Small trunk for a 20×20 grid: 8×8×16, 2×2×16, 16 capsules of 4, 4×4.
    pub fn desk() -> Self {
        CapsNetConfig {
            conv1: ConvSpec {
                kernel: 5,
                channels: 16,
                stride: 2,
            },
            primary: PrimarySpec {
                kernel: 5,
                channels: 16,
                stride: 2,
                capsule_dim: 4,
            },
            capsules: 4,
            capsule_dim: 4,
            routing_iters: 3,
            routing_gradient: RoutingGradient::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("capsnet.conv1.kernel", self.conv1.kernel),
            ("capsnet.conv1.channels", self.conv1.channels),
            ("capsnet.conv1.stride", self.conv1.stride),
            ("capsnet.primary.kernel", self.primary.kernel),
            ("capsnet.primary.channels", self.primary.channels),
            ("capsnet.primary.stride", self.primary.stride),
            ("capsnet.primary.capsule_dim", self.primary.capsule_dim),
            ("capsnet.capsules", self.capsules),
            ("capsnet.capsule_dim", self.capsule_dim),
            ("capsnet.routing_iters", self.routing_iters),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.primary.channels.is_multiple_of(self.primary.capsule_dim) {
            return Err(Error::config(
                "capsnet.primary.capsule_dim",
                format!(
                    "{} channels do not divide into capsules of {}",
                    self.primary.channels, self.primary.capsule_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn shapes(&self, input: (usize, usize)) -> Result<CapsShapes> {
        self.validate()?;
        let (h1, w1) = conv2d_output(input, self.conv1.kernel, self.conv1.stride, Padding::Valid)?;
        let (h2, w2) = conv2d_output(
            (h1, w1),
            self.primary.kernel,
            self.primary.stride,
            Padding::Valid,
        )?;
        let n = h2 * w2 * (self.primary.channels / self.primary.capsule_dim);
        Ok(CapsShapes {
            conv1: [h1, w1, self.conv1.channels],
            primary: [h2, w2, self.primary.channels],
            primary_capsules: (n, self.primary.capsule_dim),
            advanced: (self.capsules, self.capsule_dim),
            flat: self.capsules * self.capsule_dim,
        })
    }

    /// Layer rows from the first convolution through the flattened output.
    pub fn plan(&self, input: (usize, usize)) -> Result<Vec<LayerRow>> {
        let s = self.shapes(input)?;
        let (n, dp) = s.primary_capsules;
        Ok(vec![
            LayerRow::new(
                "conv1",
                s.conv1,
                conv_params(self.conv1.kernel, 1, self.conv1.channels),
            ),
            LayerRow::new(
                "primary_caps",
                s.primary,
                conv_params(self.primary.kernel, self.conv1.channels, self.primary.channels),
            ),
            LayerRow::new("reshape", [n, dp], 0),
            LayerRow::new(
                "traffic_caps",
                [self.capsules, self.capsule_dim],
                (n * self.capsules * dp * self.capsule_dim) as u64,
            ),
            LayerRow::new("flatten", [s.flat], 0),
        ])
    }
}

/// Squash over the trailing axis of a plain tensor:
/// `s * |s| / (1 + |s|^2)`, exactly zero at `s = 0`.
pub fn squash_tensor<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    let d = *s.shape().last().unwrap();
    let mut out = s.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n2: T = row.iter().map(|&v| v * v).sum();
        let g = n2.sqrt() / (T::one() + n2);
        row.iter_mut().for_each(|v| *v = *v * g);
    }
    out
}

/// Per-iteration record of the routing loop.
#[derive(Clone, Debug, Default)]
pub struct RoutingTrace<T> {
    /// Logits `b` entering each iteration (the first is all zeros).
    pub logits: Vec<Tensor<T>>,
    /// Coupling coefficients `c = softmax(b)` of each iteration.
    pub coupling: Vec<Tensor<T>>,
    /// Advanced capsules `v` produced by each iteration.
    pub outputs: Vec<Tensor<T>>,
}

/// Output of [`dynamic_routing`].
#[derive(Clone, Copy, Debug)]
pub struct Routed {
    /// `[p, d_a]` advanced capsules.
    pub v: Var,
    /// `[N, p]` coefficients of the final iteration.
    pub coupling: Var,
}

/// Routing-by-agreement over predictions `u_hat[N, p, d_a]`.
///
/// `b = 0`; then `iters` times: `c = softmax_j(b)`, `s_j = sum_i c_ij u_hat_ij`,
/// `v_j = squash(s_j)`, `b_ij += u_hat_ij . v_j`. The final logit update is
/// skipped since nothing reads it.
pub fn dynamic_routing<T: Scalar>(
    g: &mut Graph<T>,
    u_hat: Var,
    iters: usize,
    mode: RoutingGradient,
    mut trace: Option<&mut RoutingTrace<T>>,
) -> Result<Routed> {
    let shape = g.shape(u_hat).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("routing predictions {shape:?}")));
    }
    if iters == 0 {
        return Err(Error::config("capsnet.routing_iters", "must be at least 1"));
    }
    let (n, p) = (shape[0], shape[1]);
    let u_route = match mode {
        RoutingGradient::Full => u_hat,
        RoutingGradient::FinalIteration => g.detach(u_hat),
    };
    let mut b = g.constant(Tensor::zeros([n, p]));
    for it in 0..iters {
        let last = it + 1 == iters;
        let mut c = g.softmax(b, 1)?;
        if mode == RoutingGradient::FinalIteration {
            c = g.detach(c);
        }
        let u = if last { u_hat } else { u_route };
        let s = g.route_sum(c, u)?;
        let v = g.squash(s);
        if !g.value(v).all_finite() {
            return Err(Error::numeric(format!("routing iteration {}", it + 1)));
        }
        if let Some(t) = trace.as_deref_mut() {
            t.logits.push(g.value(b).clone());
            t.coupling.push(g.value(c).clone());
            t.outputs.push(g.value(v).clone());
        }
        if last {
            return Ok(Routed { v, coupling: c });
        }
        let agree = g.route_agree(u_route, v)?;
        b = g.add(b, agree)?;
    }
    unreachable!("iters >= 1")
}

/// Parameter handles of one capsule trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsNet {
    pub config: CapsNetConfig,
    pub input: (usize, usize),
    shapes: CapsShapes,
    conv1_w: ParamId,
    conv1_b: ParamId,
    primary_w: ParamId,
    primary_b: ParamId,
    transforms: ParamId,
}

impl CapsNet {
    /// Registers the trunk's parameters under `prefix`. Kernels and
    /// transforms are Glorot-uniform, biases zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: CapsNetConfig,
        input: (usize, usize),
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let shapes = config.shapes(input)?;
        let (k1, c1) = (config.conv1.kernel, config.conv1.channels);
        let (k2, c2) = (config.primary.kernel, config.primary.channels);
        let (n, dp) = shapes.primary_capsules;
        let (p, da) = shapes.advanced;
        let conv1_w = store.add(
            format!("{prefix}.conv1.w"),
            Tensor::glorot([k1, k1, 1, c1], k1 * k1, k1 * k1 * c1, rng),
        );
        let conv1_b = store.add(format!("{prefix}.conv1.b"), Tensor::zeros([c1]));
        let primary_w = store.add(
            format!("{prefix}.primary.w"),
            Tensor::glorot([k2, k2, c1, c2], k2 * k2 * c1, k2 * k2 * c2, rng),
        );
        let primary_b = store.add(format!("{prefix}.primary.b"), Tensor::zeros([c2]));
        let transforms = store.add(
            format!("{prefix}.traffic_caps.w"),
            Tensor::glorot([n, p, dp, da], dp, da, rng),
        );
        Ok(CapsNet {
            config,
            input,
            shapes,
            conv1_w,
            conv1_b,
            primary_w,
            primary_b,
            transforms,
        })
    }

    pub fn shapes(&self) -> &CapsShapes {
        &self.shapes
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.flat
    }

    /// `frame[H, W, 1]` to the flattened advanced capsules `[p * d_a]`.
    /// `params` holds one bound node per store entry (see
    /// [`Graph::bind_all`]).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var], frame: Var) -> Result<Var> {
        self.forward_traced(g, params, frame, None)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        frame: Var,
        trace: Option<&mut RoutingTrace<T>>,
    ) -> Result<Var> {
        let expect = [self.input.0, self.input.1, 1];
        if g.shape(frame) != expect {
            return Err(Error::shape(format!(
                "capsule trunk expects a {expect:?} frame, got {:?}",
                g.shape(frame)
            )));
        }
        let at = |id: ParamId| params[id.index()];
        let x = g.conv2d(frame, at(self.conv1_w), self.config.conv1.stride, Padding::Valid)?;
        let x = g.add_bias(x, at(self.conv1_b))?;
        let x = g.relu(x);
        let x = g.conv2d(x, at(self.primary_w), self.config.primary.stride, Padding::Valid)?;
        let x = g.add_bias(x, at(self.primary_b))?;
        let (n, dp) = self.shapes.primary_capsules;
        let u = g.reshape(x, [n, dp])?;
        let u = g.squash(u);
        let u_hat = g.capsule_predict(u, at(self.transforms))?;
        let routed = dynamic_routing(
            g,
            u_hat,
            self.config.routing_iters,
            self.config.routing_gradient,
            trace,
        )?;
        g.reshape(routed.v, [self.shapes.flat])
    }

    /// Pre-activation values of the first convolution, used to keep
    /// finite-difference probes away from ReLU kinks.
    pub fn conv1_preactivation<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        frame: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(frame.clone());
        let w = g.constant(store.get(self.conv1_w).value.clone());
        let b = g.constant(store.get(self.conv1_b).value.clone());
        let y = g.conv2d(x, w, self.config.conv1.stride, Padding::Valid)?;
        let y = g.add_bias(y, b)?;
        Ok(g.value(y).clone())
    }
}
