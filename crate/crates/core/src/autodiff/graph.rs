//! Tape of recorded tensor operations and the reverse sweep over it.
//!
//! Every op appends a node holding its output value and enough of its inputs
//! to run the backward rule. Nodes are created in topological order, so
//! [`Graph::backward`] is a single reverse pass over the node list.

use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::shape::{conv_axis, pool_axis, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: (usize, usize),
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Squash(Var),
    CapsulePredict {
        capsules: Var,
        transforms: Var,
    },
    RouteSum {
        coupling: Var,
        predictions: Var,
    },
    RouteAgree {
        predictions: Var,
        outputs: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Norm floor used by the squash backward rule.
pub const SQUASH_NORM_FLOOR: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).value.clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Binds every parameter of `store`; entry `i` is the node of the
    /// parameter with index `i`.
    pub fn bind_all(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store.iter().map(|(id, _)| self.param(store, id)).collect()
    }

    /// A constant copy of `v`'s current value; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of every bound parameter reached by backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    // ----- elementwise -----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        let out = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Adds `bias` (length `C`) along the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "bias {:?} does not match trailing extent {c}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("batched matmul {sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (x, y) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_acc(
                &x[i * m * k..(i + 1) * m * k],
                &y[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    // ----- spatial -----

    /// `input[H,W,Cin] * kernel[k,k,Cin,Cout] -> [H',W',Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[0] != sk[1] || sk[2] != si[2] {
            return Err(Error::shape(format!("conv2d input {si:?} kernel {sk:?}")));
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (k, cout) = (sk[0], sk[3]);
        let (ho, pt) = conv_axis(h, k, stride, padding)?;
        let (wo, pl) = conv_axis(w, k, stride, padding)?;
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let mut out = vec![T::zero(); ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let obase = (oy * wo + ox) * cout;
                for ky in 0..k {
                    let Some(iy) = (oy * stride + ky).checked_sub(pt).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox * stride + kx).checked_sub(pl).filter(|&v| v < w)
                        else {
                            continue;
                        };
                        let ibase = (iy * w + ix) * cin;
                        let kbase = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[ibase + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            let orow = &mut out[obase..obase + cout];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o = *o + xv * kv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            Tensor::new([ho, wo, cout], out)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad: (pt, pl),
            },
            rg,
        ))
    }

    /// Max pooling over `[H,W,C]` with a square window.
    pub fn maxpool2d(
        &mut self,
        input: Var,
        window: usize,
        stride: usize,
        ceil_mode: bool,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 {
            return Err(Error::shape(format!("maxpool2d input {si:?}")));
        }
        let (h, w, c) = (si[0], si[1], si[2]);
        let ho = pool_axis(h, window, stride, ceil_mode)?;
        let wo = pool_axis(w, window, stride, ceil_mode)?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); ho * wo * c];
        let mut argmax = vec![0usize; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for iy in oy * stride..(oy * stride + window).min(h) {
                        for ix in ox * stride..(ox * stride + window).min(w) {
                            let idx = (iy * w + ix) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new([ho, wo, c], out)?,
            Op::MaxPool { input, argmax },
            rg,
        ))
    }

    // ----- reductions and reshaping -----

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * dim * inner + j * inner + i;
                let m = (0..dim).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..dim {
                    let e = (x[at(j)] - m).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..dim {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input, axis }, rg))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Dropout { input, mask }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    /// Flattens and concatenates into one rank-1 tensor.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let data: Vec<T> = inputs
            .iter()
            .flat_map(|&v| self.value(v).data().iter().copied())
            .collect();
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_vec(data), Op::Concat(inputs.to_vec()), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s: T = x.data().iter().copied().sum();
        let m = s / T::from_f64(x.len() as f64);
        let rg = self.rg(input);
        self.push(Tensor::scalar(m), Op::Mean(input), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let d = self.sub(prediction, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ----- capsule primitives -----

    /// Squash each vector along the trailing axis:
    /// `v = s * |s| / (1 + |s|^2)`.
    pub fn squash(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let d = *x.shape().last().unwrap();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n2: T = row.iter().map(|&v| v * v).sum();
            let g = n2.sqrt() / (T::one() + n2);
            for v in row.iter_mut() {
                *v = *v * g;
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::Squash(input), rg)
    }

    /// Prediction vectors `u_hat[i,j,:] = u[i,:] · W[i,j,:,:]` for
    /// `u[N,dp]`, `W[N,p,dp,da]`, giving `[N,p,da]`.
    pub fn capsule_predict(&mut self, capsules: Var, transforms: Var) -> Result<Var> {
        let (su, sw) = (self.shape(capsules), self.shape(transforms));
        if su.len() != 2 || sw.len() != 4 || su[0] != sw[0] || su[1] != sw[2] {
            return Err(Error::shape(format!(
                "capsule prediction u {su:?} W {sw:?}"
            )));
        }
        let (n, p, dp, da) = (sw[0], sw[1], sw[2], sw[3]);
        let u = self.value(capsules).data();
        let w = self.value(transforms).data();
        let mut out = vec![T::zero(); n * p * da];
        for i in 0..n {
            for j in 0..p {
                let orow = &mut out[(i * p + j) * da..(i * p + j + 1) * da];
                for m in 0..dp {
                    let um = u[i * dp + m];
                    let wrow = &w[((i * p + j) * dp + m) * da..][..da];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o = *o + um * wv;
                    }
                }
            }
        }
        let rg = self.rg(capsules) || self.rg(transforms);
        Ok(self.push(
            Tensor::new([n, p, da], out)?,
            Op::CapsulePredict {
                capsules,
                transforms,
            },
            rg,
        ))
    }

    /// Coupling-weighted sum `s[j,:] = sum_i c[i,j] u_hat[i,j,:]`.
    pub fn route_sum(&mut self, coupling: Var, predictions: Var) -> Result<Var> {
        let (sc, su) = (self.shape(coupling), self.shape(predictions));
        if sc.len() != 2 || su.len() != 3 || sc[0] != su[0] || sc[1] != su[1] {
            return Err(Error::shape(format!(
                "routing sum c {sc:?} u_hat {su:?}"
            )));
        }
        let (n, p, da) = (su[0], su[1], su[2]);
        let c = self.value(coupling).data();
        let u = self.value(predictions).data();
        let mut out = vec![T::zero(); p * da];
        for i in 0..n {
            for j in 0..p {
                let cij = c[i * p + j];
                let urow = &u[(i * p + j) * da..][..da];
                for (o, &uv) in out[j * da..(j + 1) * da].iter_mut().zip(urow) {
                    *o = *o + cij * uv;
                }
            }
        }
        let rg = self.rg(coupling) || self.rg(predictions);
        Ok(self.push(
            Tensor::new([p, da], out)?,
            Op::RouteSum {
                coupling,
                predictions,
            },
            rg,
        ))
    }

    /// Agreement `a[i,j] = u_hat[i,j,:] · v[j,:]`.
    pub fn route_agree(&mut self, predictions: Var, outputs: Var) -> Result<Var> {
        let (su, sv) = (self.shape(predictions), self.shape(outputs));
        if su.len() != 3 || sv.len() != 2 || su[1] != sv[0] || su[2] != sv[1] {
            return Err(Error::shape(format!(
                "routing agreement u_hat {su:?} v {sv:?}"
            )));
        }
        let (n, p, da) = (su[0], su[1], su[2]);
        let u = self.value(predictions).data();
        let v = self.value(outputs).data();
        let mut out = vec![T::zero(); n * p];
        for i in 0..n {
            for j in 0..p {
                out[i * p + j] = dot(&u[(i * p + j) * da..][..da], &v[j * da..][..da]);
            }
        }
        let rg = self.rg(predictions) || self.rg(outputs);
        Ok(self.push(
            Tensor::new([n, p], out)?,
            Op::RouteAgree {
                predictions,
                outputs,
            },
            rg,
        ))
    }

    // ----- reverse sweep -----

    /// Propagates `d loss / d node` back to every leaf and adds the result
    /// into the leaves' gradient buffers. Calling it twice without
    /// [`Graph::zero_grad`] accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop(i, &g, &mut adj);
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if let Some(a) = a {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&a).for_each(|(x, &y)| *x = *x + y),
                    None => node.grad = Some(a),
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = self.nodes[i].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * y[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * x[k];
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *f)
            }),
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let c = val(*b).len();
                acc(*b, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] = d[k] + g[k] * out[k] * (T::one() - out[k]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] = d[k] + g[k] * (T::one() - out[k] * out[k]);
                }
            }),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if x[k] > T::zero() {
                            d[k] = d[k] + g[k];
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (x, y) = (val(*a), val(*b));
                acc(*a, &mut |d| gemm_nt_acc(g, y, d, m, n, k));
                acc(*b, &mut |d| gemm_tn_acc(x, g, d, k, m, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (x, y) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for t in 0..bs {
                        gemm_nt_acc(
                            &g[t * m * n..][..m * n],
                            &y[t * k * n..][..k * n],
                            &mut d[t * m * k..][..m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for t in 0..bs {
                        gemm_tn_acc(
                            &x[t * m * k..][..m * k],
                            &g[t * m * n..][..m * n],
                            &mut d[t * k * n..][..k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let si = self.nodes[input.0].value.shape();
                let sk = self.nodes[kernel.0].value.shape();
                let so = self.nodes[i].value.shape();
                let (h, w, cin) = (si[0], si[1], si[2]);
                let (k, cout) = (sk[0], sk[3]);
                let (ho, wo) = (so[0], so[1]);
                let (x, kd) = (val(*input), val(*kernel));
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let obase = (oy * wo + ox) * cout;
                            for ky in 0..k {
                                let Some(iy) =
                                    (oy * stride + ky).checked_sub(pad.0).filter(|&v| v < h)
                                else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ix) =
                                        (ox * stride + kx).checked_sub(pad.1).filter(|&v| v < w)
                                    else {
                                        continue;
                                    };
                                    f(obase, (iy * w + ix) * cin, (ky * k + kx) * cin * cout);
                                }
                            }
                        }
                    }
                };
                acc(*input, &mut |d| {
                    taps(&mut |obase, ibase, kbase| {
                        let grow = &g[obase..obase + cout];
                        for ci in 0..cin {
                            let krow = &kd[kbase + ci * cout..][..cout];
                            d[ibase + ci] = d[ibase + ci] + dot(grow, krow);
                        }
                    })
                });
                acc(*kernel, &mut |d| {
                    taps(&mut |obase, ibase, kbase| {
                        let grow = &g[obase..obase + cout];
                        for ci in 0..cin {
                            let xv = x[ibase + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            let drow = &mut d[kbase + ci * cout..][..cout];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv = *dv + xv * gv;
                            }
                        }
                    })
                });
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |d| {
                for (o, &at) in argmax.iter().enumerate() {
                    d[at] = d[at] + g[o];
                }
            }),
            Op::Softmax { input, axis } => {
                let (outer, dim, inner) = axis_split(self.nodes[i].value.shape(), *axis);
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * dim * inner + j * inner + ii;
                            let s: T = (0..dim).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..dim {
                                d[at(j)] = d[at(j)] + out[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                })
            }
            Op::Dropout { input, mask } => acc(*input, &mut |d| {
                for k in 0..d.len() {
                    d[k] = d[k] + g[k] * mask[k];
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[at..at + n]));
                    at += n;
                }
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x = *x + g[0])),
            Op::Mean(a) => {
                let scale = g[0] / T::from_f64(self.nodes[a.0].value.len() as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x = *x + scale))
            }
            Op::Squash(a) => {
                let x = val(*a);
                let dim = *self.nodes[a.0].value.shape().last().unwrap();
                acc(*a, &mut |d| squash_backward(x, g, d, dim));
            }
            Op::CapsulePredict {
                capsules,
                transforms,
            } => {
                let sw = self.nodes[transforms.0].value.shape();
                let (n, p, dp, da) = (sw[0], sw[1], sw[2], sw[3]);
                let (u, w) = (val(*capsules), val(*transforms));
                acc(*capsules, &mut |d| {
                    for ii in 0..n {
                        for j in 0..p {
                            let grow = &g[(ii * p + j) * da..][..da];
                            for m in 0..dp {
                                let wrow = &w[((ii * p + j) * dp + m) * da..][..da];
                                d[ii * dp + m] = d[ii * dp + m] + dot(grow, wrow);
                            }
                        }
                    }
                });
                acc(*transforms, &mut |d| {
                    for ii in 0..n {
                        for j in 0..p {
                            let grow = &g[(ii * p + j) * da..][..da];
                            for m in 0..dp {
                                let um = u[ii * dp + m];
                                let drow = &mut d[((ii * p + j) * dp + m) * da..][..da];
                                for (dv, &gv) in drow.iter_mut().zip(grow) {
                                    *dv = *dv + um * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::RouteSum {
                coupling,
                predictions,
            } => {
                let su = self.nodes[predictions.0].value.shape();
                let (n, p, da) = (su[0], su[1], su[2]);
                let (c, u) = (val(*coupling), val(*predictions));
                acc(*coupling, &mut |d| {
                    for ii in 0..n {
                        for j in 0..p {
                            d[ii * p + j] =
                                d[ii * p + j] + dot(&g[j * da..][..da], &u[(ii * p + j) * da..][..da]);
                        }
                    }
                });
                acc(*predictions, &mut |d| {
                    for ii in 0..n {
                        for j in 0..p {
                            let cij = c[ii * p + j];
                            let drow = &mut d[(ii * p + j) * da..][..da];
                            for (dv, &gv) in drow.iter_mut().zip(&g[j * da..][..da]) {
                                *dv = *dv + cij * gv;
                            }
                        }
                    }
                });
            }
            Op::RouteAgree {
                predictions,
                outputs,
            } => {
                let su = self.nodes[predictions.0].value.shape();
                let (n, p, da) = (su[0], su[1], su[2]);
                let (u, v) = (val(*predictions), val(*outputs));
                acc(*predictions, &mut |d| {
                    for ii in 0..n {
                        for j in 0..p {
                            let gij = g[ii * p + j];
                            let drow = &mut d[(ii * p + j) * da..][..da];
                            for (dv, &vv) in drow.iter_mut().zip(&v[j * da..][..da]) {
                                *dv = *dv + gij * vv;
                            }
                        }
                    }
                });
                acc(*outputs, &mut |d| {
                    for ii in 0..n {
                        for j in 0..p {
                            let gij = g[ii * p + j];
                            let drow = &mut d[j * da..][..da];
                            for (dv, &uv) in drow.iter_mut().zip(&u[(ii * p + j) * da..][..da]) {
                                *dv = *dv + gij * uv;
                            }
                        }
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m,n] += a[m,k] b[k,n]`
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `d[m,k] += g[m,n] b[k,n]^T`
fn gemm_nt_acc<T: Scalar>(g: &[T], b: &[T], d: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            d[i * k + p] = d[i * k + p] + dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `d[k,n] += a[m,k]^T g[m,n]`
fn gemm_tn_acc<T: Scalar>(a: &[T], g: &[T], d: &mut [T], k: usize, m: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (dv, &gv) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *dv = *dv + av * gv;
            }
        }
    }
}

/// With `q = |s|`, `v = s f(q)`, `f(q) = q / (1 + q^2)`:
/// `ds = f g + (s·g) f'(q) / q · s`, `f'(q) = (1 - q^2) / (1 + q^2)^2`.
fn squash_backward<T: Scalar>(x: &[T], g: &[T], d: &mut [T], dim: usize) {
    let floor = T::from_f64(SQUASH_NORM_FLOOR);
    for ((s, gr), dr) in x.chunks(dim).zip(g.chunks(dim)).zip(d.chunks_mut(dim)) {
        let q2: T = s.iter().map(|&v| v * v).sum();
        let q = q2.sqrt();
        let one = T::one();
        let f = q / (one + q2);
        let fprime = (one - q2) / ((one + q2) * (one + q2));
        let sg = dot(s, gr);
        let coef = if q > floor { sg * fprime / q } else { T::zero() };
        for k in 0..dim {
            dr[k] = dr[k] + f * gr[k] + coef * s[k];
        }
    }
}
