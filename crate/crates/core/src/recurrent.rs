//! Standard and nested LSTM cells over row vectors `[1, D]`.
//!
//! The nested cell replaces the outer memory update with an inner LSTM:
//! the inner input is `i ⊙ tanh(candidate)`, the inner previous hidden is
//! `f ⊙ c_prev`, and the outer memory becomes the inner hidden state.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One affine gate `x·Wx + h·Wh + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gate {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

/// Gate order used everywhere: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["i", "f", "o", "c"];

fn add_gates<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> [Gate; 4] {
    GATES.map(|name| {
        let wx = store.add(
            format!("{prefix}.wx_{name}"),
            Tensor::glorot([input, hidden], input, hidden, rng),
        );
        let wh = store.add(
            format!("{prefix}.wh_{name}"),
            Tensor::glorot([hidden, hidden], hidden, hidden, rng),
        );
        let bias = if name == "f" { T::one() } else { T::zero() };
        let b = store.add(format!("{prefix}.b_{name}"), Tensor::full([hidden], bias));
        Gate { wx, wh, b }
    })
}

fn gate_pre<T: Scalar>(g: &mut Graph<T>, p: &[Var], gate: &Gate, x: Var, h: Var) -> Result<Var> {
    let a = g.matmul(x, p[gate.wx.index()])?;
    let b = g.matmul(h, p[gate.wh.index()])?;
    let s = g.add(a, b)?;
    g.add_bias(s, p[gate.b.index()])
}

/// `4·((D + Hd)·Hd + Hd)`.
pub fn lstm_param_count(input: usize, hidden: usize) -> u64 {
    4 * ((input + hidden) * hidden + hidden) as u64
}

/// Outer LSTM on `D` plus inner LSTM on `Hd`.
pub fn nlstm_param_count(input: usize, hidden: usize) -> u64 {
    lstm_param_count(input, hidden) + lstm_param_count(hidden, hidden)
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NlstmState {
    pub h: Var,
    /// Inner hidden state, which is also the outer memory `c`.
    pub inner_h: Var,
    pub inner_c: Var,
}

/// A recurrent cell that can be unrolled over a sequence of `[1, D]` rows.
pub trait Recurrent {
    type State: Copy;

    fn input_dim(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn zero_state<T: Scalar>(&self, g: &mut Graph<T>) -> Self::State;
    fn hidden(state: &Self::State) -> Var;
    fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        x: Var,
        state: Self::State,
    ) -> Result<Self::State>;

    /// Runs the cell from a zero state; returns the final hidden state and
    /// every hidden state in order.
    fn unroll<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        xs: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        if xs.is_empty() {
            return Err(Error::Contract("unroll over an empty sequence".into()));
        }
        let mut state = self.zero_state(g);
        let mut trace = Vec::with_capacity(xs.len());
        for (t, &x) in xs.iter().enumerate() {
            state = self.step(g, params, x, state)?;
            let h = Self::hidden(&state);
            if !g.value(h).all_finite() {
                return Err(Error::numeric(format!("recurrent step {t}")));
            }
            trace.push(h);
        }
        Ok((*trace.last().unwrap(), trace))
    }
}

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, dim: usize) -> Result<()> {
    if g.shape(x) != [1, dim] {
        return Err(Error::shape(format!(
            "recurrent input {:?}, expected [1, {dim}]",
            g.shape(x)
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    pub gates: [Gate; 4],
}

impl LstmCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        LstmCell {
            input,
            hidden,
            gates: add_gates(store, prefix, input, hidden, rng),
        }
    }
}

impl Recurrent for LstmCell {
    type State = LstmState;

    fn input_dim(&self) -> usize {
        self.input
    }

    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn zero_state<T: Scalar>(&self, g: &mut Graph<T>) -> LstmState {
        LstmState {
            h: g.constant(Tensor::zeros([1, self.hidden])),
            c: g.constant(Tensor::zeros([1, self.hidden])),
        }
    }

    fn hidden(state: &LstmState) -> Var {
        state.h
    }

    fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        s: LstmState,
    ) -> Result<LstmState> {
        check_input(g, x, self.input)?;
        let [gi, gf, go, gc] = &self.gates;
        let i = gate_pre(g, p, gi, x, s.h)?;
        let i = g.sigmoid(i);
        let f = gate_pre(g, p, gf, x, s.h)?;
        let f = g.sigmoid(f);
        let o = gate_pre(g, p, go, x, s.h)?;
        let o = g.sigmoid(o);
        let cand = gate_pre(g, p, gc, x, s.h)?;
        let cand = g.tanh(cand);
        let keep = g.mul(f, s.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlstmCell {
    pub input: usize,
    pub hidden: usize,
    pub outer: [Gate; 4],
    pub inner: [Gate; 4],
}

impl NlstmCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let outer = add_gates(store, &format!("{prefix}.outer"), input, hidden, rng);
        let inner = add_gates(store, &format!("{prefix}.inner"), hidden, hidden, rng);
        NlstmCell {
            input,
            hidden,
            outer,
            inner,
        }
    }
}

impl Recurrent for NlstmCell {
    type State = NlstmState;

    fn input_dim(&self) -> usize {
        self.input
    }

    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn zero_state<T: Scalar>(&self, g: &mut Graph<T>) -> NlstmState {
        NlstmState {
            h: g.constant(Tensor::zeros([1, self.hidden])),
            inner_h: g.constant(Tensor::zeros([1, self.hidden])),
            inner_c: g.constant(Tensor::zeros([1, self.hidden])),
        }
    }

    fn hidden(state: &NlstmState) -> Var {
        state.h
    }

    fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        s: NlstmState,
    ) -> Result<NlstmState> {
        check_input(g, x, self.input)?;
        let [oi, of, oo, oc] = &self.outer;
        let i = gate_pre(g, p, oi, x, s.h)?;
        let i = g.sigmoid(i);
        let f = gate_pre(g, p, of, x, s.h)?;
        let f = g.sigmoid(f);
        let o = gate_pre(g, p, oo, x, s.h)?;
        let o = g.sigmoid(o);
        let cand = gate_pre(g, p, oc, x, s.h)?;
        let cand = g.tanh(cand);
        let x_in = g.mul(i, cand)?;
        let h_in = g.mul(f, s.inner_h)?;

        let [ii, if_, io, ic] = &self.inner;
        let ti = gate_pre(g, p, ii, x_in, h_in)?;
        let ti = g.sigmoid(ti);
        let tf = gate_pre(g, p, if_, x_in, h_in)?;
        let tf = g.sigmoid(tf);
        let to = gate_pre(g, p, io, x_in, h_in)?;
        let to = g.sigmoid(to);
        let tcand = gate_pre(g, p, ic, x_in, h_in)?;
        let tcand = g.tanh(tcand);
        let keep = g.mul(tf, s.inner_c)?;
        let write = g.mul(ti, tcand)?;
        let inner_c = g.add(keep, write)?;
        let t = g.tanh(inner_c);
        let inner_h = g.mul(to, t)?;

        let t = g.tanh(inner_h);
        let h = g.mul(o, t)?;
        Ok(NlstmState {
            h,
            inner_h,
            inner_c,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, DEFAULT_STEP};
    use crate::rng::substream;
    use rand::Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Reads gate `(Wx, Wh, b)` from the store as nested vectors.
    fn gate_of(store: &ParamStore<f64>, gate: &Gate) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let m = |id: ParamId| {
            let t = &store.get(id).value;
            let (r, c) = (t.shape()[0], t.shape()[1]);
            (0..r).map(|a| (0..c).map(|b| t.get(&[a, b])).collect()).collect()
        };
        (m(gate.wx), m(gate.wh), store.get(gate.b).value.data().to_vec())
    }

    fn affine(
        (wx, wh, b): &(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>),
        x: &[f64],
        h: &[f64],
    ) -> Vec<f64> {
        (0..b.len())
            .map(|j| {
                let mut s = b[j];
                for (k, xk) in x.iter().enumerate() {
                    s += xk * wx[k][j];
                }
                for (k, hk) in h.iter().enumerate() {
                    s += hk * wh[k][j];
                }
                s
            })
            .collect()
    }

    /// Standard LSTM update, element by element. Returns `(h, c)`.
    fn oracle_lstm(
        store: &ParamStore<f64>,
        gates: &[Gate; 4],
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let pre: Vec<Vec<f64>> = gates.iter().map(|gt| affine(&gate_of(store, gt), x, h)).collect();
        let n = c.len();
        let mut c_new = vec![0.0; n];
        let mut h_new = vec![0.0; n];
        for j in 0..n {
            let (i, f, o) = (sig(pre[0][j]), sig(pre[1][j]), sig(pre[2][j]));
            c_new[j] = f * c[j] + i * pre[3][j].tanh();
            h_new[j] = o * c_new[j].tanh();
        }
        (h_new, c_new)
    }

    /// Nested step transcribed equation by equation. State is
    /// `(h, inner_h, inner_c)`.
    fn oracle_nlstm(
        store: &ParamStore<f64>,
        cell: &NlstmCell,
        x: &[f64],
        state: (&[f64], &[f64], &[f64]),
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (h, c_prev, inner_c) = state;
        let n = h.len();
        let pre: Vec<Vec<f64>> = cell
            .outer
            .iter()
            .map(|gt| affine(&gate_of(store, gt), x, h))
            .collect();
        let mut x_in = vec![0.0; n];
        let mut h_in = vec![0.0; n];
        let mut o = vec![0.0; n];
        for j in 0..n {
            let i = sig(pre[0][j]);
            let f = sig(pre[1][j]);
            o[j] = sig(pre[2][j]);
            x_in[j] = i * pre[3][j].tanh();
            h_in[j] = f * c_prev[j];
        }
        let (inner_h, inner_c) = oracle_lstm(store, &cell.inner, &x_in, &h_in, inner_c);
        let h_new = (0..n).map(|j| o[j] * inner_h[j].tanh()).collect();
        (h_new, inner_h, inner_c)
    }

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn row(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::new([1, v.len()], v.to_vec()).unwrap())
    }

    fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
        for p in store.iter_mut() {
            if p.name.contains(".b_") {
                p.value = Tensor::uniform(p.value.shape().to_vec(), 0.5, rng);
            }
        }
    }

    #[test]
    fn nlstm_step_matches_scalar_oracle() {
        let mut rng = substream(11, "test.nlstm");
        for _ in 0..50 {
            let (d, hd) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let mut store = ParamStore::new();
            let cell = NlstmCell::new(&mut store, "n", d, hd, &mut rng);
            randomize_biases(&mut store, &mut rng);
            let x = rand_vec(d, &mut rng);
            let (h, ih, ic) = (rand_vec(hd, &mut rng), rand_vec(hd, &mut rng), rand_vec(hd, &mut rng));
            let mut g = Graph::new();
            let p = g.bind_all(&store);
            let state = NlstmState {
                h: row(&mut g, &h),
                inner_h: row(&mut g, &ih),
                inner_c: row(&mut g, &ic),
            };
            let xv = row(&mut g, &x);
            let out = cell.step(&mut g, &p, xv, state).unwrap();
            let (oh, oih, oic) = oracle_nlstm(&store, &cell, &x, (&h, &ih, &ic));
            for (var, want) in [(out.h, oh), (out.inner_h, oih), (out.inner_c, oic)] {
                for (a, b) in g.value(var).data().iter().zip(&want) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn lstm_step_matches_scalar_oracle() {
        let mut rng = substream(12, "test.lstm");
        for _ in 0..50 {
            let (d, hd) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let mut store = ParamStore::new();
            let cell = LstmCell::new(&mut store, "l", d, hd, &mut rng);
            randomize_biases(&mut store, &mut rng);
            let (x, h, c) = (rand_vec(d, &mut rng), rand_vec(hd, &mut rng), rand_vec(hd, &mut rng));
            let mut g = Graph::new();
            let p = g.bind_all(&store);
            let state = LstmState {
                h: row(&mut g, &h),
                c: row(&mut g, &c),
            };
            let xv = row(&mut g, &x);
            let out = cell.step(&mut g, &p, xv, state).unwrap();
            let (oh, oc) = oracle_lstm(&store, &cell.gates, &x, &h, &c);
            for (var, want) in [(out.h, oh), (out.c, oc)] {
                for (a, b) in g.value(var).data().iter().zip(&want) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let mut rng = substream(13, "test.zero");
        let mut store = ParamStore::new();
        let n = NlstmCell::new(&mut store, "n", 3, 4, &mut rng);
        let l = LstmCell::new(&mut store, "l", 3, 4, &mut rng);
        zero_all(&mut store);
        let mut g = Graph::new();
        let p = g.bind_all(&store);
        let xs: Vec<Var> = (0..5).map(|_| row(&mut g, &rand_vec(3, &mut rng))).collect();
        let (hn, tn) = n.unroll(&mut g, &p, &xs).unwrap();
        let (hl, _) = l.unroll(&mut g, &p, &xs).unwrap();
        assert!(g.value(hn).data().iter().all(|&v| v == 0.0));
        assert!(g.value(hl).data().iter().all(|&v| v == 0.0));
        assert!(tn.iter().all(|&h| g.value(h).data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unroll_equals_manual_steps() {
        let mut rng = substream(14, "test.unroll");
        let mut store = ParamStore::new();
        let cell = NlstmCell::new(&mut store, "n", 16, 8, &mut rng);
        let mut g = Graph::new();
        let p = g.bind_all(&store);
        let xs: Vec<Var> = (0..4).map(|_| row(&mut g, &rand_vec(16, &mut rng))).collect();
        let (last, trace) = cell.unroll(&mut g, &p, &xs).unwrap();
        assert_eq!(trace.len(), 4);
        let mut s = cell.zero_state(&mut g);
        for (t, &x) in xs.iter().enumerate() {
            s = cell.step(&mut g, &p, x, s).unwrap();
            assert_eq!(g.value(s.h), g.value(trace[t]));
        }
        assert_eq!(g.value(s.h), g.value(last));
        let (one, _) = cell.unroll(&mut g, &p, &xs[..1]).unwrap();
        let z = cell.zero_state(&mut g);
        let single = cell.step(&mut g, &p, xs[0], z).unwrap();
        assert_eq!(g.value(one), g.value(single.h));
        assert!(cell.unroll::<f64>(&mut g, &p, &[]).is_err());
    }

    #[test]
    fn hidden_in_open_interval() {
        let mut rng = substream(15, "test.range");
        let mut store = ParamStore::new();
        let cell = NlstmCell::new(&mut store, "n", 5, 6, &mut rng);
        let mut g = Graph::new();
        let p = g.bind_all(&store);
        let xs: Vec<Var> = (0..10)
            .map(|_| {
                let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-5.0..5.0)).collect();
                row(&mut g, &v)
            })
            .collect();
        let (_, trace) = cell.unroll(&mut g, &p, &xs).unwrap();
        for h in trace {
            assert!(g.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(nlstm_param_count(480, 800), 9_222_400);
        assert_eq!(
            lstm_param_count(480, 800) + lstm_param_count(800, 800),
            9_222_400
        );
        assert_eq!(lstm_param_count(14_080, 800), 47_619_200);
        assert_eq!(lstm_param_count(800, 800), 5_123_200);
        let mut store = ParamStore::<f32>::new();
        NlstmCell::new(&mut store, "n", 7, 5, &mut substream(0, "x"));
        assert_eq!(store.count() as u64, nlstm_param_count(7, 5));
        let mut store = ParamStore::<f32>::new();
        LstmCell::new(&mut store, "l", 7, 5, &mut substream(0, "x"));
        assert_eq!(store.count() as u64, lstm_param_count(7, 5));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::<f64>::new();
        let cell = NlstmCell::new(&mut store, "n", 2, 3, &mut substream(0, "x"));
        for gates in [&cell.outer, &cell.inner] {
            assert!(store.get(gates[1].b).value.data().iter().all(|&b| b == 1.0));
            assert!(store.get(gates[0].b).value.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn nlstm_gradient_passes_check() {
        let mut rng = substream(16, "test.grad");
        let mut store = ParamStore::new();
        let cell = NlstmCell::new(&mut store, "n", 4, 8, &mut rng);
        randomize_biases(&mut store, &mut rng);
        let mut point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
        for _ in 0..3 {
            point.push(Tensor::uniform([1, 4], 1.0, &mut rng));
        }
        let np = store.len();
        let report = grad_check(
            |g, v| {
                let (h, _) = cell.unroll(g, &v[..np], &v[np..])?;
                let sq = g.mul(h, h)?;
                Ok(g.sum(sq))
            },
            &point,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn unroll_is_bitwise_deterministic() {
        let run = || {
            let mut rng = substream(17, "test.det");
            let mut store = ParamStore::<f32>::new();
            let cell = NlstmCell::new(&mut store, "n", 6, 5, &mut rng);
            let mut g = Graph::new();
            let p = g.bind_all(&store);
            let xs: Vec<Var> = (0..6)
                .map(|_| g.constant(Tensor::uniform([1, 6], 1.0, &mut rng)))
                .collect();
            let (h, _) = cell.unroll(&mut g, &p, &xs).unwrap();
            g.value(h).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
