//! Gradient checks for every primitive op on small random points.

use rand::Rng;

use super::gradcheck::{grad_check, DEFAULT_STEP};
use super::graph::{Graph, Var};
use super::shape::Padding;
use crate::error::Result;
use crate::rng::substream;
use crate::tensor::Tensor;

pub type CaseFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// One op wrapped in a scalar-valued function of its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: CaseFn,
}

pub fn op_cases() -> Vec<OpCase> {
    let cases: Vec<(&'static str, Vec<Vec<usize>>, CaseFn)> = vec![
        ("add", vec![vec![3, 2], vec![3, 2]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("sub", vec![vec![3, 2], vec![3, 2]], |g, v| {
            let a = g.sub(v[0], v[1])?;
            let t = g.mul(a, a)?;
            Ok(g.sum(t))
        }),
        ("hadamard", vec![vec![5], vec![5]], |g, v| {
            let a = g.mul(v[0], v[1])?;
            let t = g.sigmoid(a);
            Ok(g.sum(t))
        }),
        ("tanh", vec![vec![2, 3]], |g, v| {
            let t = g.tanh(v[0]);
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        }),
        ("sum_mean", vec![vec![4, 3]], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let m = g.mean(sq);
            let s = g.sum(v[0]);
            let ms = g.mul(m, s)?;
            Ok(g.sum(ms))
        }),
        ("scale", vec![vec![4]], |g, v| {
            let a = g.scale(v[0], -1.7);
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, v| {
            let a = g.add_bias(v[0], v[1])?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("sigmoid", vec![vec![6]], |g, v| {
            let a = g.sigmoid(v[0]);
            let t = g.mul(a, a)?;
            Ok(g.sum(t))
        }),
        ("relu", vec![vec![6]], |g, v| {
            let a = g.relu(v[0]);
            let t = g.mul(a, a)?;
            Ok(g.sum(t))
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let a = g.matmul(v[0], v[1])?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("batch_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| {
            let a = g.batch_matmul(v[0], v[1])?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("conv2d_valid", vec![vec![7, 6, 2], vec![3, 3, 2, 3]], |g, v| {
            let a = g.conv2d(v[0], v[1], 2, Padding::Valid)?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("conv2d_same", vec![vec![5, 5, 2], vec![3, 3, 2, 2]], |g, v| {
            let a = g.conv2d(v[0], v[1], 2, Padding::Same)?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("maxpool2d", vec![vec![5, 5, 2]], |g, v| {
            let a = g.maxpool2d(v[0], 2, 2, true)?;
            let t = g.mul(a, a)?;
            Ok(g.sum(t))
        }),
        ("softmax", vec![vec![3, 4]], |g, v| {
            let a = g.softmax(v[0], 1)?;
            let w = g.constant(Tensor::from_fn([3, 4], |i| (i as f64 * 0.7).sin()));
            let t = g.mul(a, w)?;
            Ok(g.sum(t))
        }),
        ("reshape_concat", vec![vec![2, 3], vec![4]], |g, v| {
            let a = g.reshape(v[0], [6])?;
            let c = g.concat(&[a, v[1]])?;
            let t = g.tanh(c);
            let t = g.mul(t, t)?;
            Ok(g.mean(t))
        }),
        ("squash", vec![vec![4, 3]], |g, v| {
            let a = g.squash(v[0]);
            let w = g.constant(Tensor::from_fn([4, 3], |i| (i as f64).cos()));
            let t = g.mul(a, w)?;
            Ok(g.sum(t))
        }),
        ("capsule_predict", vec![vec![3, 2], vec![3, 2, 2, 3]], |g, v| {
            let a = g.capsule_predict(v[0], v[1])?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("route_sum", vec![vec![3, 2], vec![3, 2, 4]], |g, v| {
            let a = g.route_sum(v[0], v[1])?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("route_agree", vec![vec![3, 2, 4], vec![2, 4]], |g, v| {
            let a = g.route_agree(v[0], v[1])?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("dropout", vec![vec![8]], |g, v| {
            // a fixed stream gives every evaluation the same mask
            let mut r = substream(0, "gradcheck.dropout");
            let a = g.dropout(v[0], 0.3, true, &mut r)?;
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("mse", vec![vec![5], vec![5]], |g, v| g.mse(v[0], v[1])),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, f)| OpCase { name, shapes, f })
        .collect()
}

impl OpCase {
    /// A uniform point in `[-1, 1]`, nudged off the ReLU kink and away from
    /// pooling ties where the function is not differentiable.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor<f64>> {
        let mut point: Vec<Tensor<f64>> = self
            .shapes
            .iter()
            .map(|s| Tensor::uniform(s.clone(), 1.0, rng))
            .collect();
        match self.name {
            "relu" => point[0] = point[0].map(|v| v.signum() * (0.05 + v.abs())),
            "maxpool2d" => {
                let n = point[0].len();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| point[0].data()[a].total_cmp(&point[0].data()[b]));
                let mut spread = point[0].clone();
                for (rank, &at) in order.iter().enumerate() {
                    spread.data_mut()[at] = -1.0 + 0.02 * rank as f64;
                }
                point[0] = spread;
            }
            _ => {}
        }
        point
    }
}

/// Worst relative error of each op over `points` random points.
pub fn check_ops(points: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = substream(seed, "gradcheck.points");
    op_cases()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for _ in 0..points {
                let point = case.sample_point(&mut rng);
                worst = worst.max(grad_check(case.f, &point, DEFAULT_STEP)?.max_rel_error);
            }
            Ok((case.name, worst))
        })
        .collect()
}
