#![allow(dead_code)]

use dsgd_lab::datagen::{fresh_swap_value, partition, sample, MixtureSpec};
use dsgd_lab::engine::{run_paired, DsgdConfig, FederatedDataset, Stepsize, Swap, Variant};
use dsgd_lab::losses::{DataPoint, LossModel};
use dsgd_lab::rng::{derive_seed, Stream};
use dsgd_lab::topology::MixingMatrix;

pub fn dataset(m: usize, n: usize, seed: u64) -> FederatedDataset {
    partition(sample(&MixtureSpec::default(), m * n, seed), m, n).unwrap()
}

pub fn gradient_map(loss: &LossModel, eta: f64, z: &DataPoint, theta: &[f64]) -> Vec<f64> {
    let g = loss.grad(theta, z);
    theta.iter().zip(&g).map(|(t, g)| t - eta * g).collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Uniform point in the `d`-ball of radius `r`.
pub fn in_ball(stream: &mut Stream, d: usize, r: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    stream.fill_normal(&mut v);
    let norm = dist(&v, &vec![0.0; d]).max(1e-300);
    let scale = r * stream.unit().powf(1.0 / d as f64) / norm;
    v.iter().map(|x| x * scale).collect()
}

/// Expansivity regimes: `(loss, modulus(eta, beta, mu), max admissible eta)`.
#[derive(Clone, Copy, Debug)]
pub enum Regime {
    NonConvex,
    Convex,
    Strongly,
}

/// Worst violation `|G(a) - G(b)| - nu |a - b|` over `pairs` random draws.
pub fn expansivity_violation(regime: Regime, pairs: usize, seed: u64) -> f64 {
    let spec = MixtureSpec::default();
    let mut stream = Stream::new(seed);
    let mu = 0.5;
    let mut worst = f64::NEG_INFINITY;
    for k in 0..pairs {
        let z = fresh_swap_value(&spec, derive_seed(seed, &[k as u64]));
        let xx = z.x.iter().map(|v| v * v).sum::<f64>();
        let (loss, a, b, eta, nu) = match regime {
            Regime::NonConvex => {
                let loss = LossModel::bounded_nonconvex();
                let beta = xx;
                let eta = 3.0 * stream.unit();
                let a = in_ball(&mut stream, 2, 4.0);
                let b = in_ball(&mut stream, 2, 4.0);
                (loss, a, b, eta, 1.0 + eta * beta)
            }
            Regime::Convex => {
                let loss = LossModel::logistic();
                let beta = xx / 4.0;
                let eta = 2.0 / beta * stream.unit();
                let a = in_ball(&mut stream, 2, 6.0);
                let b = in_ball(&mut stream, 2, 6.0);
                (loss, a, b, eta, 1.0)
            }
            Regime::Strongly => {
                let loss = LossModel::ridge(mu, 10.0).unwrap();
                let beta = xx + mu;
                let eta = 2.0 / (beta + mu) * stream.unit();
                let a = in_ball(&mut stream, 2, 10.0);
                let b = in_ball(&mut stream, 2, 10.0);
                (loss, a, b, eta, 1.0 - eta * beta * mu / (beta + mu))
            }
        };
        let lhs = dist(&gradient_map(&loss, eta, &z, &a), &gradient_map(&loss, eta, &z, &b));
        worst = worst.max(lhs - nu * dist(&a, &b));
    }
    worst
}

/// Largest violation of the coordinate-wise recursion
/// `delta^{t+1} <= W delta^t + 2 eta_t L 1{I_j^t = i} e_j` on one coupled
/// Variant-B run. Returns `(violation, admissible)` where `L` and `beta` are the
/// logistic constants of the dataset plus the replacement point.
pub fn recursion_violation(w: &MixingMatrix, n: usize, iterations: usize, eta: f64, seed: u64) -> (f64, bool) {
    let m = w.size();
    let data = dataset(m, n, seed);
    let mut stream = Stream::new(derive_seed(seed, &[1]));
    let (i, j) = (stream.index(n), stream.index(m));
    let value = fresh_swap_value(&MixtureSpec::default(), derive_seed(seed, &[2]));
    let loss = LossModel::logistic();
    let mut points = data.flatten();
    points.push(value.clone());
    let c = loss.constants(&points);
    let admissible = eta <= 2.0 * w.min_diag() / c.smoothness;
    let config = DsgdConfig::new(Variant::B, iterations, Stepsize::Constant(eta), seed);
    let paired = run_paired(w, &loss, &data, &Swap { i, j, value }, &config).unwrap();
    let schedule = &paired.original.schedule;
    let mut worst = f64::NEG_INFINITY;
    for t in 0..iterations {
        let prev = &paired.delta_trace[t];
        let next = &paired.delta_trace[t + 1];
        for k in 0..m {
            let mut rhs: f64 = (0..m).map(|l| w.get(k, l) * prev[l]).sum();
            if k == j && schedule.index(t, j) == i {
                rhs += 2.0 * eta * c.lipschitz;
            }
            worst = worst.max(next[k] - rhs);
        }
    }
    (worst, admissible)
}
