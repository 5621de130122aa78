//! Loss models covering the convex, strongly convex and bounded non-convex regimes.
//!
//! Declared constants are computed per dataset by [`LossModel::constants`]: the
//! features are unbounded Gaussians, so global Lipschitz/smoothness constants do
//! not exist and the bounds are evaluated with the empirical maxima instead.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One labelled example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

impl DataPoint {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        DataPoint { x, y }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.x)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `log(1 + exp(a))` without overflow.
fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of the logistic model, `y` in `{0, 1}`.
pub fn logistic_value(theta: &[f64], z: &DataPoint) -> f64 {
    let s = dot(&z.x, theta);
    z.y * softplus(-s) + (1.0 - z.y) * softplus(s)
}

pub fn logistic_grad(theta: &[f64], z: &DataPoint, out: &mut [f64]) {
    let r = sigmoid(dot(&z.x, theta)) - z.y;
    for (o, x) in out.iter_mut().zip(&z.x) {
        *o = r * x;
    }
}

/// `0.5 (x.theta - y)^2 + 0.5 mu |theta|^2`.
pub fn ridge_value(theta: &[f64], z: &DataPoint, mu: f64) -> f64 {
    let r = dot(&z.x, theta) - z.y;
    0.5 * r * r + 0.5 * mu * dot(theta, theta)
}

pub fn ridge_grad(theta: &[f64], z: &DataPoint, mu: f64, out: &mut [f64]) {
    let r = dot(&z.x, theta) - z.y;
    for ((o, x), t) in out.iter_mut().zip(&z.x).zip(theta) {
        *o = r * x + mu * t;
    }
}

/// `1 - exp(-0.5 (x.theta - y)^2)`, valued in `[0, 1)`.
pub fn bounded_nonconvex_value(theta: &[f64], z: &DataPoint) -> f64 {
    let u = dot(&z.x, theta) - z.y;
    -(-0.5 * u * u).exp_m1()
}

pub fn bounded_nonconvex_grad(theta: &[f64], z: &DataPoint, out: &mut [f64]) {
    let u = dot(&z.x, theta) - z.y;
    let s = u * (-0.5 * u * u).exp();
    for (o, x) in out.iter_mut().zip(&z.x) {
        *o = s * x;
    }
}

/// Euclidean projection onto the centred ball of the given radius, in place.
pub fn project_ball_in_place(theta: &mut [f64], radius: f64) {
    let n = norm(theta);
    if n > radius {
        let scale = radius / n;
        theta.iter_mut().for_each(|t| *t *= scale);
    }
}

pub fn project_ball(theta: &[f64], radius: f64) -> Vec<f64> {
    let mut out = theta.to_vec();
    project_ball_in_place(&mut out, radius);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    Logistic,
    /// Squared error plus Tikhonov term `mu/2 |theta|^2`.
    Ridge { mu: f64 },
    BoundedNonconvex,
}

/// Convexity regime, which decides the applicable bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Convex,
    StronglyConvex,
    NonConvex,
}

/// Lipschitz, smoothness and (optional) strong convexity constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    pub lipschitz: f64,
    pub smoothness: f64,
    pub strong_convexity: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossModel {
    kind: LossKind,
    projection_radius: Option<f64>,
}

impl LossModel {
    pub fn logistic() -> Self {
        LossModel {
            kind: LossKind::Logistic,
            projection_radius: None,
        }
    }

    pub fn bounded_nonconvex() -> Self {
        LossModel {
            kind: LossKind::BoundedNonconvex,
            projection_radius: None,
        }
    }

    /// Ridge needs a projection radius: it is only Lipschitz over a bounded domain.
    pub fn ridge(mu: f64, projection_radius: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::invalid("loss.mu", format!("{mu} must be >= 0")));
        }
        Self::new(LossKind::Ridge { mu }, Some(projection_radius))
    }

    pub fn new(kind: LossKind, projection_radius: Option<f64>) -> Result<Self> {
        if let Some(r) = projection_radius {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::invalid(
                    "loss.projection_radius",
                    format!("{r} must be positive"),
                ));
            }
        }
        if matches!(kind, LossKind::Ridge { .. }) && projection_radius.is_none() {
            return Err(Error::MissingConstant("loss.projection_radius"));
        }
        Ok(LossModel {
            kind,
            projection_radius,
        })
    }

    pub fn with_projection(self, radius: f64) -> Result<Self> {
        Self::new(self.kind, Some(radius))
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            LossKind::Logistic => "logistic",
            LossKind::Ridge { .. } => "ridge",
            LossKind::BoundedNonconvex => "bounded_nonconvex",
        }
    }

    pub fn projection_radius(&self) -> Option<f64> {
        self.projection_radius
    }

    /// Declared strong convexity, present only for ridge with `mu > 0`.
    pub fn strong_convexity(&self) -> Option<f64> {
        match self.kind {
            LossKind::Ridge { mu } if mu > 0.0 => Some(mu),
            _ => None,
        }
    }

    pub fn regime(&self) -> Regime {
        match self.kind {
            LossKind::Logistic => Regime::Convex,
            LossKind::Ridge { mu } if mu > 0.0 => Regime::StronglyConvex,
            LossKind::Ridge { .. } => Regime::Convex,
            LossKind::BoundedNonconvex => Regime::NonConvex,
        }
    }

    pub fn value(&self, theta: &[f64], z: &DataPoint) -> f64 {
        match self.kind {
            LossKind::Logistic => logistic_value(theta, z),
            LossKind::Ridge { mu } => ridge_value(theta, z, mu),
            LossKind::BoundedNonconvex => bounded_nonconvex_value(theta, z),
        }
    }

    pub fn grad_into(&self, theta: &[f64], z: &DataPoint, out: &mut [f64]) {
        match self.kind {
            LossKind::Logistic => logistic_grad(theta, z, out),
            LossKind::Ridge { mu } => ridge_grad(theta, z, mu, out),
            LossKind::BoundedNonconvex => bounded_nonconvex_grad(theta, z, out),
        }
    }

    pub fn grad(&self, theta: &[f64], z: &DataPoint) -> Vec<f64> {
        let mut out = vec![0.0; theta.len()];
        self.grad_into(theta, z, &mut out);
        out
    }

    /// Mean loss over `points`.
    pub fn risk(&self, theta: &[f64], points: &[DataPoint]) -> f64 {
        points.iter().map(|z| self.value(theta, z)).sum::<f64>() / points.len() as f64
    }

    /// Mean gradient over `points`.
    pub fn risk_grad(&self, theta: &[f64], points: &[DataPoint]) -> Vec<f64> {
        let mut acc = vec![0.0; theta.len()];
        let mut g = vec![0.0; theta.len()];
        for z in points {
            self.grad_into(theta, z, &mut g);
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let n = points.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Per-sample closed-form constants over `points`.
    ///
    /// - logistic: `L = max|x|`, `beta = max|x|^2 / 4`;
    /// - ridge: `beta = max|x|^2 + mu`, `L = max|x| (max|x| R + max|y|) + mu R`;
    /// - bounded non-convex: `L = e^{-1/2} max|x|`, `beta = max|x|^2`.
    pub fn constants(&self, points: &[DataPoint]) -> LossConstants {
        let max_x = points.iter().map(DataPoint::norm).fold(0.0, f64::max);
        match self.kind {
            LossKind::Logistic => LossConstants {
                lipschitz: max_x,
                smoothness: max_x * max_x / 4.0,
                strong_convexity: None,
            },
            LossKind::Ridge { mu } => {
                let radius = self
                    .projection_radius
                    .expect("ridge always carries a projection radius");
                let max_y = points.iter().map(|z| z.y.abs()).fold(0.0, f64::max);
                LossConstants {
                    lipschitz: max_x * (max_x * radius + max_y) + mu * radius,
                    smoothness: max_x * max_x + mu,
                    strong_convexity: self.strong_convexity(),
                }
            }
            LossKind::BoundedNonconvex => LossConstants {
                lipschitz: (-0.5f64).exp() * max_x,
                smoothness: max_x * max_x,
                strong_convexity: None,
            },
        }
    }
}
