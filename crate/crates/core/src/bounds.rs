//! Closed-form generalization bounds, stepsize admissibility, and the
//! trajectory-level quantities used by the data-dependent analysis.
//!
//! Every evaluator returns a [`BoundReport`] that echoes its inputs so CSV rows
//! are self-describing. `admissible` records whether the stepsize condition of the
//! corresponding result holds; values are reported either way.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{AgentParams, FederatedDataset, Stepsize};
use crate::losses::{dot, norm, LossKind, LossModel};
use crate::topology::{MixingMatrix, TopologyDiagnostics};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `L`.
    pub lipschitz: f64,
    /// `beta`.
    pub smoothness: f64,
    /// `mu`, strongly convex bounds only.
    pub strong_convexity: Option<f64>,
    /// Bound on the per-agent empirical gradient standard deviation.
    pub sigma: f64,
    /// `c` in `eta_t <= c/(t+1)`; falls back to the schedule's own `c`.
    pub decay_c: Option<f64>,
    pub stepsize: Stepsize,
    pub iterations: usize,
    pub m: usize,
    pub n: usize,
    pub topology: TopologyDiagnostics,
    /// `(1/m) sum_j E[R_Sj(theta0) - R_Sj(theta*_j)]`.
    pub init_gap: Option<f64>,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bounds.L", self.lipschitz),
            ("bounds.beta", self.smoothness),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("{v} must be positive")));
            }
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid("bounds.sigma", "must be >= 0"));
        }
        if let Some(mu) = self.strong_convexity {
            if !(mu > 0.0) {
                return Err(Error::invalid("loss.mu", "must be positive"));
            }
        }
        if let Some(g) = self.init_gap {
            if !(g >= 0.0) {
                return Err(Error::invalid("bounds.init_gap", "must be >= 0"));
            }
        }
        if self.m == 0 || self.n == 0 {
            return Err(Error::invalid("m/n", "must be positive"));
        }
        if self.topology.m != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                got: self.topology.m,
            });
        }
        self.stepsize.validate()
    }

    fn mn(&self) -> f64 {
        (self.m * self.n) as f64
    }

    fn eta_sum(&self) -> f64 {
        self.stepsize.total(self.iterations)
    }

    fn eta_max(&self) -> f64 {
        self.stepsize.max(self.iterations)
    }

    fn decay_c(&self) -> Result<f64> {
        match (self.decay_c, self.stepsize) {
            (Some(c), _) | (None, Stepsize::Decaying { c }) => Ok(c),
            _ => Err(Error::MissingConstant("bounds.c")),
        }
    }

    fn mu(&self) -> Result<f64> {
        self.strong_convexity.ok_or(Error::MissingConstant("loss.mu"))
    }

    fn constant_eta(&self) -> Option<f64> {
        match self.stepsize {
            Stepsize::Constant(eta) => Some(eta),
            Stepsize::Decaying { .. } => None,
        }
    }

    /// `eta_t <= c/(t+1)` for all `t < T`.
    fn under_decay(&self, c: f64) -> bool {
        (0..self.iterations).all(|t| self.stepsize.at(t) <= c / (t as f64 + 1.0) * (1.0 + 1e-12))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub name: &'static str,
    pub value: f64,
    pub admissible: bool,
    pub inputs: BoundInputs,
}

fn report(name: &'static str, value: f64, admissible: bool, inputs: &BoundInputs) -> BoundReport {
    BoundReport {
        name,
        value,
        admissible,
        inputs: inputs.clone(),
    }
}

/// `2 L^2 sum_t eta_t / (m n)`; admissible when `eta_t <= 2 min_k W_kk / beta`.
pub fn bound_convex(inputs: &BoundInputs) -> BoundReport {
    let value = 2.0 * inputs.lipschitz.powi(2) * inputs.eta_sum() / inputs.mn();
    let admissible = inputs.eta_max() <= 2.0 * inputs.topology.min_diag / inputs.smoothness;
    report("convex", value, admissible, inputs)
}

/// `4 L^2 / (mu m n)`; admissible for a constant `eta <= min_k W_kk / beta`.
pub fn bound_strongly(inputs: &BoundInputs) -> Result<BoundReport> {
    let mu = inputs.mu()?;
    let value = 4.0 * inputs.lipschitz.powi(2) / (mu * inputs.mn());
    let admissible = inputs
        .constant_eta()
        .is_some_and(|eta| eta <= inputs.topology.min_diag / inputs.smoothness);
    Ok(report("strongly_convex", value, admissible, inputs))
}

/// `(1 + 1/(beta c)) (2 c L^2)^{1/(beta c + 1)}`.
fn nonconvex_constant(beta: f64, c: f64, lipschitz: f64) -> f64 {
    let bc = beta * c;
    (1.0 + 1.0 / bc) * (2.0 * c * lipschitz * lipschitz).powf(1.0 / (bc + 1.0))
}

/// `C~ T^{bc/(bc+1)} / (n m^{1/(bc+1)})` with `bc = beta c`.
pub fn bound_nonconvex(inputs: &BoundInputs) -> Result<BoundReport> {
    let c = inputs.decay_c()?;
    let bc = inputs.smoothness * c;
    let t = inputs.iterations as f64;
    let value = nonconvex_constant(inputs.smoothness, c, inputs.lipschitz) * t.powf(bc / (bc + 1.0))
        / (inputs.n as f64 * (inputs.m as f64).powf(1.0 / (bc + 1.0)));
    let admissible = inputs.under_decay(c) && inputs.topology.min_diag > 0.0;
    Ok(report("nonconvex", value, admissible, inputs))
}

/// Sum of the four terms of the data-dependent bound (constant stepsize,
/// symmetric `W` with a converged `C_W`).
pub fn bound_data_dependent(inputs: &BoundInputs) -> Result<BoundReport> {
    let eta = inputs.constant_eta().ok_or_else(|| {
        Error::Unsupported("data-dependent bound needs a constant stepsize".into())
    })?;
    let init_gap = inputs.init_gap.ok_or(Error::MissingConstant("bounds.init_gap"))?;
    let topo = &inputs.topology;
    if !topo.cw_converged {
        return Err(Error::CwNotConverged {
            terms: topo.cw_partial_sums.len().saturating_sub(1),
            last_term: topo
                .cw_partial_sums
                .windows(2)
                .last()
                .map(|w| w[1] - w[0])
                .unwrap_or(f64::NAN),
        });
    }
    let terms = data_dependent_terms(
        inputs.lipschitz,
        inputs.smoothness,
        inputs.sigma,
        eta,
        inputs.iterations,
        inputs.m,
        inputs.n,
        topo.cw_limit,
        init_gap,
    );
    let admissible = eta <= 2.0 * topo.min_diag / inputs.smoothness;
    Ok(report("data_dependent", terms.iter().sum(), admissible, inputs))
}

/// The four additive terms, in display order: initialization, variance,
/// smoothness-variance, decentralization.
#[allow(clippy::too_many_arguments)]
pub fn data_dependent_terms(
    lipschitz: f64,
    beta: f64,
    sigma: f64,
    eta: f64,
    iterations: usize,
    m: usize,
    n: usize,
    cw: f64,
    init_gap: f64,
) -> [f64; 4] {
    let mn = (m * n) as f64;
    let t = iterations as f64;
    [
        2.0 * 2f64.sqrt() * lipschitz * (t * eta).sqrt() / mn * init_gap.sqrt(),
        2.0 * lipschitz * sigma * eta * t / mn,
        2.0 * lipschitz * beta.sqrt() * sigma * eta.powf(1.5) * t / mn,
        2.0 * lipschitz * lipschitz * t * eta * cw / mn,
    ]
}

/// Worst-model convex bound: `bound_convex x sum_j max_k W_kj`; admissible when
/// `eta_t <= 2 / beta`.
pub fn bound_worst_convex(inputs: &BoundInputs) -> BoundReport {
    let base = bound_convex(inputs);
    let admissible = inputs.eta_max() <= 2.0 / inputs.smoothness;
    report(
        "worst_convex",
        base.value * inputs.topology.connectivity_sum,
        admissible,
        inputs,
    )
}

/// Spectral relaxation `(1/(mn) + (1 - rho)/n) 2 L^2 sum_t eta_t`, evaluated as
/// `bound_convex x (1 + m (1 - rho))` so that it shares the rounding of
/// [`bound_worst_convex`] and dominates it in floating point too.
pub fn bound_worst_convex_spectral(inputs: &BoundInputs) -> BoundReport {
    let rho = inputs.topology.spectral_gap;
    let value = bound_convex(inputs).value * (1.0 + inputs.m as f64 * (1.0 - rho));
    let admissible = inputs.eta_max() <= 2.0 / inputs.smoothness;
    report("worst_convex_spectral", value, admissible, inputs)
}

/// Worst-model strongly convex bound: `bound_strongly x sum_j max_k W_kj`;
/// admissible for a constant `eta <= 1 / beta`.
pub fn bound_worst_strongly(inputs: &BoundInputs) -> Result<BoundReport> {
    let base = bound_strongly(inputs)?;
    let admissible = inputs
        .constant_eta()
        .is_some_and(|eta| eta <= 1.0 / inputs.smoothness);
    Ok(report(
        "worst_strongly_convex",
        base.value * inputs.topology.connectivity_sum,
        admissible,
        inputs,
    ))
}

/// `C~ T^{bc/(bc+1)} / n x ||W||_max^{1/(bc+1)}`.
pub fn bound_worst_nonconvex(inputs: &BoundInputs) -> Result<BoundReport> {
    let c = inputs.decay_c()?;
    let bc = inputs.smoothness * c;
    let t = inputs.iterations as f64;
    let value = nonconvex_constant(inputs.smoothness, c, inputs.lipschitz) * t.powf(bc / (bc + 1.0))
        / inputs.n as f64
        * inputs.topology.max_norm.powf(1.0 / (bc + 1.0));
    Ok(report("worst_nonconvex", value, inputs.under_decay(c), inputs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepsizeCheck {
    pub name: &'static str,
    /// Largest stepsize in the horizon.
    pub eta_max: f64,
    /// Threshold the stepsize is compared to (`NaN` when not applicable).
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepsizeReport {
    /// Ordered from strictest to loosest: `lambda_min`, `strongly_convex`,
    /// `convex`, then `nonconvex` when a decay constant is known.
    pub checks: Vec<StepsizeCheck>,
    pub warnings: Vec<String>,
}

impl StepsizeReport {
    pub fn check(&self, name: &str) -> Option<&StepsizeCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn passed(&self, name: &str) -> bool {
        self.check(name).is_some_and(|c| c.passed)
    }
}

/// Evaluates every applicable stepsize condition. Never fails; violations are
/// reported (and turned into warnings by callers) because experiments may
/// deliberately exceed them.
pub fn check_stepsize(inputs: &BoundInputs) -> StepsizeReport {
    let topo = &inputs.topology;
    let beta = inputs.smoothness;
    let eta_max = inputs.eta_max();
    let constant = inputs.constant_eta().is_some();
    let mut checks = vec![
        StepsizeCheck {
            name: "lambda_min",
            eta_max,
            threshold: topo.smallest_eigenvalue / beta,
            passed: eta_max <= topo.smallest_eigenvalue / beta,
        },
        StepsizeCheck {
            name: "strongly_convex",
            eta_max,
            threshold: topo.min_diag / beta,
            passed: constant && eta_max <= topo.min_diag / beta,
        },
        StepsizeCheck {
            name: "convex",
            eta_max,
            threshold: 2.0 * topo.min_diag / beta,
            passed: eta_max <= 2.0 * topo.min_diag / beta,
        },
    ];
    if let Ok(c) = inputs.decay_c() {
        checks.push(StepsizeCheck {
            name: "nonconvex",
            eta_max,
            threshold: c,
            passed: inputs.under_decay(c) && topo.min_diag > 0.0,
        });
    }
    let mut warnings = Vec::new();
    if topo.min_diag == 0.0 && eta_max > 0.0 {
        warnings.push(format!(
            "min_k W_kk = 0 with eta = {eta_max}: the convex stability bound only holds \
             trivially (eta = 0, data-independent output) for such graphs"
        ));
    }
    for c in &checks {
        if !c.passed {
            warnings.push(format!(
                "stepsize check `{}` fails: eta_max {} vs threshold {}",
                c.name, c.eta_max, c.threshold
            ));
        }
    }
    StepsizeReport { checks, warnings }
}

/// Initialization gap `(1/m) sum_j [R_Sj(theta0) - R_Sj(theta*_j)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitGap {
    pub value: f64,
    pub per_agent: Vec<f64>,
    /// Some local minimizer fell outside the projection ball and was clipped.
    pub clipped: bool,
    /// The local minimizer oracle reached its tolerance for every agent.
    pub converged: bool,
}

const ERM_GRAD_TOL: f64 = 1e-10;
const ERM_MAX_ITERS: usize = 200_000;

/// Local empirical risk minimizers and the resulting initialization gap.
///
/// Ridge uses the regularized normal equations; logistic runs full-batch
/// gradient descent with step `1/beta_j` until the gradient norm drops below
/// `1e-10` (flagging non-convergence, e.g. on separable local data, where the
/// gap is then an under-estimate).
pub fn compute_init_gap(loss: &LossModel, data: &FederatedDataset, theta0: &[f64]) -> Result<InitGap> {
    if theta0.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: theta0.len(),
        });
    }
    let mut per_agent = Vec::with_capacity(data.agents());
    let mut clipped = false;
    let mut converged = true;
    for j in 0..data.agents() {
        let local = data.agent(j);
        let minimizer = match loss.kind() {
            LossKind::Ridge { mu } => {
                let (theta, was_clipped) = ridge_minimizer(local, mu, loss.projection_radius())?;
                clipped |= was_clipped;
                theta
            }
            LossKind::Logistic => {
                let (theta, ok) = gradient_descent_minimizer(loss, local, theta0);
                converged &= ok;
                theta
            }
            LossKind::BoundedNonconvex => {
                return Err(Error::Unsupported(
                    "initialization gap needs a convex loss (ridge or logistic)".into(),
                ))
            }
        };
        let gap = loss.risk(theta0, local) - loss.risk(&minimizer, local);
        per_agent.push(gap.max(0.0));
    }
    Ok(InitGap {
        value: per_agent.iter().sum::<f64>() / per_agent.len() as f64,
        per_agent,
        clipped,
        converged,
    })
}

fn ridge_minimizer(
    local: &[crate::losses::DataPoint],
    mu: f64,
    radius: Option<f64>,
) -> Result<(Vec<f64>, bool)> {
    let d = local[0].dim();
    let n = local.len() as f64;
    let mut a = DMatrix::<f64>::identity(d, d) * mu;
    let mut b = DVector::<f64>::zeros(d);
    for z in local {
        let x = DVector::from_column_slice(&z.x);
        a += &x * x.transpose() / n;
        b += &x * (z.y / n);
    }
    let theta = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Unsupported("singular local normal equations (mu = 0)".into()))?;
    let mut theta: Vec<f64> = theta.iter().cloned().collect();
    let mut was_clipped = false;
    if let Some(r) = radius {
        if norm(&theta) > r {
            crate::losses::project_ball_in_place(&mut theta, r);
            was_clipped = true;
        }
    }
    Ok((theta, was_clipped))
}

fn gradient_descent_minimizer(
    loss: &LossModel,
    local: &[crate::losses::DataPoint],
    start: &[f64],
) -> (Vec<f64>, bool) {
    let beta = loss.constants(local).smoothness;
    if beta == 0.0 {
        return (start.to_vec(), true);
    }
    let step = 1.0 / beta;
    let mut theta = start.to_vec();
    for _ in 0..ERM_MAX_ITERS {
        let g = loss.risk_grad(&theta, local);
        if norm(&g) <= ERM_GRAD_TOL {
            return (theta, true);
        }
        theta.iter_mut().zip(&g).for_each(|(t, g)| *t -= step * g);
    }
    (theta, false)
}

/// `sqrt((1/n) sum_i |grad l(theta; Z_ik) - grad R_Sk(theta)|^2)` for agent `k`'s data.
pub fn gradient_spread(loss: &LossModel, local: &[crate::losses::DataPoint], theta: &[f64]) -> f64 {
    let mean = loss.risk_grad(theta, local);
    let mut g = vec![0.0; theta.len()];
    let mut acc = 0.0;
    for z in local {
        loss.grad_into(theta, z, &mut g);
        acc += g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    (acc / local.len() as f64).sqrt()
}

/// Empirical `sigma`: the largest per-agent gradient spread over the agent's own
/// visited parameters. An under-estimate of the global supremum over `theta`.
pub fn empirical_sigma(loss: &LossModel, data: &FederatedDataset, trajectory: &[AgentParams]) -> f64 {
    trajectory
        .iter()
        .flat_map(|snap| {
            (0..data.agents()).map(move |k| gradient_spread(loss, data.agent(k), snap.row(k)))
        })
        .fold(0.0, f64::max)
}

/// Per-realization pieces of the telescoped descent inequality on a Variant-B
/// trajectory with constant stepsize.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentTerms {
    /// `(eta/m) sum_t sum_j |grad R_Sj(theta_j^t)|^2`.
    pub gradient_energy: f64,
    /// `(1/m) sum_j [R_Sj(theta_j^0) - R_Sj(theta_j^T)]`.
    pub risk_decrease: f64,
    /// `T beta sigma^2 eta^2`.
    pub variance: f64,
    /// `sum_t (1/(m eta)) sum_j |(W theta^t)_j - theta_j^t|^2`.
    pub consensus: f64,
}

impl DescentTerms {
    pub fn rhs(&self) -> f64 {
        2.0 * self.risk_decrease + self.variance + self.consensus
    }

    /// `lhs - rhs`; non-positive in expectation.
    pub fn slack(&self) -> f64 {
        self.gradient_energy - self.rhs()
    }
}

pub fn descent_terms(
    loss: &LossModel,
    data: &FederatedDataset,
    w: &MixingMatrix,
    trajectory: &[AgentParams],
    eta: f64,
    beta: f64,
    sigma: f64,
) -> Result<DescentTerms> {
    if trajectory.len() < 1 {
        return Err(Error::invalid("trajectory", "need at least the initial snapshot"));
    }
    if !(eta > 0.0) {
        return Err(Error::invalid("algo.eta", "descent terms need eta > 0"));
    }
    let m = data.agents();
    let iterations = trajectory.len() - 1;
    let mut gradient_energy = 0.0;
    let mut consensus = 0.0;
    for snap in &trajectory[..iterations] {
        let mixed = snap.mixed(w);
        for j in 0..m {
            let g = loss.risk_grad(snap.row(j), data.agent(j));
            gradient_energy += dot(&g, &g);
            consensus += mixed
                .row(j)
                .iter()
                .zip(snap.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    let first = &trajectory[0];
    let last = &trajectory[iterations];
    let risk_decrease = (0..m)
        .map(|j| loss.risk(first.row(j), data.agent(j)) - loss.risk(last.row(j), data.agent(j)))
        .sum::<f64>()
        / m as f64;
    Ok(DescentTerms {
        gradient_energy: eta / m as f64 * gradient_energy,
        risk_decrease,
        variance: iterations as f64 * beta * sigma * sigma * eta * eta,
        consensus: consensus / (m as f64 * eta),
    })
}

/// Per-realization right-hand side of the local-optimization link:
/// `(2 L sigma/(mn)) sum_t eta_t + (2L/(mn)) sum_t eta_t (1/m) sum_j |grad R_Sj(theta_j^t)|`.
pub fn link_bound(
    loss: &LossModel,
    data: &FederatedDataset,
    trajectory: &[AgentParams],
    stepsize: Stepsize,
    lipschitz: f64,
    sigma: f64,
) -> f64 {
    let m = data.agents();
    let mn = (m * data.per_agent()) as f64;
    let iterations = trajectory.len().saturating_sub(1);
    let weighted: f64 = trajectory[..iterations]
        .iter()
        .enumerate()
        .map(|(t, snap)| {
            let mean_norm = (0..m)
                .map(|j| norm(&loss.risk_grad(snap.row(j), data.agent(j))))
                .sum::<f64>()
                / m as f64;
            stepsize.at(t) * mean_norm
        })
        .sum();
    2.0 * lipschitz * sigma / mn * stepsize.total(iterations) + 2.0 * lipschitz / mn * weighted
}
