//! Deterministic D-SGD execution.
//!
//! Each of the `m` agents holds `n` points and a local parameter. At every
//! iteration agent `k` draws one local index from the shared [`SampleSchedule`]
//! and then
//!
//! - Variant A mixes post-gradient parameters: `theta_k <- sum_l W_kl (theta_l - eta g_l)`;
//! - Variant B mixes and steps in parallel: `theta_k <- sum_l W_kl theta_l - eta g_k`,
//!
//! where `g_l` is the gradient at agent `l`'s pre-update parameter. Projected runs
//! apply the ball projection to each local update before mixing (A) or to the
//! combined update (B).
//!
//! Agent and sample indices are 0-based throughout the API.

use serde::{Deserialize, Serialize};

use crate::losses::{distance, project_ball_in_place, DataPoint, LossModel};
use crate::rng::{tag, Stream};
use crate::topology::MixingMatrix;
use crate::{Error, Result};

/// `m` agents with `n` points each.
#[derive(Clone, Debug, PartialEq)]
pub struct FederatedDataset {
    agents: Vec<Vec<DataPoint>>,
}

impl FederatedDataset {
    pub fn new(agents: Vec<Vec<DataPoint>>) -> Result<Self> {
        let n = agents.first().map(Vec::len).unwrap_or(0);
        if agents.is_empty() || n == 0 {
            return Err(Error::invalid("dataset", "need m >= 1 agents with n >= 1 points"));
        }
        if let Some(bad) = agents.iter().find(|a| a.len() != n) {
            return Err(Error::invalid(
                "dataset",
                format!("agents hold {} and {} points; all must hold n", n, bad.len()),
            ));
        }
        let d = agents[0][0].dim();
        for p in agents.iter().flatten() {
            if p.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.dim(),
                });
            }
            if !p.y.is_finite() || p.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("dataset", "non-finite data point"));
            }
        }
        Ok(FederatedDataset { agents })
    }

    pub fn agents(&self) -> usize {
        self.agents.len()
    }

    pub fn per_agent(&self) -> usize {
        self.agents[0].len()
    }

    pub fn dim(&self) -> usize {
        self.agents[0][0].dim()
    }

    /// Point `i` of agent `j`.
    pub fn point(&self, i: usize, j: usize) -> &DataPoint {
        &self.agents[j][i]
    }

    pub fn agent(&self, j: usize) -> &[DataPoint] {
        &self.agents[j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DataPoint> {
        self.agents.iter().flatten()
    }

    pub fn flatten(&self) -> Vec<DataPoint> {
        self.iter().cloned().collect()
    }

    /// Copy with point `i` of agent `j` replaced by `value`.
    pub fn swapped(&self, i: usize, j: usize, value: DataPoint) -> Result<Self> {
        if j >= self.agents() || i >= self.per_agent() {
            return Err(Error::IndexOutOfRange(format!(
                "swap (i={i}, j={j}) outside n={} x m={}",
                self.per_agent(),
                self.agents()
            )));
        }
        if value.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: value.dim(),
            });
        }
        let mut out = self.clone();
        out.agents[j][i] = value;
        Ok(out)
    }
}

/// Local parameters of all agents, stored row-major (`m x d`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    m: usize,
    d: usize,
    data: Vec<f64>,
}

impl AgentParams {
    /// Every agent starts from the same vector.
    pub fn broadcast(m: usize, init: &[f64]) -> Self {
        AgentParams {
            m,
            d: init.len(),
            data: init.repeat(m),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        Ok(AgentParams {
            m: rows.len(),
            d,
            data: rows.concat(),
        })
    }

    pub fn agents(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.d..(k + 1) * self.d]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.d..(k + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d.max(1)).take(self.m)
    }

    /// Arithmetic mean over agents.
    pub fn average(&self) -> Vec<f64> {
        let mut avg = vec![0.0; self.d];
        for r in self.rows() {
            avg.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        }
        avg.iter_mut().for_each(|a| *a /= self.m as f64);
        avg
    }

    /// `W theta`: row `k` becomes `sum_l W_kl theta_l`.
    pub fn mixed(&self, w: &MixingMatrix) -> AgentParams {
        let mut out = AgentParams::broadcast(self.m, &vec![0.0; self.d]);
        mix_into(w, self, &mut out);
        out
    }

    /// Per-agent Euclidean distance to `other`.
    pub fn distances(&self, other: &AgentParams) -> Vec<f64> {
        self.rows().zip(other.rows()).map(|(a, b)| distance(a, b)).collect()
    }
}

/// Zero weights are skipped, so identity mixing reproduces each row bit-for-bit.
fn mix_into(w: &MixingMatrix, src: &AgentParams, dst: &mut AgentParams) {
    for k in 0..src.m {
        let out = dst.row_mut(k);
        out.iter_mut().for_each(|v| *v = 0.0);
        for l in 0..src.m {
            let wkl = w.get(k, l);
            if wkl != 0.0 {
                out.iter_mut()
                    .zip(src.row(l))
                    .for_each(|(o, v)| *o += wkl * v);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
}

/// `eta_t = eta` or `eta_t = c / (t + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stepsize {
    Constant(f64),
    Decaying { c: f64 },
}

impl Stepsize {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            Stepsize::Constant(eta) => eta,
            Stepsize::Decaying { c } => c / (t as f64 + 1.0),
        }
    }

    /// `sum_{t < iterations} eta_t`.
    pub fn total(&self, iterations: usize) -> f64 {
        (0..iterations).map(|t| self.at(t)).sum()
    }

    /// `max_{t < iterations} eta_t`; zero for an empty horizon.
    pub fn max(&self, iterations: usize) -> f64 {
        if iterations == 0 {
            0.0
        } else {
            // Both schedules are non-increasing.
            self.at(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Stepsize::Constant(eta) if !(eta >= 0.0) || !eta.is_finite() => {
                Err(Error::invalid("algo.eta", format!("{eta} must be >= 0")))
            }
            Stepsize::Decaying { c } if !(c > 0.0) || !c.is_finite() => {
                Err(Error::invalid("algo.c", format!("{c} must be > 0")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsgdConfig {
    pub variant: Variant,
    pub iterations: usize,
    pub stepsize: Stepsize,
    pub seed: u64,
    /// Project onto the loss model's ball after each update.
    pub projected: bool,
    pub record_trajectory: bool,
    /// Shared initial parameter; zeros when absent.
    pub init: Option<Vec<f64>>,
}

impl DsgdConfig {
    pub fn new(variant: Variant, iterations: usize, stepsize: Stepsize, seed: u64) -> Self {
        DsgdConfig {
            variant,
            iterations,
            stepsize,
            seed,
            projected: false,
            record_trajectory: false,
            init: None,
        }
    }

    pub fn initial(&self, d: usize) -> Result<Vec<f64>> {
        match &self.init {
            Some(v) if v.len() != d => Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            }),
            Some(v) => Ok(v.clone()),
            None => Ok(vec![0.0; d]),
        }
    }
}

/// Sample indices `I_k^t` for every iteration and agent, uniform over `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSchedule {
    m: usize,
    n: usize,
    iterations: usize,
    indices: Vec<u32>,
}

impl SampleSchedule {
    /// Draws `iterations x m` indices, iteration-major, from the schedule
    /// sub-stream of `seed`.
    pub fn generate(seed: u64, iterations: usize, m: usize, n: usize) -> Self {
        let mut stream = Stream::derived(seed, &[tag::SCHEDULE]);
        let indices = (0..iterations * m).map(|_| stream.index(n) as u32).collect();
        SampleSchedule {
            m,
            n,
            iterations,
            indices,
        }
    }

    pub fn index(&self, t: usize, k: usize) -> usize {
        self.indices[t * self.m + k] as usize
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.indices[t * self.m..(t + 1) * self.m]
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Number of iterations at which agent `j` drew sample `i`.
    pub fn selections(&self, i: usize, j: usize) -> usize {
        (0..self.iterations).filter(|&t| self.index(t, j) == i).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsgdRun {
    pub final_params: AgentParams,
    pub average_final: Vec<f64>,
    /// `T + 1` snapshots when recording was requested.
    pub trajectory: Option<Vec<AgentParams>>,
    pub schedule: SampleSchedule,
}

/// Arithmetic mean of the final local parameters.
pub fn average_iterate(run: &DsgdRun) -> Vec<f64> {
    run.final_params.average()
}

fn check_shapes(w: &MixingMatrix, params: &AgentParams, rows: usize) -> Result<()> {
    if w.size() != params.agents() {
        return Err(Error::DimensionMismatch {
            expected: w.size(),
            got: params.agents(),
        });
    }
    if rows != params.agents() {
        return Err(Error::DimensionMismatch {
            expected: params.agents(),
            got: rows,
        });
    }
    Ok(())
}

/// Reusable buffers for one D-SGD trajectory.
struct Stepper<'a> {
    w: &'a MixingMatrix,
    loss: &'a LossModel,
    variant: Variant,
    radius: Option<f64>,
    grad: Vec<f64>,
    scratch: AgentParams,
}

impl<'a> Stepper<'a> {
    fn new(
        w: &'a MixingMatrix,
        loss: &'a LossModel,
        variant: Variant,
        projected: bool,
        m: usize,
        d: usize,
    ) -> Result<Self> {
        let radius = if projected {
            Some(loss.projection_radius().ok_or(Error::MissingConstant(
                "loss.projection_radius (projected run)",
            ))?)
        } else {
            None
        };
        Ok(Stepper {
            w,
            loss,
            variant,
            radius,
            grad: vec![0.0; d],
            scratch: AgentParams::broadcast(m, &vec![0.0; d]),
        })
    }

    /// One iteration from `cur` into `next`; `points[k]` is agent `k`'s sample.
    fn step(&mut self, cur: &AgentParams, points: &[&DataPoint], eta: f64, next: &mut AgentParams) {
        let m = cur.agents();
        match self.variant {
            Variant::A => {
                for k in 0..m {
                    self.loss.grad_into(cur.row(k), points[k], &mut self.grad);
                    let u = self.scratch.row_mut(k);
                    for ((u, t), g) in u.iter_mut().zip(cur.row(k)).zip(&self.grad) {
                        *u = t - eta * g;
                    }
                    if let Some(r) = self.radius {
                        project_ball_in_place(u, r);
                    }
                }
                mix_into(self.w, &self.scratch, next);
            }
            Variant::B => {
                mix_into(self.w, cur, next);
                for k in 0..m {
                    self.loss.grad_into(cur.row(k), points[k], &mut self.grad);
                    let out = next.row_mut(k);
                    for (o, g) in out.iter_mut().zip(&self.grad) {
                        *o -= eta * g;
                    }
                    if let Some(r) = self.radius {
                        project_ball_in_place(out, r);
                    }
                }
            }
        }
    }
}

fn step_checked(
    variant: Variant,
    params: &AgentParams,
    w: &MixingMatrix,
    loss: &LossModel,
    data_row: &[&DataPoint],
    eta: f64,
    projected: bool,
) -> Result<AgentParams> {
    check_shapes(w, params, data_row.len())?;
    if let Some(p) = data_row.iter().find(|p| p.dim() != params.dim()) {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: p.dim(),
        });
    }
    let mut stepper = Stepper::new(w, loss, variant, projected, params.agents(), params.dim())?;
    let mut next = params.clone();
    stepper.step(params, data_row, eta, &mut next);
    Ok(next)
}

/// One Variant-A step (gradient, optional projection, then mixing).
pub fn step_variant_a(
    params: &AgentParams,
    w: &MixingMatrix,
    loss: &LossModel,
    data_row: &[&DataPoint],
    eta: f64,
    projected: bool,
) -> Result<AgentParams> {
    step_checked(Variant::A, params, w, loss, data_row, eta, projected)
}

/// One Variant-B step (mixing and local gradient in parallel, optional projection).
pub fn step_variant_b(
    params: &AgentParams,
    w: &MixingMatrix,
    loss: &LossModel,
    data_row: &[&DataPoint],
    eta: f64,
    projected: bool,
) -> Result<AgentParams> {
    step_checked(Variant::B, params, w, loss, data_row, eta, projected)
}

fn prepare(
    w: &MixingMatrix,
    data: &FederatedDataset,
    config: &DsgdConfig,
) -> Result<AgentParams> {
    config.stepsize.validate()?;
    if w.size() != data.agents() {
        return Err(Error::DimensionMismatch {
            expected: w.size(),
            got: data.agents(),
        });
    }
    let report = w.validate();
    if !report.passed() {
        return Err(Error::NotDoublyStochastic(report.to_string()));
    }
    Ok(AgentParams::broadcast(w.size(), &config.initial(data.dim())?))
}

/// Runs `config.iterations` steps with the schedule drawn from `config.seed`.
pub fn run(
    w: &MixingMatrix,
    loss: &LossModel,
    data: &FederatedDataset,
    config: &DsgdConfig,
) -> Result<DsgdRun> {
    let schedule =
        SampleSchedule::generate(config.seed, config.iterations, data.agents(), data.per_agent());
    run_with_schedule(w, loss, data, config, schedule)
}

/// Runs with an explicit schedule (which must cover `config.iterations`).
pub fn run_with_schedule(
    w: &MixingMatrix,
    loss: &LossModel,
    data: &FederatedDataset,
    config: &DsgdConfig,
    schedule: SampleSchedule,
) -> Result<DsgdRun> {
    let mut cur = prepare(w, data, config)?;
    check_schedule(&schedule, data, config)?;
    let mut stepper = Stepper::new(w, loss, config.variant, config.projected, cur.agents(), cur.dim())?;
    let mut next = cur.clone();
    let mut trajectory = config.record_trajectory.then(|| {
        let mut v = Vec::with_capacity(config.iterations + 1);
        v.push(cur.clone());
        v
    });
    let mut points: Vec<&DataPoint> = Vec::with_capacity(data.agents());
    for t in 0..config.iterations {
        points.clear();
        points.extend((0..data.agents()).map(|k| data.point(schedule.index(t, k), k)));
        stepper.step(&cur, &points, config.stepsize.at(t), &mut next);
        std::mem::swap(&mut cur, &mut next);
        if let Some(tr) = trajectory.as_mut() {
            tr.push(cur.clone());
        }
    }
    Ok(DsgdRun {
        average_final: cur.average(),
        final_params: cur,
        trajectory,
        schedule,
    })
}

fn check_schedule(schedule: &SampleSchedule, data: &FederatedDataset, config: &DsgdConfig) -> Result<()> {
    if schedule.iterations < config.iterations || schedule.m != data.agents() || schedule.n != data.per_agent() {
        return Err(Error::invalid(
            "schedule",
            format!(
                "schedule covers {} iterations of {}x{}, run needs {} of {}x{}",
                schedule.iterations,
                schedule.m,
                schedule.n,
                config.iterations,
                data.agents(),
                data.per_agent()
            ),
        ));
    }
    Ok(())
}

/// Replacement of point `i` of agent `j` by `value`.
#[derive(Clone, Debug, PartialEq)]
pub struct Swap {
    pub i: usize,
    pub j: usize,
    pub value: DataPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedRun {
    pub original: DsgdRun,
    pub swapped: DsgdRun,
    /// `delta[t][k] = |theta_k^(t) - theta~_k^(t)|` for `t = 0..=T`.
    pub delta_trace: Vec<Vec<f64>>,
}

/// Runs D-SGD on `S` and `S^(ij)` in lockstep with one shared sample schedule.
pub fn run_paired(
    w: &MixingMatrix,
    loss: &LossModel,
    data: &FederatedDataset,
    swap: &Swap,
    config: &DsgdConfig,
) -> Result<PairedRun> {
    let other = data.swapped(swap.i, swap.j, swap.value.clone())?;
    let schedule =
        SampleSchedule::generate(config.seed, config.iterations, data.agents(), data.per_agent());
    let mut a = prepare(w, data, config)?;
    let mut b = a.clone();
    let (mut a_next, mut b_next) = (a.clone(), a.clone());
    let mut step_a = Stepper::new(w, loss, config.variant, config.projected, a.agents(), a.dim())?;
    let mut step_b = Stepper::new(w, loss, config.variant, config.projected, a.agents(), a.dim())?;

    let record = config.record_trajectory;
    let mut traj_a = record.then(|| vec![a.clone()]);
    let mut traj_b = record.then(|| vec![b.clone()]);
    let mut delta_trace = Vec::with_capacity(config.iterations + 1);
    delta_trace.push(a.distances(&b));
    let mut pa: Vec<&DataPoint> = Vec::with_capacity(data.agents());
    let mut pb: Vec<&DataPoint> = Vec::with_capacity(data.agents());
    for t in 0..config.iterations {
        pa.clear();
        pb.clear();
        for k in 0..data.agents() {
            let idx = schedule.index(t, k);
            pa.push(data.point(idx, k));
            pb.push(other.point(idx, k));
        }
        let eta = config.stepsize.at(t);
        step_a.step(&a, &pa, eta, &mut a_next);
        step_b.step(&b, &pb, eta, &mut b_next);
        std::mem::swap(&mut a, &mut a_next);
        std::mem::swap(&mut b, &mut b_next);
        delta_trace.push(a.distances(&b));
        if let (Some(ta), Some(tb)) = (traj_a.as_mut(), traj_b.as_mut()) {
            ta.push(a.clone());
            tb.push(b.clone());
        }
    }
    Ok(PairedRun {
        original: DsgdRun {
            average_final: a.average(),
            final_params: a,
            trajectory: traj_a,
            schedule: schedule.clone(),
        },
        swapped: DsgdRun {
            average_final: b.average(),
            final_params: b,
            trajectory: traj_b,
            schedule,
        },
        delta_trace,
    })
}
