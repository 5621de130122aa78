//! Monte Carlo estimators for on-average and worst-model stability, the
//! empirical generalization gap, and statistical checks of the descent and
//! local-optimization inequalities.
//!
//! Seeding: Monte Carlo draw `r` takes its dataset from
//! `derive(data_seed, [REPETITION, r, DATA])`, the replacement value for pair
//! `(i, j)` from `derive(data_seed, [REPETITION, r, SWAP, j, i])`, and its sample
//! schedule from `derive(algo.seed, [REPETITION, r])`. None of these depend on the
//! graph, so runs on different graphs share data and schedules. Draws run in
//! parallel; every reduction walks results in draw order.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{descent_terms, empirical_sigma, link_bound};
use crate::datagen::{fresh_swap_value, partition, sample, MixtureSpec};
use crate::engine::{run, run_with_schedule, DsgdConfig, DsgdRun, FederatedDataset, Stepsize};
use crate::losses::{distance, DataPoint, LossConstants, LossModel};
use crate::rng::{derive_seed, tag, Stream};
use crate::topology::MixingMatrix;
use crate::{Error, Result};

/// Copy of `data` with point `i` of agent `j` replaced by `value`.
pub fn swap_dataset(data: &FederatedDataset, i: usize, j: usize, value: DataPoint) -> Result<FederatedDataset> {
    data.swapped(i, j, value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMode {
    /// `|theta_bar(S) - theta_bar(S^(ij))|` on the averaged final iterate.
    AveragedIterate,
    /// `(1/m) sum_k |theta_k(S) - theta_k(S^(ij))|`.
    PerAgentMean,
    /// `max_k |theta_k(S) - theta_k(S^(ij))|`.
    WorstModel,
}

impl StabilityMode {
    pub const ALL: [StabilityMode; 3] = [
        StabilityMode::AveragedIterate,
        StabilityMode::PerAgentMean,
        StabilityMode::WorstModel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StabilityMode::AveragedIterate => "averaged_iterate",
            StabilityMode::PerAgentMean => "per_agent_mean",
            StabilityMode::WorstModel => "worst_model",
        }
    }

    fn displacement(&self, a: &DsgdRun, b: &DsgdRun) -> f64 {
        match self {
            StabilityMode::AveragedIterate => distance(&a.average_final, &b.average_final),
            StabilityMode::PerAgentMean => {
                let d = a.final_params.distances(&b.final_params);
                d.iter().sum::<f64>() / d.len() as f64
            }
            StabilityMode::WorstModel => a
                .final_params
                .distances(&b.final_params)
                .into_iter()
                .fold(0.0, f64::max),
        }
    }
}

impl fmt::Display for StabilityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StabilityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StabilityMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("stability.modes", format!("unknown mode `{s}`")))
    }
}

/// Which `(i, j)` pairs enter the average.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairSelection {
    /// All `m n` pairs.
    Full,
    /// `k` distinct pairs drawn uniformly, redrawn for every Monte Carlo draw.
    Sampled(usize),
    /// A fixed list of `(i, j)` = (sample index, agent index).
    Explicit(Vec<(usize, usize)>),
}

impl PairSelection {
    fn resolve(&self, m: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
        let pairs = match self {
            PairSelection::Full => (0..m).flat_map(|j| (0..n).map(move |i| (i, j))).collect(),
            PairSelection::Sampled(k) => {
                if *k > m * n {
                    return Err(Error::invalid(
                        "stability.pair_subset_size",
                        format!("{k} exceeds the m*n = {} available pairs", m * n),
                    ));
                }
                let mut all: Vec<(usize, usize)> =
                    (0..m).flat_map(|j| (0..n).map(move |i| (i, j))).collect();
                let mut stream = Stream::new(seed);
                for s in 0..*k {
                    let pick = s + stream.index(all.len() - s);
                    all.swap(s, pick);
                }
                all.truncate(*k);
                all
            }
            PairSelection::Explicit(list) => {
                if let Some(&(i, j)) = list.iter().find(|&&(i, j)| i >= n || j >= m) {
                    return Err(Error::IndexOutOfRange(format!(
                        "pair ({i}, {j}) outside {n} samples x {m} agents"
                    )));
                }
                list.clone()
            }
        };
        if pairs.is_empty() {
            return Err(Error::invalid("stability.pair_subset_size", "empty pair subset"));
        }
        Ok(pairs)
    }
}

/// Monte Carlo protocol shared by every estimator in this module.
#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarlo {
    pub spec: MixtureSpec,
    /// Samples per agent.
    pub n: usize,
    /// Algorithm settings; `algo.seed` is the base of the schedule seeds.
    pub algo: DsgdConfig,
    pub num_mc: usize,
    pub data_seed: u64,
}

impl MonteCarlo {
    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.algo.stepsize.validate()?;
        if self.num_mc == 0 {
            return Err(Error::invalid("stability.num_mc", "must be >= 1"));
        }
        if self.n == 0 {
            return Err(Error::invalid("data.n", "must be >= 1"));
        }
        Ok(())
    }

    fn draw_seed(&self, r: usize) -> u64 {
        derive_seed(self.data_seed, &[tag::REPETITION, r as u64])
    }

    /// Training set of draw `r` for `m` agents.
    pub fn dataset(&self, m: usize, r: usize) -> Result<FederatedDataset> {
        let seed = derive_seed(self.draw_seed(r), &[tag::DATA]);
        partition(sample(&self.spec, m * self.n, seed), m, self.n)
    }

    fn swap_value(&self, r: usize, i: usize, j: usize) -> DataPoint {
        fresh_swap_value(
            &self.spec,
            derive_seed(self.draw_seed(r), &[tag::SWAP, j as u64, i as u64]),
        )
    }

    /// Algorithm settings of draw `r` (the schedule seed is draw-specific).
    pub fn config(&self, r: usize) -> DsgdConfig {
        DsgdConfig {
            seed: derive_seed(self.algo.seed, &[tag::REPETITION, r as u64]),
            ..self.algo.clone()
        }
    }

    fn pair_seed(&self, r: usize) -> u64 {
        derive_seed(self.algo.seed, &[tag::REPETITION, r as u64, tag::PAIRS])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StabilityEstimate {
    pub mode: StabilityMode,
    pub epsilon_hat: f64,
    pub std_error: f64,
    pub num_pairs: usize,
    pub num_mc: usize,
    /// Loss constants over every point used (datasets and replacements) across
    /// all draws; the values the closed-form bounds should be evaluated with.
    pub observed: LossConstants,
}

/// Sample mean and standard error (sample standard deviation over `sqrt(len)`;
/// zero for a single value).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn merge_constants(a: LossConstants, b: LossConstants) -> LossConstants {
    LossConstants {
        lipschitz: a.lipschitz.max(b.lipschitz),
        smoothness: a.smoothness.max(b.smoothness),
        strong_convexity: a.strong_convexity,
    }
}

struct DrawOutcome {
    /// Pair-averaged displacement, one per requested mode.
    per_mode: Vec<f64>,
    num_pairs: usize,
    constants: LossConstants,
}

fn stability_draw(
    w: &MixingMatrix,
    loss: &LossModel,
    mc: &MonteCarlo,
    pairs: &PairSelection,
    modes: &[StabilityMode],
    r: usize,
) -> Result<DrawOutcome> {
    let m = w.size();
    let data = mc.dataset(m, r)?;
    let config = DsgdConfig {
        record_trajectory: false,
        ..mc.config(r)
    };
    let base = run(w, loss, &data, &config)?;
    let pairs = pairs.resolve(m, mc.n, mc.pair_seed(r))?;
    let mut sums = vec![0.0; modes.len()];
    let mut points = data.flatten();
    for &(i, j) in &pairs {
        let value = mc.swap_value(r, i, j);
        points.push(value.clone());
        let swapped = swap_dataset(&data, i, j, value)?;
        let other = run_with_schedule(w, loss, &swapped, &config, base.schedule.clone())?;
        for (s, mode) in sums.iter_mut().zip(modes) {
            *s += mode.displacement(&base, &other);
        }
    }
    Ok(DrawOutcome {
        per_mode: sums.iter().map(|s| s / pairs.len() as f64).collect(),
        num_pairs: pairs.len(),
        constants: loss.constants(&points),
    })
}

/// Estimates every requested mode from one shared set of coupled runs.
pub fn estimate_stability(
    w: &MixingMatrix,
    loss: &LossModel,
    mc: &MonteCarlo,
    pairs: &PairSelection,
    modes: &[StabilityMode],
) -> Result<Vec<StabilityEstimate>> {
    mc.validate()?;
    if modes.is_empty() {
        return Err(Error::invalid("stability.modes", "no mode requested"));
    }
    let draws: Vec<DrawOutcome> = (0..mc.num_mc)
        .into_par_iter()
        .map(|r| stability_draw(w, loss, mc, pairs, modes, r))
        .collect::<Result<_>>()?;
    let observed = draws
        .iter()
        .map(|d| d.constants)
        .reduce(merge_constants)
        .expect("num_mc >= 1");
    Ok(modes
        .iter()
        .enumerate()
        .map(|(idx, &mode)| {
            let values: Vec<f64> = draws.iter().map(|d| d.per_mode[idx]).collect();
            let (epsilon_hat, std_error) = mean_and_stderr(&values);
            StabilityEstimate {
                mode,
                epsilon_hat,
                std_error,
                num_pairs: draws[0].num_pairs,
                num_mc: mc.num_mc,
                observed,
            }
        })
        .collect())
}

/// On-average model stability in `AveragedIterate` or `PerAgentMean` mode.
pub fn estimate_on_average_stability(
    w: &MixingMatrix,
    loss: &LossModel,
    mc: &MonteCarlo,
    pairs: &PairSelection,
    mode: StabilityMode,
) -> Result<StabilityEstimate> {
    if mode == StabilityMode::WorstModel {
        return Err(Error::invalid(
            "stability.modes",
            "worst_model is not an on-average mode",
        ));
    }
    Ok(estimate_stability(w, loss, mc, pairs, &[mode])?[0])
}

pub fn estimate_worst_model_stability(
    w: &MixingMatrix,
    loss: &LossModel,
    mc: &MonteCarlo,
    pairs: &PairSelection,
) -> Result<StabilityEstimate> {
    Ok(estimate_stability(w, loss, mc, pairs, &[StabilityMode::WorstModel])?[0])
}

/// Protocol of the generalization-gap experiment: `reps` train/test datasets,
/// `runs` algorithm runs per dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GenExperiment {
    pub spec: MixtureSpec,
    pub n: usize,
    pub algo: DsgdConfig,
    pub reps: usize,
    pub runs: usize,
    pub test_size: usize,
    pub data_seed: u64,
}

/// Signed gap trace of one (rep, run).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapTrace {
    pub rep: usize,
    pub run: usize,
    /// `(1/m) sum_k [R_test(theta_k^t) - R_S(theta_k^t)]` for `t = 0..=T`.
    pub gaps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenError {
    /// Absolute value of the signed gap averaged over all reps and runs.
    pub per_iteration: Vec<f64>,
    /// Standard error per `t`, from the per-rep mean signed gaps.
    pub std_error: Vec<f64>,
    pub final_value: f64,
    pub reps: usize,
    pub runs: usize,
    /// Per-rep signed gaps averaged over runs, `[rep][t]`.
    pub rep_means: Vec<Vec<f64>>,
    pub traces: Vec<GapTrace>,
}

impl GenExperiment {
    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.algo.stepsize.validate()?;
        for (name, v) in [
            ("genexp.reps", self.reps),
            ("genexp.runs", self.runs),
            ("genexp.test_size", self.test_size),
            ("data.n", self.n),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        Ok(())
    }

    fn rep_seed(&self, rep: usize) -> u64 {
        derive_seed(self.data_seed, &[tag::REPETITION, rep as u64])
    }
}

fn gap_traces(
    w: &MixingMatrix,
    loss: &LossModel,
    exp: &GenExperiment,
    rep: usize,
) -> Result<Vec<GapTrace>> {
    let m = w.size();
    let rep_seed = exp.rep_seed(rep);
    let train = sample(&exp.spec, m * exp.n, derive_seed(rep_seed, &[tag::DATA]));
    let test = sample(&exp.spec, exp.test_size, derive_seed(rep_seed, &[tag::TEST]));
    let data = partition(train.clone(), m, exp.n)?;
    (0..exp.runs)
        .map(|run_idx| {
            let config = DsgdConfig {
                seed: derive_seed(exp.algo.seed, &[tag::REPETITION, rep as u64, tag::RUN, run_idx as u64]),
                record_trajectory: true,
                ..exp.algo.clone()
            };
            let result = run(w, loss, &data, &config)?;
            let gaps = result
                .trajectory
                .expect("trajectory recorded")
                .iter()
                .map(|snap| {
                    snap.rows()
                        .map(|theta| loss.risk(theta, &test) - loss.risk(theta, &train))
                        .sum::<f64>()
                        / m as f64
                })
                .collect();
            Ok(GapTrace {
                rep,
                run: run_idx,
                gaps,
            })
        })
        .collect()
}

/// Runs the full protocol and summarizes it: signed gaps are averaged over
/// every (rep, run) before taking the absolute value.
pub fn estimate_generalization(w: &MixingMatrix, loss: &LossModel, exp: &GenExperiment) -> Result<GenError> {
    exp.validate()?;
    let per_rep: Vec<Vec<GapTrace>> = (0..exp.reps)
        .into_par_iter()
        .map(|rep| gap_traces(w, loss, exp, rep))
        .collect::<Result<_>>()?;
    let len = exp.algo.iterations + 1;
    let rep_means: Vec<Vec<f64>> = per_rep
        .iter()
        .map(|traces| {
            (0..len)
                .map(|t| traces.iter().map(|tr| tr.gaps[t]).sum::<f64>() / traces.len() as f64)
                .collect()
        })
        .collect();
    let mut per_iteration = Vec::with_capacity(len);
    let mut std_error = Vec::with_capacity(len);
    for t in 0..len {
        let column: Vec<f64> = rep_means.iter().map(|r| r[t]).collect();
        let (mean, se) = mean_and_stderr(&column);
        per_iteration.push(mean.abs());
        std_error.push(se);
    }
    Ok(GenError {
        final_value: per_iteration[len - 1],
        per_iteration,
        std_error,
        reps: exp.reps,
        runs: exp.runs,
        rep_means,
        traces: per_rep.into_iter().flatten().collect(),
    })
}

/// Fraction of `resamples` bootstrap resamples of the repetitions on which
/// `predicate` holds. The predicate receives, per experiment, the absolute mean
/// gap at iteration `t` over the resampled repetitions. All experiments must
/// share their repetitions (same data seeds); one index draw resamples them
/// jointly.
pub fn bootstrap_fraction<F>(
    experiments: &[&GenError],
    t: usize,
    resamples: usize,
    seed: u64,
    predicate: F,
) -> Result<f64>
where
    F: Fn(&[f64]) -> bool,
{
    let reps = experiments.first().map(|e| e.reps).unwrap_or(0);
    if reps == 0 || experiments.iter().any(|e| e.reps != reps || e.rep_means.len() != reps) {
        return Err(Error::invalid("bootstrap", "experiments must share a positive number of repetitions"));
    }
    if resamples == 0 || experiments.iter().any(|e| t >= e.per_iteration.len()) {
        return Err(Error::invalid("bootstrap", "iteration out of range or no resamples"));
    }
    let mut stream = Stream::derived(seed, &[tag::BOOTSTRAP]);
    let mut sums = vec![0.0; experiments.len()];
    let mut hits = 0usize;
    for _ in 0..resamples {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for _ in 0..reps {
            let r = stream.index(reps);
            for (s, e) in sums.iter_mut().zip(experiments) {
                *s += e.rep_means[r][t];
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| (s / reps as f64).abs()).collect();
        if predicate(&means) {
            hits += 1;
        }
    }
    Ok(hits as f64 / resamples as f64)
}

/// Bootstrap fraction of `|gap of a| < |gap of b|` at iteration `t`.
pub fn bootstrap_ordering(a: &GenError, b: &GenError, t: usize, resamples: usize, seed: u64) -> Result<f64> {
    bootstrap_fraction(&[a, b], t, resamples, seed, |g| g[0] < g[1])
}

/// Monte Carlo comparison of a per-draw left side against a per-draw right side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanCheck {
    pub lhs_mean: f64,
    pub lhs_stderr: f64,
    pub rhs_mean: f64,
    pub rhs_stderr: f64,
    pub num_mc: usize,
}

impl MeanCheck {
    fn from_samples(lhs: &[f64], rhs: &[f64]) -> Self {
        let (lhs_mean, lhs_stderr) = mean_and_stderr(lhs);
        let (rhs_mean, rhs_stderr) = mean_and_stderr(rhs);
        MeanCheck {
            lhs_mean,
            lhs_stderr,
            rhs_mean,
            rhs_stderr,
            num_mc: lhs.len(),
        }
    }

    pub fn combined_stderr(&self) -> f64 {
        self.lhs_stderr.hypot(self.rhs_stderr)
    }

    /// `lhs_mean <= rhs_mean + sigmas * combined_stderr`.
    pub fn holds(&self, sigmas: f64) -> bool {
        self.lhs_mean <= self.rhs_mean + sigmas * self.combined_stderr()
    }
}

fn constant_eta(stepsize: Stepsize) -> Result<f64> {
    match stepsize {
        Stepsize::Constant(eta) if eta > 0.0 => Ok(eta),
        _ => Err(Error::invalid("algo.eta", "needs a positive constant stepsize")),
    }
}

/// Telescoped descent inequality: left side is the gradient energy, right side
/// `2 (risk decrease) + T beta sigma^2 eta^2 + consensus`, with `sigma` the
/// per-draw trajectory value from [`empirical_sigma`] and `beta` the smoothness
/// over that draw's data.
pub fn descent_lemma_check(w: &MixingMatrix, loss: &LossModel, mc: &MonteCarlo) -> Result<MeanCheck> {
    mc.validate()?;
    let eta = constant_eta(mc.algo.stepsize)?;
    let m = w.size();
    let pairs: Vec<(f64, f64)> = (0..mc.num_mc)
        .into_par_iter()
        .map(|r| {
            let data = mc.dataset(m, r)?;
            let config = DsgdConfig {
                record_trajectory: true,
                ..mc.config(r)
            };
            let traj = run(w, loss, &data, &config)?.trajectory.expect("trajectory recorded");
            let beta = loss.constants(&data.flatten()).smoothness;
            let sigma = empirical_sigma(loss, &data, &traj);
            let terms = descent_terms(loss, &data, w, &traj, eta, beta, sigma)?;
            Ok((terms.gradient_energy, terms.rhs()))
        })
        .collect::<Result<_>>()?;
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(MeanCheck::from_samples(&lhs, &rhs))
}

/// Local-optimization link: left side is the signed final gap
/// `(1/m) sum_k [R_test(theta_k^T) - R_S(theta_k^T)]` on a fresh test set of
/// `test_size` points, right side the trajectory bound from [`link_bound`] with
/// per-draw `L` and `sigma`. Check `holds` on both the gap and its negation via
/// [`LinkCheck`].
pub fn link_lemma_check(w: &MixingMatrix, loss: &LossModel, mc: &MonteCarlo, test_size: usize) -> Result<LinkCheck> {
    mc.validate()?;
    if test_size == 0 {
        return Err(Error::invalid("genexp.test_size", "must be >= 1"));
    }
    let m = w.size();
    let samples: Vec<(f64, f64)> = (0..mc.num_mc)
        .into_par_iter()
        .map(|r| {
            let data = mc.dataset(m, r)?;
            let test = sample(&mc.spec, test_size, derive_seed(mc.draw_seed(r), &[tag::TEST]));
            let config = DsgdConfig {
                record_trajectory: true,
                ..mc.config(r)
            };
            let traj = run(w, loss, &data, &config)?.trajectory.expect("trajectory recorded");
            let train = data.flatten();
            let last = traj.last().expect("initial snapshot present");
            let gap = last
                .rows()
                .map(|theta| loss.risk(theta, &test) - loss.risk(theta, &train))
                .sum::<f64>()
                / m as f64;
            let mut all = train;
            all.extend(test);
            let lipschitz = loss.constants(&all).lipschitz;
            let sigma = empirical_sigma(loss, &data, &traj);
            Ok((gap, link_bound(loss, &data, &traj, mc.algo.stepsize, lipschitz, sigma)))
        })
        .collect::<Result<_>>()?;
    let (gap, bound): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
    Ok(LinkCheck {
        gap: MeanCheck::from_samples(&gap, &bound),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinkCheck {
    /// Signed gap (lhs) against the bound (rhs).
    pub gap: MeanCheck,
}

impl LinkCheck {
    /// `|mean gap| <= mean bound + sigmas * combined stderr`.
    pub fn holds(&self, sigmas: f64) -> bool {
        self.gap.lhs_mean.abs() <= self.gap.rhs_mean + sigmas * self.gap.combined_stderr()
    }
}
