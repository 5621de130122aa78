//! Doubly stochastic gossip matrices and the graph quantities entering the bounds.
//!
//! All diagnostics that need a spectrum (spectral gap, smallest eigenvalue, the
//! decentralization constant `C_W`) are only defined for symmetric matrices, whose
//! eigenvalues are real and whose operator 2-norm equals the spectral radius.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row/column sum tolerance for double stochasticity.
pub const STOCHASTIC_TOL: f64 = 1e-9;
/// Maximum `|W - W^T|` entry for a matrix to be flagged symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Default truncation threshold for the `C_W` series terms.
pub const CW_TOL: f64 = 1e-12;
/// Default maximum number of `C_W` series terms.
pub const CW_MAX_TERMS: usize = 10_000;
/// Eigenvalues within this distance of 1 are treated as exactly 1.
const UNIT_EIGEN_TOL: f64 = 1e-12;

/// An `m x m` doubly stochastic weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    weights: DMatrix<f64>,
    symmetric: bool,
}

/// Outcome of checking a candidate weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub tolerance: f64,
    /// `sum_j W_kj - 1` for every row `k`.
    pub row_deviations: Vec<f64>,
    /// `sum_k W_kj - 1` for every column `j`.
    pub col_deviations: Vec<f64>,
    /// Entries outside `[0, 1]` (or non-finite), as `(row, col, value)`.
    pub range_violations: Vec<(usize, usize, f64)>,
    pub square: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.square
            && self.range_violations.is_empty()
            && self
                .row_deviations
                .iter()
                .chain(&self.col_deviations)
                .all(|d| d.abs() <= self.tolerance)
    }

    pub fn max_sum_deviation(&self) -> f64 {
        self.row_deviations
            .iter()
            .chain(&self.col_deviations)
            .fold(0.0, |acc: f64, d| acc.max(d.abs()))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.square {
            return write!(f, "matrix is not square");
        }
        write!(
            f,
            "max row/col sum deviation {:.3e} (tol {:.0e}), {} entries outside [0,1]",
            self.max_sum_deviation(),
            self.tolerance,
            self.range_violations.len()
        )
    }
}

/// Checks row sums, column sums and entry range of an arbitrary matrix.
pub fn validate_weights(weights: &DMatrix<f64>) -> ValidationReport {
    let square = weights.nrows() == weights.ncols();
    let row_deviations = weights.row_iter().map(|r| r.sum() - 1.0).collect();
    let col_deviations = weights.column_iter().map(|c| c.sum() - 1.0).collect();
    let mut range_violations = Vec::new();
    for k in 0..weights.nrows() {
        for j in 0..weights.ncols() {
            let w = weights[(k, j)];
            if !(0.0..=1.0).contains(&w) {
                range_violations.push((k, j, w));
            }
        }
    }
    ValidationReport {
        tolerance: STOCHASTIC_TOL,
        row_deviations,
        col_deviations,
        range_violations,
        square,
    }
}

/// Neumaier summation; the result is the correctly rounded sum for column maxima.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn max_asymmetry(weights: &DMatrix<f64>) -> f64 {
    let m = weights.nrows();
    let mut worst: f64 = 0.0;
    for k in 0..m {
        for j in (k + 1)..m {
            worst = worst.max((weights[(k, j)] - weights[(j, k)]).abs());
        }
    }
    worst
}

impl MixingMatrix {
    /// Wraps a weight matrix, rejecting it unless it passes [`validate_weights`].
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        let report = validate_weights(&weights);
        if !report.passed() {
            return Err(Error::NotDoublyStochastic(report.to_string()));
        }
        let symmetric = max_asymmetry(&weights) <= SYMMETRY_TOL;
        Ok(MixingMatrix { weights, symmetric })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::NotDoublyStochastic("matrix is not square".into()));
        }
        Self::new(DMatrix::from_fn(m, m, |k, j| rows[k][j]))
    }

    /// Complete graph, every weight `1/m`.
    pub fn complete_uniform(m: usize) -> Result<Self> {
        check_agents(m, 1)?;
        Self::new(DMatrix::from_element(m, m, 1.0 / m as f64))
    }

    /// No communication: `m` independent local SGD runs.
    pub fn identity(m: usize) -> Result<Self> {
        check_agents(m, 1)?;
        Self::new(DMatrix::identity(m, m))
    }

    /// Cycle with self-loops, weight `1/3` on self and both neighbours.
    pub fn ring(m: usize) -> Result<Self> {
        check_agents(m, 3)?;
        let third = 1.0 / 3.0;
        let w = DMatrix::from_fn(m, m, |k, j| {
            let d = (k + m - j) % m;
            if d == 0 || d == 1 || d == m - 1 {
                third
            } else {
                0.0
            }
        });
        Self::new(w)
    }

    /// Complete graph with diagonal `self_weight` and off-diagonal
    /// `(1 - self_weight)/(m - 1)`; requires `self_weight` in `[1/m, 1)`.
    pub fn lazy_complete(m: usize, self_weight: f64) -> Result<Self> {
        check_agents(m, 2)?;
        let lower = 1.0 / m as f64;
        if !(self_weight >= lower && self_weight < 1.0) {
            return Err(Error::invalid(
                "self_weight",
                format!("{self_weight} outside [1/m, 1) = [{lower}, 1)"),
            ));
        }
        let off = (1.0 - self_weight) / (m - 1) as f64;
        Self::new(DMatrix::from_fn(m, m, |k, j| {
            if k == j {
                self_weight
            } else {
                off
            }
        }))
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.weights[(k, j)]
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn validate(&self) -> ValidationReport {
        validate_weights(&self.weights)
    }

    /// `W^t`, re-validated as doubly stochastic.
    pub fn power(&self, t: u32) -> Result<Self> {
        let m = self.size();
        let mut result = DMatrix::identity(m, m);
        let mut base = self.weights.clone();
        let mut e = t;
        while e > 0 {
            if e & 1 == 1 {
                result = &result * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        Self::new(result)
    }

    /// `sum_j max_k W_kj`.
    pub fn connectivity_sum(&self) -> f64 {
        compensated_sum(
            self.weights
                .column_iter()
                .map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
        )
    }

    /// `max_kj W_kj`.
    pub fn max_norm(&self) -> f64 {
        self.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `min_k W_kk`.
    pub fn min_diag(&self) -> f64 {
        self.weights
            .diagonal()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    fn require_symmetric(&self, what: &'static str) -> Result<()> {
        if self.symmetric {
            Ok(())
        } else {
            Err(Error::NotSymmetric {
                what,
                asymmetry: max_asymmetry(&self.weights),
            })
        }
    }

    /// Real eigenvalues in decreasing order (symmetric matrices only).
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.require_symmetric("eigenvalue computation")?;
        let eig = SymmetricEigen::new(self.weights.clone());
        let mut values: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(values)
    }

    /// Full diagnostics table; the matrix must be symmetric.
    pub fn diagnostics(&self, cw_tol: f64, cw_max_terms: usize) -> Result<TopologyDiagnostics> {
        if !(cw_tol > 0.0) {
            return Err(Error::invalid("cw_tol", "must be positive"));
        }
        self.require_symmetric("spectral gap and C_W")?;
        let eigen = self.eigenvalues()?;
        let spectral_gap = spectral_gap_from(&eigen);
        let smallest_eigenvalue = *eigen.last().expect("m >= 1");
        let cw = cw_series(&eigen, cw_tol, cw_max_terms);
        Ok(TopologyDiagnostics {
            m: self.size(),
            spectral_gap,
            max_norm: self.max_norm(),
            connectivity_sum: self.connectivity_sum(),
            min_diag: self.min_diag(),
            smallest_eigenvalue,
            cw_limit: *cw.partial_sums.last().expect("partial sums start at 0"),
            cw_partial_sums: cw.partial_sums,
            cw_converged: cw.converged,
        })
    }

    /// Diagnostics with the default `C_W` truncation (`1e-12`, 10 000 terms).
    pub fn default_diagnostics(&self) -> Result<TopologyDiagnostics> {
        self.diagnostics(CW_TOL, CW_MAX_TERMS)
    }
}

fn check_agents(m: usize, min: usize) -> Result<()> {
    if m < min {
        Err(Error::invalid("m", format!("need at least {min} agents, got {m}")))
    } else {
        Ok(())
    }
}

/// `1 - |lambda_2|` with eigenvalues ordered by modulus. A single agent has no
/// second eigenvalue and is assigned gap 1 (it is trivially in consensus).
fn spectral_gap_from(eigen: &[f64]) -> f64 {
    let mut moduli: Vec<f64> = eigen.iter().map(|l| l.abs()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    match moduli.get(1) {
        Some(second) => (1.0 - second).clamp(0.0, 1.0),
        None => 1.0,
    }
}

struct CwSeries {
    partial_sums: Vec<f64>,
    converged: bool,
}

/// Partial sums of `a_s = max_{lambda != 1} |lambda|^s |1 - lambda|`, which equals
/// `||W^s - W^{s+1}||_2` for symmetric `W`.
fn cw_series(eigen: &[f64], tol: f64, max_terms: usize) -> CwSeries {
    let nonunit: Vec<f64> = eigen
        .iter()
        .cloned()
        .filter(|l| (1.0 - l).abs() > UNIT_EIGEN_TOL)
        .collect();
    let mut powers: Vec<f64> = vec![1.0; nonunit.len()];
    let mut partial_sums = vec![0.0];
    let mut total = 0.0;
    for _ in 0..max_terms {
        let term = nonunit
            .iter()
            .zip(&powers)
            .map(|(l, p)| p * (1.0 - l).abs())
            .fold(0.0, f64::max);
        total += term;
        partial_sums.push(total);
        if term < tol {
            return CwSeries {
                partial_sums,
                converged: true,
            };
        }
        for (p, l) in powers.iter_mut().zip(&nonunit) {
            *p *= l.abs();
        }
    }
    CwSeries {
        partial_sums,
        converged: false,
    }
}

/// Graph-dependent quantities used by the bound evaluators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyDiagnostics {
    pub m: usize,
    /// `rho = 1 - |lambda_2(W)|`.
    pub spectral_gap: f64,
    /// `||W||_max = max_kj W_kj`.
    pub max_norm: f64,
    /// `sum_j max_k W_kj`.
    pub connectivity_sum: f64,
    pub min_diag: f64,
    /// `lambda_m`, the smallest eigenvalue.
    pub smallest_eigenvalue: f64,
    /// `C_W^(t)` for `t = 0, 1, ..`; starts at 0.
    pub cw_partial_sums: Vec<f64>,
    pub cw_limit: f64,
    pub cw_converged: bool,
}

/// Named graph families used in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphKind {
    Identity,
    Complete,
    Ring,
    LazyComplete { self_weight: f64 },
}

impl GraphKind {
    /// Parses `identity`, `complete`, `ring` or `lazy_complete`; the latter takes
    /// its self weight from `self_weight`.
    pub fn parse(name: &str, self_weight: Option<f64>) -> Result<Self> {
        match name {
            "identity" => Ok(GraphKind::Identity),
            "complete" => Ok(GraphKind::Complete),
            "ring" => Ok(GraphKind::Ring),
            "lazy_complete" => self_weight
                .map(|self_weight| GraphKind::LazyComplete { self_weight })
                .ok_or(Error::MissingConstant("graph.self_weight")),
            other => Err(Error::invalid(
                "graph.kind",
                format!("unknown graph kind `{other}`"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GraphKind::Identity => "identity",
            GraphKind::Complete => "complete",
            GraphKind::Ring => "ring",
            GraphKind::LazyComplete { .. } => "lazy_complete",
        }
    }

    pub fn build(&self, m: usize) -> Result<MixingMatrix> {
        match *self {
            GraphKind::Identity => MixingMatrix::identity(m),
            GraphKind::Complete => MixingMatrix::complete_uniform(m),
            GraphKind::Ring => MixingMatrix::ring(m),
            GraphKind::LazyComplete { self_weight } => {
                MixingMatrix::lazy_complete(m, self_weight)
            }
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Dense oracle: `||W^s - W^{s+1}||_2` through an eigen-decomposition of the
    /// explicit difference matrix, summed up to `terms`.
    fn cw_dense_oracle(w: &MixingMatrix, terms: u32) -> f64 {
        (0..terms)
            .map(|s| {
                let diff = w.power(s).unwrap().weights - w.power(s + 1).unwrap().weights;
                SymmetricEigen::new(diff)
                    .eigenvalues
                    .iter()
                    .fold(0.0f64, |a, l| a.max(l.abs()))
            })
            .sum()
    }

    #[test]
    fn complete_uniform_entries() {
        let w = MixingMatrix::complete_uniform(2).unwrap();
        assert_eq!(w.weights().as_slice(), &[0.5; 4]);
        let w1 = MixingMatrix::complete_uniform(1).unwrap();
        assert_eq!(w1.weights()[(0, 0)], 1.0);
        let w20 = MixingMatrix::complete_uniform(20).unwrap();
        assert!(w20.weights().iter().all(|&x| x == 0.05));
        assert!(w20.is_symmetric());
        assert!(MixingMatrix::complete_uniform(0).is_err());
    }

    #[test]
    fn identity_diagnostics() {
        let w = MixingMatrix::identity(3).unwrap();
        assert_eq!(w.weights(), &DMatrix::<f64>::identity(3, 3));
        let d = w.default_diagnostics().unwrap();
        assert_eq!(d.spectral_gap, 0.0);
        assert_eq!(d.cw_limit, 0.0);
        assert!(d.cw_partial_sums.iter().all(|&c| c == 0.0));
        assert!(d.cw_converged);
        assert_eq!(d.connectivity_sum, 3.0);
        assert_eq!(d.max_norm, 1.0);
    }

    #[test]
    fn ring_structure_and_golden_values() {
        let w = MixingMatrix::ring(4).unwrap();
        let third = 1.0 / 3.0;
        let row: Vec<f64> = w.weights().row(0).iter().cloned().collect();
        assert_eq!(row, vec![third, third, 0.0, third]);
        assert!(MixingMatrix::ring(2).is_err());

        // Circulant oracle: lambda_k = (1 + 2 cos(2 pi k / m)) / 3.
        let mut circulant: Vec<f64> = (0..4)
            .map(|k| (1.0 + 2.0 * (2.0 * std::f64::consts::PI * k as f64 / 4.0).cos()) / 3.0)
            .collect();
        circulant.sort_by(|a, b| b.total_cmp(a));
        let dense = w.eigenvalues().unwrap();
        for (a, b) in circulant.iter().zip(&dense) {
            assert!(close(*a, *b, 1e-12));
        }

        let d = w.default_diagnostics().unwrap();
        assert!(close(d.spectral_gap, 2.0 / 3.0, 1e-9));
        assert!(close(d.cw_limit, 2.0, 1e-9));
        assert!(d.cw_converged);
        // Truncated dense-norm series agrees with the eigenvalue route.
        assert!(close(cw_dense_oracle(&w, 40), 2.0, 1e-6));
    }

    #[test]
    fn complete_uniform_diagnostics() {
        for m in [2, 5, 20] {
            let d = MixingMatrix::complete_uniform(m)
                .unwrap()
                .default_diagnostics()
                .unwrap();
            assert!(close(d.spectral_gap, 1.0, 1e-9));
            assert!(close(d.cw_limit, 1.0, 1e-9));
            assert!(close(d.cw_partial_sums[1], 1.0, 1e-9));
            assert!(close(d.connectivity_sum, 1.0, 1e-12));
            assert!(close(d.max_norm, 1.0 / m as f64, 1e-15));
        }
    }

    #[test]
    fn lazy_complete_construction() {
        let w = MixingMatrix::lazy_complete(20, 0.95).unwrap();
        assert_eq!(w.get(0, 0), 0.95);
        assert!(close(w.get(0, 1), 0.05 / 19.0, 1e-15));
        assert!(w.validate().passed());
        let two = MixingMatrix::lazy_complete(2, 0.5).unwrap();
        assert_eq!(two, MixingMatrix::complete_uniform(2).unwrap());
        assert!(MixingMatrix::lazy_complete(20, 1.0).is_err());
        assert!(MixingMatrix::lazy_complete(4, 0.2).is_err());
        assert!(MixingMatrix::lazy_complete(1, 0.5).is_err());
    }

    #[test]
    fn validation_reports() {
        let ok = MixingMatrix::complete_uniform(4).unwrap();
        assert!(ok.validate().passed());

        let bad = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.1, 0.8]);
        let report = validate_weights(&bad);
        assert!(!report.passed());
        assert!(close(report.row_deviations[0], 0.1, 1e-12));
        assert!(close(report.row_deviations[1], -0.1, 1e-12));
        assert!(MixingMatrix::new(bad).is_err());

        let negative = DMatrix::from_row_slice(2, 2, &[1.5, -0.5, -0.5, 1.5]);
        let report = validate_weights(&negative);
        assert_eq!(report.range_violations.len(), 4);

        let ring = MixingMatrix::ring(5).unwrap();
        for t in 1..=10 {
            assert!(ring.power(t).unwrap().validate().passed());
        }
    }

    #[test]
    fn complete_connectivity_sum_is_exact() {
        for m in 1..=300 {
            let c = MixingMatrix::complete_uniform(m).unwrap();
            let exact = m as f64 * (1.0 / m as f64);
            assert!((c.connectivity_sum() - exact).abs() <= f64::EPSILON, "m = {m}");
        }
    }

    #[test]
    fn matrix_powers() {
        let ring = MixingMatrix::ring(4).unwrap();
        assert_eq!(ring.power(0).unwrap(), MixingMatrix::identity(4).unwrap());
        // Direct product oracle for the first row of ring(4)^2.
        let w = ring.weights();
        let direct: Vec<f64> = (0..4)
            .map(|j| (0..4).map(|l| w[(0, l)] * w[(l, j)]).sum())
            .collect();
        let sq = ring.power(2).unwrap();
        let expected = [1.0 / 3.0, 2.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0];
        for j in 0..4 {
            assert!(close(sq.get(0, j), direct[j], 1e-15));
            assert!(close(sq.get(0, j), expected[j], 1e-14));
        }
        let c = MixingMatrix::complete_uniform(6).unwrap();
        for t in 1..5 {
            let p = c.power(t).unwrap();
            for (a, b) in p.weights().iter().zip(c.weights().iter()) {
                assert!(close(*a, *b, 1e-15));
            }
        }
    }

    #[test]
    fn asymmetric_rejected_for_spectral_quantities() {
        // A doubly stochastic permutation-like mix that is not symmetric.
        let w = MixingMatrix::from_rows(&[
            vec![0.5, 0.5, 0.0],
            vec![0.0, 0.5, 0.5],
            vec![0.5, 0.0, 0.5],
        ])
        .unwrap();
        assert!(!w.is_symmetric());
        let err = w.default_diagnostics().unwrap_err();
        assert!(matches!(err, Error::NotSymmetric { .. }));
        assert!(err.to_string().contains("symmetric"));
        // Structural quantities stay available.
        assert_eq!(w.connectivity_sum(), 1.5);
        assert_eq!(w.min_diag(), 0.5);
    }

    #[test]
    fn bipartite_cw_reports_non_convergence() {
        // Eigenvalue -1 makes every series term equal to 2.
        let swap = MixingMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let d = swap.diagnostics(1e-12, 50).unwrap();
        assert!(!d.cw_converged);
        assert_eq!(d.cw_partial_sums.len(), 51);
        assert!(close(d.spectral_gap, 0.0, 1e-12));
    }

    #[test]
    fn single_agent_is_degenerate_but_valid() {
        let d = MixingMatrix::identity(1)
            .unwrap()
            .default_diagnostics()
            .unwrap();
        assert_eq!(d.spectral_gap, 1.0);
        assert_eq!(d.cw_limit, 0.0);
        assert_eq!(d.connectivity_sum, 1.0);
    }

    #[test]
    fn graph_kind_parsing() {
        assert_eq!(GraphKind::parse("ring", None).unwrap(), GraphKind::Ring);
        assert!(GraphKind::parse("lazy_complete", None).is_err());
        let err = GraphKind::parse("torus", None).unwrap_err();
        assert!(err.to_string().contains("graph.kind"));
    }
}
