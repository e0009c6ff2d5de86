//! Column-stochastic mixing matrices, their windowed products, the push-sum
//! scaling vector and the row-stochastic view `R(k) = S(k+1)^-1 A(k) S(k)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graphs::{Digraph, GraphSequence};

/// Absolute tolerance for row/column stochasticity checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Default lower bound on any scaling entry before the run is declared broken.
pub const DEFAULT_SCALING_FLOOR: f64 = 1e-300;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MixingError {
    #[error("scaling entry s_{agent}({k}) = {value:e} fell below the floor {floor:e}")]
    ScalingBelowFloor { k: usize, agent: usize, value: f64, floor: f64 },
    #[error("scaling requested at k = {k} but only computed through {computed}")]
    ScalingNotComputed { k: usize, computed: usize },
    #[error("window of length {b} ending at k = {k} reaches before iteration 0")]
    WindowBeforeStart { k: usize, b: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    k: usize,
}

impl MixingMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// Iteration index this matrix was built for.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn max_column_sum_error(&self) -> f64 {
        self.entries.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// `A_jj = A_ij = 1/(d_j^out + 1)` for every edge `(j, i)`, zero elsewhere.
pub fn build_mixing_matrix(g: &Digraph, k: usize) -> MixingMatrix {
    let n = g.n_agents();
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let w = 1.0 / (g.out_degree(j) as f64 + 1.0);
        a[(j, j)] = w;
        for i in g.out_neighbors(j) {
            a[(i, j)] = w;
        }
    }
    MixingMatrix { entries: a, k }
}

pub fn mixing_at(seq: &GraphSequence, k: usize) -> MixingMatrix {
    build_mixing_matrix(&seq.graph_at(k), k)
}

/// Ordered product `A(k) A(k-1) ... A(k+1-b)`.
///
/// Factors with a negative index are the identity, so `k < 0` or `b = 0`
/// yields the identity.
pub fn matrix_product_window(seq: &GraphSequence, k: i64, b: usize) -> DMatrix<f64> {
    let n = seq.n_agents();
    let mut out = DMatrix::identity(n, n);
    for t in 0..b as i64 {
        let idx = k - t;
        if idx < 0 {
            break;
        }
        out *= mixing_at(seq, idx as usize).into_entries();
    }
    out
}

/// Push-sum scaling vectors `s(0) = 1, s(k+1) = A(k) s(k)` for `k <= horizon`.
#[derive(Clone, Debug)]
pub struct ScalingTrajectory {
    s: Vec<DVector<f64>>,
}

impl ScalingTrajectory {
    pub fn horizon(&self) -> usize {
        self.s.len() - 1
    }

    pub fn s(&self, k: usize) -> Result<&DVector<f64>, MixingError> {
        self.s.get(k).ok_or(MixingError::ScalingNotComputed { k, computed: self.horizon() })
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.s.iter()
    }

    /// Wraps externally recorded scaling vectors (e.g. from an engine trace).
    pub fn from_vectors(s: Vec<DVector<f64>>) -> Self {
        assert!(!s.is_empty(), "scaling trajectory needs s(0)");
        Self { s }
    }
}

pub fn push_sum_scaling(seq: &GraphSequence, horizon: usize, floor: f64) -> Result<ScalingTrajectory, MixingError> {
    let n = seq.n_agents();
    let mut s = Vec::with_capacity(horizon + 1);
    s.push(DVector::from_element(n, 1.0));
    for k in 0..horizon {
        let next = mixing_at(seq, k).entries() * &s[k];
        if let Some((agent, &value)) = next.iter().enumerate().find(|(_, v)| !(**v >= floor)) {
            return Err(MixingError::ScalingBelowFloor { k: k + 1, agent: agent + 1, value, floor });
        }
        s.push(next);
    }
    Ok(ScalingTrajectory { s })
}

/// `R(k) = S(k+1)^-1 A(k) S(k)`.
pub fn row_normalized(seq: &GraphSequence, scaling: &ScalingTrajectory, k: usize) -> Result<DMatrix<f64>, MixingError> {
    let s_now = scaling.s(k)?;
    let s_next = scaling.s(k + 1)?;
    let a = mixing_at(seq, k).into_entries();
    Ok(scale_rows_cols(a, s_next, s_now))
}

/// `S_left^-1 M S_right`.
fn scale_rows_cols(mut m: DMatrix<f64>, s_left: &DVector<f64>, s_right: &DVector<f64>) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] *= s_right[j] / s_left[i];
        }
    }
    m
}

/// `R_t(k) = S(k+1)^-1 A_t(k) S(k+1-t)`, requiring `k + 1 >= t`.
pub fn row_normalized_window(
    seq: &GraphSequence,
    scaling: &ScalingTrajectory,
    k: usize,
    t: usize,
) -> Result<DMatrix<f64>, MixingError> {
    if t > k + 1 {
        return Err(MixingError::WindowBeforeStart { k, b: t });
    }
    let a = matrix_product_window(seq, k as i64, t);
    Ok(scale_rows_cols(a, scaling.s(k + 1)?, scaling.s(k + 1 - t)?))
}

pub fn max_row_sum_error(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
}

/// `I - (1/N) 1 1^T`.
pub fn disagreement_projector(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n) - averaging_projector(n)
}

/// `(1/N) 1 1^T`.
pub fn averaging_projector(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0 / n as f64)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Consensus-contraction constants for windows of `b` iterations over a
/// `b0`-connected sequence of `n_agents` agents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConsensusConstants {
    pub tau: f64,
    pub q1: f64,
    pub delta: f64,
    pub b: usize,
    pub b0: usize,
    pub n_agents: usize,
    /// False for a single agent, where the formulas divide by zero.
    pub applicable: bool,
}

impl ConsensusConstants {
    pub fn is_valid(&self) -> bool {
        self.applicable && self.delta < 1.0
    }

    /// Smallest window length with `delta < 1` (may be `f64::INFINITY` once
    /// `tau^(N B0)` underflows).
    pub fn min_valid_window(n_agents: usize, b0: usize) -> f64 {
        if n_agents < 2 {
            return f64::INFINITY;
        }
        let (ln_q1, ln_contract) = log_terms(n_agents, b0);
        if ln_contract == 0.0 {
            return f64::INFINITY;
        }
        // delta < 1  <=>  (B - 1)/(N B0) * ln_contract < -ln_q1
        let nb0 = (n_agents * b0) as f64;
        (1.0 + (-ln_q1 / ln_contract) * nb0).floor() + 1.0
    }
}

/// Returns `(ln Q1, ln(1 - tau^(N B0)))`, evaluated in log space so that large
/// `N B0` neither overflows `tau^-(N B0)` nor loses `1 - tau^(N B0)`.
fn log_terms(n_agents: usize, b0: usize) -> (f64, f64) {
    let n = n_agents as f64;
    let nb0 = (n_agents * b0) as f64;
    let ln_tau = -(2.0 + nb0) * n.ln();
    let ln_t = nb0 * ln_tau; // ln tau^(N B0) < 0
    let t = ln_t.exp();
    // ln(1 + tau^-(N B0)) = softplus(-ln_t)
    let ln_one_plus_inv = -ln_t + (ln_t.exp()).ln_1p();
    let ln_q1 = (2.0 * n).ln() + ln_one_plus_inv - (-t).ln_1p();
    (ln_q1, (-t).ln_1p())
}

pub fn consensus_constants(n_agents: usize, b0: usize, b: usize) -> ConsensusConstants {
    assert!(n_agents >= 1 && b0 >= 1 && b >= 1, "all arguments must be positive");
    if n_agents == 1 {
        return ConsensusConstants {
            tau: 1.0,
            q1: f64::INFINITY,
            delta: f64::INFINITY,
            b,
            b0,
            n_agents,
            applicable: false,
        };
    }
    let n = n_agents as f64;
    let nb0 = (n_agents * b0) as f64;
    let tau = (-(2.0 + nb0) * n.ln()).exp();
    let (ln_q1, ln_contract) = log_terms(n_agents, b0);
    let ln_delta = ln_q1 + (b as f64 - 1.0) / nb0 * ln_contract;
    ConsensusConstants { tau, q1: ln_q1.exp(), delta: ln_delta.exp(), b, b0, n_agents, applicable: true }
}

/// Exact operator norm of `R_b(k)` restricted to the disagreement subspace:
/// `|| (I - J) R_b(k) (I - J) ||`.
pub fn contraction_factor_exact(
    seq: &GraphSequence,
    scaling: &ScalingTrajectory,
    k: usize,
    b: usize,
) -> Result<f64, MixingError> {
    let n = seq.n_agents();
    if n == 1 {
        return Ok(0.0);
    }
    let p = disagreement_projector(n);
    let r = row_normalized_window(seq, scaling, k, b)?;
    Ok(spectral_norm(&(&p * r * &p)))
}

/// Monte-Carlo estimate of `max ||(I-J) R_b(k) y|| / ||(I-J) y||` over
/// `trials` random unit vectors.
pub fn contraction_factor_empirical(
    seq: &GraphSequence,
    scaling: &ScalingTrajectory,
    k: usize,
    b: usize,
    trials: usize,
    seed: u64,
) -> Result<f64, MixingError> {
    let n = seq.n_agents();
    if n == 1 {
        return Ok(0.0);
    }
    let p = disagreement_projector(n);
    let pr = &p * row_normalized_window(seq, scaling, k, b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let norm = y.norm();
        if norm == 0.0 {
            continue;
        }
        y /= norm;
        let violation = (&p * &y).norm();
        if violation <= f64::EPSILON {
            continue;
        }
        worst = worst.max((&pr * &y).norm() / violation);
    }
    Ok(worst)
}

/// Dense row-major CSV, full precision.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in m.row_iter() {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{make_random_sequence, make_ring};
    use approx::assert_abs_diff_eq;

    #[test]
    fn cycle_mixing_matrix() {
        let a = build_mixing_matrix(&Digraph::from_one_based(3, &[(1, 2), (2, 3), (3, 1)]).unwrap(), 0);
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(3, 3, &[
            0.5, 0.0, 0.5,
            0.5, 0.5, 0.0,
            0.0, 0.5, 0.5,
        ]);
        assert_eq!(a.entries(), &expected);
    }

    #[test]
    fn single_agent_matrix_is_one() {
        let a = build_mixing_matrix(&Digraph::empty(1).unwrap(), 0);
        assert_eq!(a.entries(), &DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn two_agent_complete_graph_is_all_halves() {
        let a = build_mixing_matrix(&Digraph::from_one_based(2, &[(1, 2), (2, 1)]).unwrap(), 0);
        assert_eq!(a.entries(), &DMatrix::from_element(2, 2, 0.5));
    }

    #[test]
    fn product_window_conventions() {
        let seq = make_ring(3).unwrap();
        assert_eq!(matrix_product_window(&seq, 4, 0), DMatrix::identity(3, 3));
        assert_eq!(matrix_product_window(&seq, -1, 2), DMatrix::identity(3, 3));
        let a = mixing_at(&seq, 0).into_entries();
        #[rustfmt::skip]
        let squared = DMatrix::from_row_slice(3, 3, &[
            0.25, 0.25, 0.5,
            0.5, 0.25, 0.25,
            0.25, 0.5, 0.25,
        ]);
        assert_eq!(&a * &a, squared);
        assert_eq!(matrix_product_window(&seq, 1, 2), squared);
    }

    #[test]
    fn cycle_scaling_stays_uniform() {
        let seq = make_ring(3).unwrap();
        let sc = push_sum_scaling(&seq, 20, DEFAULT_SCALING_FLOOR).unwrap();
        for s in sc.iter() {
            assert_eq!(s, &DVector::from_element(3, 1.0));
        }
        assert_eq!(row_normalized(&seq, &sc, 5).unwrap(), mixing_at(&seq, 5).into_entries());
    }

    #[test]
    fn scaling_floor_is_reported() {
        let seq = make_random_sequence(5, 0.4, 2, 100, 3).unwrap();
        let err = push_sum_scaling(&seq, 10, 2.0).unwrap_err();
        assert!(matches!(err, MixingError::ScalingBelowFloor { .. }));
    }

    #[test]
    fn random_sequence_row_sums() {
        let seq = make_random_sequence(5, 0.5, 1, 100, 7).unwrap();
        let sc = push_sum_scaling(&seq, 10, DEFAULT_SCALING_FLOOR).unwrap();
        let r = row_normalized(&seq, &sc, 3).unwrap();
        assert!(max_row_sum_error(&r) <= STOCHASTIC_TOL);
        assert_abs_diff_eq!(sc.s(10).unwrap().sum(), 5.0, epsilon = 1e-10);
    }

    #[test]
    fn constants_at_small_sizes() {
        let c = consensus_constants(2, 1, 1);
        assert_abs_diff_eq!(c.tau, 0.0625, epsilon = 1e-15);
        // Q1 = 4 (1 + 256) / (1 - 1/256)
        assert_abs_diff_eq!(c.q1, 4.0 * 257.0 / (255.0 / 256.0), epsilon = 1e-9);
        let c5 = consensus_constants(5, 1, 1);
        assert_abs_diff_eq!(c5.tau, 5f64.powi(-7), epsilon = 1e-20);
        assert!(!consensus_constants(1, 1, 1).applicable);
        assert!(!consensus_constants(1, 1, 1).is_valid());
    }

    #[test]
    fn delta_matches_direct_formula() {
        let (n, b0, b) = (2usize, 1usize, 4000usize);
        let tau = 1.0 / (n as f64).powi(2 + (n * b0) as i32);
        let t = tau.powi((n * b0) as i32);
        let q1 = 2.0 * n as f64 * (1.0 + 1.0 / t) / (1.0 - t);
        let delta = q1 * (1.0 - t).powf((b as f64 - 1.0) / (n * b0) as f64);
        let c = consensus_constants(n, b0, b);
        assert!((c.delta - delta).abs() <= 1e-12 * delta);
        assert!(c.is_valid());
        assert!(!consensus_constants(n, b0, 3000).is_valid());
        let bmin = ConsensusConstants::min_valid_window(n, b0);
        assert!(consensus_constants(n, b0, bmin as usize).is_valid());
        assert!(!consensus_constants(n, b0, bmin as usize - 1).is_valid());
    }

    #[test]
    fn single_agent_contraction_is_zero() {
        let seq = make_ring(1).unwrap();
        let sc = push_sum_scaling(&seq, 5, DEFAULT_SCALING_FLOOR).unwrap();
        assert_eq!(contraction_factor_empirical(&seq, &sc, 3, 2, 10, 0).unwrap(), 0.0);
    }

    #[test]
    fn empirical_never_exceeds_exact() {
        let seq = make_random_sequence(5, 0.4, 2, 100, 11).unwrap();
        let sc = push_sum_scaling(&seq, 30, DEFAULT_SCALING_FLOOR).unwrap();
        for k in 3..20 {
            let exact = contraction_factor_exact(&seq, &sc, k, 4).unwrap();
            let mc = contraction_factor_empirical(&seq, &sc, k, 4, 200, k as u64).unwrap();
            assert!(mc <= exact * (1.0 + 1e-12), "k={k}: {mc} > {exact}");
        }
    }

    #[test]
    fn csv_export_shape() {
        let csv = matrix_to_csv(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.25, 0.0]));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "1.0000000000000000e0,5.0000000000000000e-1");
    }
}
