//! Push-DIGing iteration, the DGD and subgradient-push baselines, and the
//! inexact gradient descent recursion used by the rate audits.
//!
//! Stacked quantities are `N x n` matrices, one row per agent.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::graphs::{Digraph, GraphSequence};
use crate::mixing::{mixing_at, MixingMatrix, DEFAULT_SCALING_FLOOR};
use crate::objectives::{resolve_optimum, stacked_gradient, ObjectiveSuite};

/// A run is declared divergent once `residual_q` exceeds this multiple of its
/// initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EngineError {
    #[error("step-size vector is empty")]
    NoStepSizes,
    #[error("step-size alpha_{index} = {value} must be positive and finite")]
    BadStepSize { index: usize, value: f64 },
    #[error("step-size vector length {found} does not match the {expected} agents")]
    StepSizeLength { found: usize, expected: usize },
    #[error("initial iterate has shape {rows}x{cols}, expected {n_agents}x{dimension}")]
    InitialShape { rows: usize, cols: usize, n_agents: usize, dimension: usize },
    #[error("graph sequence has {graph} agents but the objective suite has {suite}")]
    AgentMismatch { graph: usize, suite: usize },
    #[error("scaling entry s_{agent}({k}) = {value:e} fell below the floor {floor:e}")]
    ScalingBelowFloor { k: usize, agent: usize, value: f64, floor: f64 },
    #[error("diverged at iteration {k}: {reason}")]
    Diverged { k: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    PushDiging,
    Dgd,
    PushSum,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PushDiging => "push-diging",
            Algorithm::Dgd => "dgd",
            Algorithm::PushSum => "push-sum",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-agent constant step-sizes, the diagonal of `D`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepSizes {
    alphas: Vec<f64>,
}

impl StepSizes {
    pub fn new(alphas: Vec<f64>) -> Result<Self, EngineError> {
        if alphas.is_empty() {
            return Err(EngineError::NoStepSizes);
        }
        if let Some((i, &v)) = alphas.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(EngineError::BadStepSize { index: i + 1, value: v });
        }
        Ok(Self { alphas })
    }

    pub fn uniform(n: usize, alpha: f64) -> Result<Self, EngineError> {
        Self::new(vec![alpha; n])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alpha_max(&self) -> f64 {
        self.alphas.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn alpha_min(&self) -> f64 {
        self.alphas.iter().copied().fold(f64::MAX, f64::min)
    }

    pub fn alpha_mean(&self) -> f64 {
        self.alphas.iter().sum::<f64>() / self.alphas.len() as f64
    }

    /// Condition number `alpha_max / alpha_min`.
    pub fn k_d(&self) -> f64 {
        self.alpha_max() / self.alpha_min()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, EngineError> {
        Self::new(self.alphas.iter().map(|a| a * factor).collect())
    }
}

/// Iterate quadruple `(p, s, x, y)` at iteration `k`, with the gradients at
/// `x(k)` cached for the next tracking update.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub k: usize,
    pub p: DMatrix<f64>,
    pub s: DVector<f64>,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    grad: DMatrix<f64>,
}

impl NetworkState {
    pub fn gradients(&self) -> &DMatrix<f64> {
        &self.grad
    }

    /// `h(k) = S(k)^-1 y(k)`.
    pub fn scaled_tracker(&self) -> DMatrix<f64> {
        divide_rows(&self.y, &self.s)
    }
}

fn divide_rows(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row /= s[i];
    }
    out
}

fn scale_rows(m: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= d[i];
    }
    out
}

fn check_x0(suite: &ObjectiveSuite, x0: &DMatrix<f64>) -> Result<(), EngineError> {
    if x0.nrows() != suite.n_agents() || x0.ncols() != suite.dimension() {
        return Err(EngineError::InitialShape {
            rows: x0.nrows(),
            cols: x0.ncols(),
            n_agents: suite.n_agents(),
            dimension: suite.dimension(),
        });
    }
    Ok(())
}

/// `p = x = x0`, `s = 1`, `y = grad F(x0)`.
pub fn init_state(suite: &ObjectiveSuite, x0: &DMatrix<f64>) -> Result<NetworkState, EngineError> {
    check_x0(suite, x0)?;
    let grad = stacked_gradient(suite, x0);
    Ok(NetworkState {
        k: 0,
        p: x0.clone(),
        s: DVector::from_element(x0.nrows(), 1.0),
        x: x0.clone(),
        y: grad.clone(),
        grad,
    })
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// One synchronous Push-DIGing update, applied in the order p, s, x, y.
pub fn push_diging_step(
    state: &NetworkState,
    a: &MixingMatrix,
    d: &StepSizes,
    suite: &ObjectiveSuite,
    scaling_floor: f64,
) -> Result<NetworkState, EngineError> {
    if d.len() != state.p.nrows() {
        return Err(EngineError::StepSizeLength { found: d.len(), expected: state.p.nrows() });
    }
    let a = a.entries();
    let k = state.k + 1;
    let p = a * (&state.p - scale_rows(&state.y, d.alphas()));
    let s = a * &state.s;
    if let Some((agent, &value)) = s.iter().enumerate().find(|(_, v)| !(**v >= scaling_floor)) {
        return Err(EngineError::ScalingBelowFloor { k, agent: agent + 1, value, floor: scaling_floor });
    }
    let x = divide_rows(&p, &s);
    if !all_finite(&x) {
        return Err(EngineError::Diverged { k, reason: "non-finite iterate".into() });
    }
    let grad = stacked_gradient(suite, &x);
    let y = a * (&state.y + &grad - &state.grad);
    if !all_finite(&y) || !all_finite(&grad) {
        return Err(EngineError::Diverged { k, reason: "non-finite gradient tracker".into() });
    }
    Ok(NetworkState { k, p, s, x, y, grad })
}

/// `R(k) = S(k+1)^-1 A(k) S(k)` and `h(k) = S(k)^-1 y(k)` for a consecutive
/// pair of states.
pub fn transformed_view(prev: &NetworkState, next: &NetworkState, a: &MixingMatrix) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = prev.s.len();
    let mut r = a.entries().clone();
    for i in 0..n {
        for j in 0..n {
            r[(i, j)] *= prev.s[j] / next.s[i];
        }
    }
    (r, prev.scaled_tracker())
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub max_iters: usize,
    /// Stop early once `residual_q <= stop_residual`; 0 runs the full horizon.
    pub stop_residual: f64,
    /// Record `s`, `y`, `h` and `z` per iteration for the gain-chain audit.
    pub record_aux: bool,
    pub scaling_floor: f64,
    /// Optimum used for residuals; resolved from the suite when `None`.
    pub x_star: Option<DVector<f64>>,
}

impl RunOptions {
    pub fn new(max_iters: usize) -> Self {
        Self { max_iters, stop_residual: 0.0, record_aux: false, scaling_floor: DEFAULT_SCALING_FLOOR, x_star: None }
    }

    pub fn with_aux(mut self) -> Self {
        self.record_aux = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub k: usize,
    /// Agent-major flattening of the `N x n` iterate.
    pub x: Vec<f64>,
    /// `||x(k) - 1 x*||`
    pub residual_q: f64,
    /// `||(I - J) x(k)||`
    pub consensus_violation: f64,
    /// `sum_i ||x_i(k) - x*|| / ||x_i(0) - x*||`
    pub fig1_metric: f64,
    /// `||mean_i y_i(k) - mean_i grad f_i(x_i(k))||`; NaN for algorithms without a tracker.
    pub tracking_error: f64,
}

/// Auxiliary per-iteration quantities of a Push-DIGing run.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxRow {
    pub s: DVector<f64>,
    pub y: DMatrix<f64>,
    /// `h(k) = S(k)^-1 y(k)`
    pub h: DMatrix<f64>,
    /// `z(k) = grad F(x(k)) - grad F(x(k-1))`, zero at `k = 0`.
    pub z: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub algorithm: Algorithm,
    pub n_agents: usize,
    pub dimension: usize,
    pub x_star: DVector<f64>,
    pub rows: Vec<TraceRow>,
    pub aux: Option<Vec<AuxRow>>,
}

impl Trace {
    /// Iterate of agent-major row `k` reshaped to `N x n`.
    pub fn x_at(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_agents, self.dimension, &self.rows[k].x)
    }

    pub fn final_row(&self) -> &TraceRow {
        self.rows.last().expect("trace always holds the initial row")
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["k".to_string()];
        for i in 1..=self.n_agents {
            if self.dimension == 1 {
                cols.push(format!("x_{i}"));
            } else {
                cols.extend((1..=self.dimension).map(|d| format!("x_{i}_{d}")));
            }
        }
        cols.extend(["residual_q", "consensus_violation", "fig1_metric", "tracking_error"].map(String::from));
        cols.join(",")
    }

    /// CSV with a fixed header and 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.k.to_string());
            for v in
                row.x.iter().chain([&row.residual_q, &row.consensus_violation, &row.fig1_metric, &row.tracking_error])
            {
                out.push(',');
                out.push_str(&format_full(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// 17 significant digits in scientific notation.
pub fn format_full(v: f64) -> String {
    format!("{v:.16e}")
}

struct Metrics<'a> {
    x_star: &'a DVector<f64>,
    initial_dist: Vec<f64>,
    divergence_threshold: f64,
}

impl<'a> Metrics<'a> {
    fn new(x0: &DMatrix<f64>, x_star: &'a DVector<f64>) -> Self {
        let initial_dist: Vec<f64> = (0..x0.nrows()).map(|i| (x0.row(i).transpose() - x_star).norm()).collect();
        let r0 = residual(x0, x_star);
        let scale = if r0 > 0.0 { r0 } else { 1.0 };
        Self { x_star, initial_dist, divergence_threshold: DIVERGENCE_FACTOR * scale }
    }

    fn row(&self, k: usize, x: &DMatrix<f64>, tracking_error: f64) -> TraceRow {
        let n = x.nrows();
        let mean = x.row_mean();
        let mut violation = 0.0;
        let mut fig1 = 0.0;
        for i in 0..n {
            violation += (x.row(i) - &mean).norm_squared();
            let d0 = self.initial_dist[i];
            // Agents that start exactly at the optimum carry no relative error.
            if d0 > 0.0 {
                fig1 += (x.row(i).transpose() - self.x_star).norm() / d0;
            }
        }
        let mut flat = Vec::with_capacity(x.len());
        for i in 0..n {
            flat.extend(x.row(i).iter().copied());
        }
        TraceRow {
            k,
            x: flat,
            residual_q: residual(x, self.x_star),
            consensus_violation: violation.sqrt(),
            fig1_metric: fig1,
            tracking_error,
        }
    }

    fn check(&self, row: &TraceRow) -> Result<(), EngineError> {
        if !row.residual_q.is_finite() {
            return Err(EngineError::Diverged { k: row.k, reason: "non-finite residual".into() });
        }
        if row.residual_q > self.divergence_threshold {
            return Err(EngineError::Diverged {
                k: row.k,
                reason: format!(
                    "residual {:.3e} exceeds {:.0e} times its initial value",
                    row.residual_q, DIVERGENCE_FACTOR
                ),
            });
        }
        Ok(())
    }
}

/// `||x - 1 x*||`
pub fn residual(x: &DMatrix<f64>, x_star: &DVector<f64>) -> f64 {
    (0..x.nrows()).map(|i| (x.row(i).transpose() - x_star).norm_squared()).sum::<f64>().sqrt()
}

fn tracking_error(state: &NetworkState) -> f64 {
    (state.y.row_mean() - state.grad.row_mean()).norm()
}

fn check_agents(seq: &GraphSequence, suite: &ObjectiveSuite) -> Result<(), EngineError> {
    if seq.n_agents() != suite.n_agents() {
        return Err(EngineError::AgentMismatch { graph: seq.n_agents(), suite: suite.n_agents() });
    }
    Ok(())
}

pub fn run_push_diging(
    seq: &GraphSequence,
    suite: &ObjectiveSuite,
    d: &StepSizes,
    x0: &DMatrix<f64>,
    opts: &RunOptions,
) -> Result<Trace, EngineError> {
    check_agents(seq, suite)?;
    if d.len() != suite.n_agents() {
        return Err(EngineError::StepSizeLength { found: d.len(), expected: suite.n_agents() });
    }
    let x_star = opts.x_star.clone().unwrap_or_else(|| resolve_optimum(suite));
    let metrics = Metrics::new(x0, &x_star);
    let mut state = init_state(suite, x0)?;
    let mut rows = vec![metrics.row(0, &state.x, tracking_error(&state))];
    let mut aux = opts.record_aux.then(|| {
        vec![AuxRow {
            s: state.s.clone(),
            y: state.y.clone(),
            h: state.scaled_tracker(),
            z: DMatrix::zeros(x0.nrows(), x0.ncols()),
        }]
    });
    for k in 0..opts.max_iters {
        if opts.stop_residual > 0.0 && rows[k].residual_q <= opts.stop_residual {
            break;
        }
        let a = mixing_at(seq, k);
        let next = push_diging_step(&state, &a, d, suite, opts.scaling_floor)?;
        let row = metrics.row(next.k, &next.x, tracking_error(&next));
        metrics.check(&row)?;
        if let Some(aux) = aux.as_mut() {
            aux.push(AuxRow {
                s: next.s.clone(),
                y: next.y.clone(),
                h: next.scaled_tracker(),
                z: next.gradients() - state.gradients(),
            });
        }
        rows.push(row);
        state = next;
    }
    Ok(Trace {
        algorithm: Algorithm::PushDiging,
        n_agents: suite.n_agents(),
        dimension: suite.dimension(),
        x_star,
        rows,
        aux,
    })
}

/// Metropolis weights of the symmetrized graph (doubly stochastic).
pub fn metropolis_weights(g: &Digraph) -> DMatrix<f64> {
    let sym = g.symmetrized();
    let n = sym.n_agents();
    let deg: Vec<usize> = (0..n).map(|i| sym.out_degree(i)).collect();
    let mut w = DMatrix::zeros(n, n);
    for (i, j) in sym.edges() {
        w[(i, j)] = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    w
}

/// Diminishing step `alpha0 / sqrt(k + 1)`.
pub fn diminishing_step(alpha0: f64, k: usize) -> f64 {
    alpha0 / ((k + 1) as f64).sqrt()
}

fn check_alpha0(alpha0: f64) -> Result<(), EngineError> {
    if !(alpha0 >= 0.0 && alpha0.is_finite()) {
        return Err(EngineError::BadStepSize { index: 1, value: alpha0 });
    }
    Ok(())
}

/// `x(k+1) = W(k) x(k) - alpha_k grad F(x(k))`.
pub fn run_dgd_baseline(
    seq: &GraphSequence,
    suite: &ObjectiveSuite,
    alpha0: f64,
    x0: &DMatrix<f64>,
    opts: &RunOptions,
) -> Result<Trace, EngineError> {
    check_agents(seq, suite)?;
    check_x0(suite, x0)?;
    check_alpha0(alpha0)?;
    let x_star = opts.x_star.clone().unwrap_or_else(|| resolve_optimum(suite));
    let metrics = Metrics::new(x0, &x_star);
    let mut x = x0.clone();
    let mut rows = vec![metrics.row(0, &x, f64::NAN)];
    for k in 0..opts.max_iters {
        if opts.stop_residual > 0.0 && rows[k].residual_q <= opts.stop_residual {
            break;
        }
        let w = metropolis_weights(&seq.graph_at(k));
        x = &w * &x - stacked_gradient(suite, &x) * diminishing_step(alpha0, k);
        let row = metrics.row(k + 1, &x, f64::NAN);
        metrics.check(&row)?;
        rows.push(row);
    }
    Ok(Trace {
        algorithm: Algorithm::Dgd,
        n_agents: suite.n_agents(),
        dimension: suite.dimension(),
        x_star,
        rows,
        aux: None,
    })
}

/// Subgradient-push: `w(k+1) = A(k)(w(k) - alpha_k g(k))`, `s(k+1) = A(k) s(k)`,
/// `x = S^-1 w`, with `g(k)` the gradients at `x(k)`.
pub fn run_push_sum_baseline(
    seq: &GraphSequence,
    suite: &ObjectiveSuite,
    alpha0: f64,
    x0: &DMatrix<f64>,
    opts: &RunOptions,
) -> Result<Trace, EngineError> {
    check_agents(seq, suite)?;
    check_x0(suite, x0)?;
    check_alpha0(alpha0)?;
    let x_star = opts.x_star.clone().unwrap_or_else(|| resolve_optimum(suite));
    let metrics = Metrics::new(x0, &x_star);
    let mut w = x0.clone();
    let mut s = DVector::from_element(x0.nrows(), 1.0);
    let mut x = x0.clone();
    let mut rows = vec![metrics.row(0, &x, f64::NAN)];
    for k in 0..opts.max_iters {
        if opts.stop_residual > 0.0 && rows[k].residual_q <= opts.stop_residual {
            break;
        }
        let a = mixing_at(seq, k);
        let g = stacked_gradient(suite, &x);
        w = a.entries() * (&w - g * diminishing_step(alpha0, k));
        s = a.entries() * &s;
        if let Some((agent, &value)) = s.iter().enumerate().find(|(_, v)| !(**v >= opts.scaling_floor)) {
            return Err(EngineError::ScalingBelowFloor {
                k: k + 1,
                agent: agent + 1,
                value,
                floor: opts.scaling_floor,
            });
        }
        x = divide_rows(&w, &s);
        let row = metrics.row(k + 1, &x, f64::NAN);
        metrics.check(&row)?;
        rows.push(row);
    }
    Ok(Trace {
        algorithm: Algorithm::PushSum,
        n_agents: suite.n_agents(),
        dimension: suite.dimension(),
        x_star,
        rows,
        aux: None,
    })
}

/// Output of [`inexact_gd_run`]. `v`, `r`, `u` and `e` all hold `iters + 1`
/// entries; the last `u` and `e` are evaluated but not applied.
#[derive(Clone, Debug)]
pub struct InexactRun {
    pub v: Vec<DVector<f64>>,
    pub r: Vec<f64>,
    pub u: Vec<DMatrix<f64>>,
    pub e: Vec<DVector<f64>>,
    pub v_star: DVector<f64>,
}

/// `v_{k+1} = v_k - theta (1/N) sum_i grad g_i(u_i(k)) + e_k`, with
/// `r_k = ||v_k - v*||`.
///
/// `eval_points(k, v_k)` returns the `N x n` matrix of `u_i(k)`; `noise(k)`
/// returns `e_k`.
pub fn inexact_gd_run(
    suite: &ObjectiveSuite,
    theta: f64,
    noise: &mut dyn FnMut(usize) -> DVector<f64>,
    eval_points: &mut dyn FnMut(usize, &DVector<f64>) -> DMatrix<f64>,
    v0: &DVector<f64>,
    iters: usize,
) -> InexactRun {
    let v_star = resolve_optimum(suite);
    let n = suite.n_agents() as f64;
    let mut v = vec![v0.clone()];
    let mut r = vec![(v0 - &v_star).norm()];
    let mut u = Vec::with_capacity(iters + 1);
    let mut e = Vec::with_capacity(iters + 1);
    for k in 0..=iters {
        let uk = eval_points(k, &v[k]);
        let ek = noise(k);
        if k < iters {
            let grads = stacked_gradient(suite, &uk);
            let avg = grads.row_sum().transpose() / n;
            let next = &v[k] - avg * theta + &ek;
            r.push((&next - &v_star).norm());
            v.push(next);
        }
        u.push(uk);
        e.push(ek);
    }
    InexactRun { v, r, u, e, v_star }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{make_periodic_partition, make_ring};
    use crate::mixing::build_mixing_matrix;
    use crate::objectives::{make_sensor_suite, optimal_point};
    use approx::assert_abs_diff_eq;

    const A: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
    const B: [f64; 5] = [3.33, 1.67, 1.11, 0.83, 0.67];
    const C: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
    const D: [f64; 5] = [0.035, 0.015, 0.025, 0.045, 0.055];

    fn sensor() -> ObjectiveSuite {
        make_sensor_suite(&A, &B, &C).unwrap()
    }

    fn x0() -> DMatrix<f64> {
        DMatrix::from_column_slice(5, 1, &[0.1, 0.9, 0.3, 0.5, 0.7])
    }

    #[test]
    fn step_sizes_validate() {
        assert_eq!(StepSizes::new(vec![]), Err(EngineError::NoStepSizes));
        assert_eq!(StepSizes::new(vec![0.1, 0.0]), Err(EngineError::BadStepSize { index: 2, value: 0.0 }));
        let d = StepSizes::new(D.to_vec()).unwrap();
        assert_eq!(d.alpha_max(), 0.055);
        assert_eq!(d.alpha_min(), 0.015);
        assert_abs_diff_eq!(d.k_d(), 0.055 / 0.015);
        assert_abs_diff_eq!(d.alpha_mean(), 0.035, epsilon = 1e-15);
    }

    #[test]
    fn init_state_examples() {
        let s = sensor();
        let st = init_state(&s, &x0()).unwrap();
        assert_eq!(st.p, x0());
        assert_eq!(st.s, DVector::from_element(5, 1.0));
        assert_eq!(st.y, stacked_gradient(&s, &x0()));

        let star = optimal_point(&s).unwrap()[0];
        let at_opt = init_state(&s, &DMatrix::from_element(5, 1, star)).unwrap();
        assert!(at_opt.y.iter().any(|v| v.abs() > 1e-3));
        assert_abs_diff_eq!(at_opt.y.row_mean()[0], 0.0, epsilon = 1e-14);

        assert!(matches!(init_state(&s, &DMatrix::zeros(4, 1)), Err(EngineError::InitialShape { .. })));
    }

    #[test]
    fn single_agent_step_is_gradient_descent() {
        let s = make_sensor_suite(&[0.0], &[2.0], &[0.4]).unwrap();
        let d = StepSizes::new(vec![0.3]).unwrap();
        let a = build_mixing_matrix(&Digraph::empty(1).unwrap(), 0);
        let st = init_state(&s, &DMatrix::from_element(1, 1, 1.4)).unwrap();
        let next = push_diging_step(&st, &a, &d, &s, DEFAULT_SCALING_FLOOR).unwrap();
        // 1.4 - 0.3 * (1.4 - 0.4)
        assert_abs_diff_eq!(next.x[(0, 0)], 1.1, epsilon = 1e-15);
    }

    #[test]
    fn fixed_point_one_step() {
        // Start at consensus on x* on the 3-agent cycle.
        let s = make_sensor_suite(&[0.0; 3], &[1.0, 2.0, 4.0], &[0.0, 1.0, 2.0]).unwrap();
        let star = optimal_point(&s).unwrap()[0];
        let d = StepSizes::new(vec![0.1, 0.2, 0.05]).unwrap();
        let seq = make_ring(3).unwrap();
        let st = init_state(&s, &DMatrix::from_element(3, 1, star)).unwrap();
        let next = push_diging_step(&st, &mixing_at(&seq, 0), &d, &s, DEFAULT_SCALING_FLOOR).unwrap();
        // x(1) = A(x* 1 - D y) = x* 1 - A D y since A 1 = 1 on the cycle.
        let a = mixing_at(&seq, 0).into_entries();
        let expected = DMatrix::from_element(3, 1, star) - &a * scale_rows(&st.y, d.alphas());
        assert_abs_diff_eq!(next.x, expected, epsilon = 1e-15);
        let max_dev = next.x.iter().map(|v| (v - star).abs()).fold(0.0, f64::max);
        assert!(max_dev <= d.alpha_max() * st.y.abs().max());
        assert_abs_diff_eq!(next.y.row_mean()[0], next.gradients().row_mean()[0], epsilon = 1e-15);
    }

    #[test]
    fn eq4_identities_along_trajectory() {
        let s = sensor();
        let seq = make_periodic_partition(5, 2, 3).unwrap();
        let d = StepSizes::new(D.to_vec()).unwrap();
        let mut st = init_state(&s, &x0()).unwrap();
        for k in 0..60 {
            let a = mixing_at(&seq, k);
            let next = push_diging_step(&st, &a, &d, &s, DEFAULT_SCALING_FLOOR).unwrap();
            let (r, h) = transformed_view(&st, &next, &a);
            let x_pred = &r * (&st.x - scale_rows(&h, d.alphas()));
            assert_abs_diff_eq!(x_pred, next.x, epsilon = 1e-10);
            let h_next = divide_rows(&(a.entries() * (next.gradients() - st.gradients())), &next.s) + &r * &h;
            assert_abs_diff_eq!(h_next, next.scaled_tracker(), epsilon = 1e-10);
            st = next;
        }
    }

    #[test]
    fn transformed_view_trivial_cases() {
        let s = make_sensor_suite(&[0.0], &[2.0], &[0.4]).unwrap();
        let d = StepSizes::new(vec![0.3]).unwrap();
        let a = build_mixing_matrix(&Digraph::empty(1).unwrap(), 0);
        let st = init_state(&s, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        let next = push_diging_step(&st, &a, &d, &s, DEFAULT_SCALING_FLOOR).unwrap();
        let (r, h) = transformed_view(&st, &next, &a);
        assert_eq!(r, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(h, st.y);

        let s3 = make_sensor_suite(&[0.0; 3], &[1.0; 3], &[0.0, 1.0, 2.0]).unwrap();
        let seq = make_ring(3).unwrap();
        let st = init_state(&s3, &DMatrix::from_column_slice(3, 1, &[0.5, 0.1, 0.9])).unwrap();
        let a = mixing_at(&seq, 0);
        let next = push_diging_step(&st, &a, &StepSizes::uniform(3, 0.1).unwrap(), &s3, DEFAULT_SCALING_FLOOR).unwrap();
        let (r, h) = transformed_view(&st, &next, &a);
        assert_eq!(&r, a.entries());
        assert_eq!(h, st.y);
    }

    #[test]
    fn single_agent_run_matches_descent() {
        let s = make_sensor_suite(&[0.0], &[2.0], &[0.4]).unwrap();
        let alpha = 1.0 / s.stats().l_hat;
        let seq = make_ring(1).unwrap();
        let trace = run_push_diging(
            &seq,
            &s,
            &StepSizes::new(vec![alpha]).unwrap(),
            &DMatrix::from_element(1, 1, 3.0),
            &RunOptions::new(50),
        )
        .unwrap();
        let mut x = 3.0;
        for row in &trace.rows {
            assert!((row.x[0] - x).abs() <= 1e-12);
            x -= alpha * (x - 0.4);
        }
    }

    #[test]
    fn divergence_is_detected() {
        let s = sensor();
        let seq = make_periodic_partition(5, 2, 3).unwrap();
        let d = StepSizes::uniform(5, 1e3 / s.stats().l_hat).unwrap();
        let err = run_push_diging(&seq, &s, &d, &x0(), &RunOptions::new(200)).unwrap_err();
        assert!(matches!(err, EngineError::Diverged { .. }), "{err}");
    }

    #[test]
    fn tracking_and_mass_invariants() {
        let s = sensor();
        let seq = make_periodic_partition(5, 2, 8).unwrap();
        let d = StepSizes::new(D.to_vec()).unwrap();
        let trace = run_push_diging(&seq, &s, &d, &x0(), &RunOptions::new(300).with_aux()).unwrap();
        for (row, aux) in trace.rows.iter().zip(trace.aux.as_ref().unwrap()) {
            assert!(row.tracking_error <= 1e-10);
            assert_abs_diff_eq!(aux.s.sum(), 5.0, epsilon = 1e-10);
        }
        assert!(trace.final_row().residual_q < 1e-6 * trace.rows[0].residual_q);
    }

    #[test]
    fn stop_residual_ends_early() {
        let s = sensor();
        let seq = make_ring(5).unwrap();
        let d = StepSizes::new(D.to_vec()).unwrap();
        let mut opts = RunOptions::new(10_000);
        opts.stop_residual = 1e-6;
        let trace = run_push_diging(&seq, &s, &d, &x0(), &opts).unwrap();
        assert!(trace.rows.len() < 10_001);
        assert!(trace.final_row().residual_q <= 1e-6);
    }

    #[test]
    fn baselines_single_agent_and_frozen() {
        let s = make_sensor_suite(&[0.0], &[2.0], &[0.4]).unwrap();
        let seq = make_ring(1).unwrap();
        let x0 = DMatrix::from_element(1, 1, 2.0);
        for trace in [
            run_dgd_baseline(&seq, &s, 0.5, &x0, &RunOptions::new(20)).unwrap(),
            run_push_sum_baseline(&seq, &s, 0.5, &x0, &RunOptions::new(20)).unwrap(),
        ] {
            let mut x = 2.0;
            for (k, row) in trace.rows.iter().enumerate() {
                assert_abs_diff_eq!(row.x[0], x, epsilon = 1e-14);
                x -= diminishing_step(0.5, k) * (x - 0.4);
            }
        }

        let s5 = sensor();
        let seq5 = make_ring(5).unwrap();
        let frozen = run_dgd_baseline(&seq5, &s5, 0.0, &x0_5(), &RunOptions::new(200)).unwrap();
        let mean = x0_5().mean();
        for v in &frozen.final_row().x {
            assert_abs_diff_eq!(*v, mean, epsilon = 1e-12);
        }
    }

    fn x0_5() -> DMatrix<f64> {
        x0()
    }

    #[test]
    fn push_sum_on_cycle_is_adapt_then_combine() {
        let s = sensor();
        let seq = make_ring(5).unwrap();
        let trace = run_push_sum_baseline(&seq, &s, 0.04, &x0(), &RunOptions::new(40)).unwrap();
        let a = mixing_at(&seq, 0).into_entries();
        let mut x = x0();
        for (k, row) in trace.rows.iter().enumerate() {
            for i in 0..5 {
                assert_abs_diff_eq!(row.x[i], x[(i, 0)], epsilon = 1e-14);
            }
            x = &a * (&x - stacked_gradient(&s, &x) * diminishing_step(0.04, k));
        }
    }

    #[test]
    fn metropolis_is_doubly_stochastic() {
        let seq = make_periodic_partition(6, 3, 1).unwrap();
        for k in 0..3 {
            let w = metropolis_weights(&seq.graph_at(k));
            for i in 0..6 {
                assert_abs_diff_eq!(w.row(i).sum(), 1.0, epsilon = 1e-15);
                assert_abs_diff_eq!(w.column(i).sum(), 1.0, epsilon = 1e-15);
            }
            assert!(w.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn inexact_descent_cases() {
        let s = sensor();
        let theta = 1.0 / s.stats().l_hat;
        let v0 = DVector::from_element(1, -1.0);
        let run = inexact_gd_run(
            &s,
            theta,
            &mut |_| DVector::zeros(1),
            &mut |_, v| DMatrix::from_fn(5, 1, |_, _| v[0]),
            &v0,
            100,
        );
        assert!(run.r.windows(2).filter(|w| w[0] > 1e-12).all(|w| w[1] < w[0]));

        let star = run.v_star.clone();
        let frozen = inexact_gd_run(
            &s,
            theta,
            &mut |_| DVector::zeros(1),
            &mut |_, _| DMatrix::from_fn(5, 1, |_, _| star[0]),
            &v0,
            10,
        );
        for v in &frozen.v {
            assert_abs_diff_eq!(v[0], -1.0, epsilon = 1e-15);
        }
        assert_eq!(frozen.u.len(), 11);
        assert_eq!(frozen.e.len(), 11);
    }

    #[test]
    fn csv_header_and_precision() {
        let s = sensor();
        let seq = make_ring(5).unwrap();
        let trace =
            run_push_diging(&seq, &s, &StepSizes::new(D.to_vec()).unwrap(), &x0(), &RunOptions::new(3)).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,x_1,x_2,x_3,x_4,x_5,residual_q,consensus_violation,fig1_metric,tracking_error"
        );
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 10);
        assert_eq!(first[1], "1.0000000000000001e-1");
    }
}
