//! Per-agent objectives with gradients and smoothness / strong-convexity
//! constants, plus the quadratic sensor-estimation suite.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObjectiveError {
    #[error("suite needs at least one agent")]
    Empty,
    #[error("parameter vectors have different lengths (a: {a}, b: {b}, c: {c})")]
    LengthMismatch { a: usize, b: usize, c: usize },
    #[error("gain b_{index} = {value} must be positive")]
    NonPositiveGain { index: usize, value: f64 },
    #[error("agent {index} has dimension {found}, expected {expected}")]
    DimensionMismatch { index: usize, found: usize, expected: usize },
    #[error("agent {index}: L = {l} must be positive and mu = {mu} nonnegative")]
    BadConstants { index: usize, l: f64, mu: f64 },
    #[error("at least one agent must be strongly convex (all mu_i are zero)")]
    NoStrongConvexity,
}

/// A smooth local objective `f_i : R^n -> R`.
pub trait AgentObjective: Send + Sync + fmt::Debug {
    fn dimension(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Lipschitz constant of the gradient.
    fn lipschitz(&self) -> f64;
    /// Strong-convexity modulus (may be zero).
    fn strong_convexity(&self) -> f64;
}

/// `f(x) = a + ||x - c||^2 / b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorObjective {
    pub offset: f64,
    pub gain: f64,
    pub center: DVector<f64>,
}

impl AgentObjective for SensorObjective {
    fn dimension(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.offset + (x - &self.center).norm_squared() / self.gain
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.center) * (2.0 / self.gain)
    }

    fn lipschitz(&self) -> f64 {
        2.0 / self.gain
    }

    fn strong_convexity(&self) -> f64 {
        2.0 / self.gain
    }
}

type ValueFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type GradFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Objective defined by closures with user-supplied constants. The constants
/// are taken on trust; use [`check_constants`] to audit them.
pub struct FnObjective {
    dimension: usize,
    value: Box<ValueFn>,
    gradient: Box<GradFn>,
    lipschitz: f64,
    strong_convexity: f64,
}

impl FnObjective {
    pub fn new(
        dimension: usize,
        lipschitz: f64,
        strong_convexity: f64,
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { dimension, value: Box::new(value), gradient: Box::new(gradient), lipschitz, strong_convexity }
    }
}

impl fmt::Debug for FnObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnObjective")
            .field("dimension", &self.dimension)
            .field("lipschitz", &self.lipschitz)
            .field("strong_convexity", &self.strong_convexity)
            .finish_non_exhaustive()
    }
}

impl AgentObjective for FnObjective {
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }
    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
    fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }
}

/// Aggregate constants of a suite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SuiteStats {
    pub n_agents: usize,
    /// max_i L_i
    pub l_hat: f64,
    /// mean_i L_i
    pub l_bar: f64,
    /// max_i mu_i
    pub mu_hat: f64,
    /// mean_i mu_i
    pub mu_bar: f64,
    /// l_hat / mu_bar
    pub kappa: f64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveSuite {
    agents: Vec<Arc<dyn AgentObjective>>,
    dimension: usize,
    stats: SuiteStats,
    closed_form_optimum: Option<DVector<f64>>,
}

impl ObjectiveSuite {
    pub fn new(agents: Vec<Arc<dyn AgentObjective>>) -> Result<Self, ObjectiveError> {
        Self::build(agents, None)
    }

    fn build(
        agents: Vec<Arc<dyn AgentObjective>>,
        closed_form_optimum: Option<DVector<f64>>,
    ) -> Result<Self, ObjectiveError> {
        let first = agents.first().ok_or(ObjectiveError::Empty)?;
        let dimension = first.dimension();
        for (index, a) in agents.iter().enumerate() {
            if a.dimension() != dimension {
                return Err(ObjectiveError::DimensionMismatch {
                    index: index + 1,
                    found: a.dimension(),
                    expected: dimension,
                });
            }
            let (l, mu) = (a.lipschitz(), a.strong_convexity());
            if !(l > 0.0 && l.is_finite() && mu >= 0.0 && mu.is_finite()) {
                return Err(ObjectiveError::BadConstants { index: index + 1, l, mu });
            }
        }
        if agents.iter().all(|a| a.strong_convexity() == 0.0) {
            return Err(ObjectiveError::NoStrongConvexity);
        }
        let n = agents.len() as f64;
        let l_hat = agents.iter().map(|a| a.lipschitz()).fold(f64::MIN, f64::max);
        let l_bar = agents.iter().map(|a| a.lipschitz()).sum::<f64>() / n;
        let mu_hat = agents.iter().map(|a| a.strong_convexity()).fold(f64::MIN, f64::max);
        let mu_bar = agents.iter().map(|a| a.strong_convexity()).sum::<f64>() / n;
        let stats = SuiteStats { n_agents: agents.len(), l_hat, l_bar, mu_hat, mu_bar, kappa: l_hat / mu_bar };
        Ok(Self { agents, dimension, stats, closed_form_optimum })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn stats(&self) -> SuiteStats {
        self.stats
    }

    pub fn agent(&self, i: usize) -> &dyn AgentObjective {
        self.agents[i].as_ref()
    }

    pub fn agents(&self) -> impl Iterator<Item = &dyn AgentObjective> {
        self.agents.iter().map(|a| a.as_ref())
    }

    /// `f(x) = (1/N) sum_i f_i(x)`.
    pub fn average_value(&self, x: &DVector<f64>) -> f64 {
        self.agents.iter().map(|a| a.value(x)).sum::<f64>() / self.n_agents() as f64
    }

    pub fn average_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dimension);
        for a in &self.agents {
            g += a.gradient(x);
        }
        g / self.n_agents() as f64
    }
}

/// Quadratic sensor suite `f_i(x) = a_i + (x - c_i)^2 / b_i` in one dimension,
/// with `L_i = mu_i = 2 / b_i`.
pub fn make_sensor_suite(a: &[f64], b: &[f64], c: &[f64]) -> Result<ObjectiveSuite, ObjectiveError> {
    let centers: Vec<DVector<f64>> = c.iter().map(|&ci| DVector::from_element(1, ci)).collect();
    make_sensor_suite_nd(a, b, &centers)
}

/// Sensor suite with vector-valued centers.
pub fn make_sensor_suite_nd(a: &[f64], b: &[f64], c: &[DVector<f64>]) -> Result<ObjectiveSuite, ObjectiveError> {
    if a.len() != b.len() || b.len() != c.len() {
        return Err(ObjectiveError::LengthMismatch { a: a.len(), b: b.len(), c: c.len() });
    }
    if a.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    if let Some((i, &v)) = b.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(ObjectiveError::NonPositiveGain { index: i + 1, value: v });
    }
    let weight_sum: f64 = b.iter().map(|bi| 1.0 / bi).sum();
    let mut optimum = DVector::zeros(c[0].len());
    for (ci, bi) in c.iter().zip(b) {
        optimum += ci / *bi;
    }
    optimum /= weight_sum;
    let agents = a
        .iter()
        .zip(b)
        .zip(c)
        .map(|((&offset, &gain), center)| {
            Arc::new(SensorObjective { offset, gain, center: center.clone() }) as Arc<dyn AgentObjective>
        })
        .collect();
    ObjectiveSuite::build(agents, Some(optimum))
}

/// Closed-form minimizer when one is known (sensor suites), else `None`.
pub fn optimal_point(suite: &ObjectiveSuite) -> Option<DVector<f64>> {
    suite.closed_form_optimum.clone()
}

/// Centralized gradient descent on `(1/N) sum f_i` with step `1 / L_hat`.
/// Stops when the gradient norm drops below `grad_tol`.
pub fn centralized_descent(suite: &ObjectiveSuite, x0: &DVector<f64>, grad_tol: f64, max_iters: usize) -> DVector<f64> {
    let step = 1.0 / suite.stats().l_hat;
    let mut x = x0.clone();
    for _ in 0..max_iters {
        let g = suite.average_gradient(&x);
        if g.norm() <= grad_tol {
            break;
        }
        x -= g * step;
    }
    x
}

/// The minimizer, from the closed form or a high-precision descent oracle.
pub fn resolve_optimum(suite: &ObjectiveSuite) -> DVector<f64> {
    optimal_point(suite)
        .unwrap_or_else(|| centralized_descent(suite, &DVector::zeros(suite.dimension()), 1e-14, 10_000_000))
}

/// Row `i` is `grad f_i(x_i)`; `x` is `N x n`.
pub fn stacked_gradient(suite: &ObjectiveSuite, x: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(x.nrows(), suite.n_agents(), "stacked iterate needs one row per agent");
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, agent) in suite.agents().enumerate() {
        let xi = x.row(i).transpose();
        out.set_row(i, &agent.gradient(&xi).transpose());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantKind {
    Lipschitz,
    StrongConvexity,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstantViolation {
    pub agent: usize,
    pub kind: ConstantKind,
    pub ratio: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConstantsAudit {
    pub samples: usize,
    /// max over samples of ||grad f(x) - grad f(y)|| / (L ||x - y||)
    pub worst_lipschitz_ratio: f64,
    /// max over samples of (mu/2)||x-y||^2 / (f(x) - f(y) - <grad f(y), x-y>)
    pub worst_convexity_ratio: f64,
    pub violations: Vec<ConstantViolation>,
}

impl ConstantsAudit {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evaluates both constant inequalities on seeded random pairs in `[-10, 10]^n`.
pub fn check_constants(suite: &ObjectiveSuite, samples: usize, seed: u64) -> ConstantsAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = suite.dimension();
    let mut audit = ConstantsAudit { samples, ..Default::default() };
    for (agent_idx, agent) in suite.agents().enumerate() {
        let mut drawn = 0;
        while drawn < samples {
            let x = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
            let y = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
            let dist = (&x - &y).norm();
            // Close pairs make the convexity gap a difference of nearly equal numbers.
            if dist < 0.1 {
                continue;
            }
            drawn += 1;
            let lip = (agent.gradient(&x) - agent.gradient(&y)).norm() / (agent.lipschitz() * dist);
            let gap = agent.value(&x) - agent.value(&y) - agent.gradient(&y).dot(&(&x - &y));
            let mu_term = 0.5 * agent.strong_convexity() * dist * dist;
            let conv = if mu_term == 0.0 {
                0.0
            } else if gap <= 0.0 {
                f64::INFINITY
            } else {
                mu_term / gap
            };
            audit.worst_lipschitz_ratio = audit.worst_lipschitz_ratio.max(lip);
            audit.worst_convexity_ratio = audit.worst_convexity_ratio.max(conv);
            for (kind, ratio) in [(ConstantKind::Lipschitz, lip), (ConstantKind::StrongConvexity, conv)] {
                if ratio > 1.0 + ConstantsAudit::TOLERANCE {
                    audit.violations.push(ConstantViolation {
                        agent: agent_idx + 1,
                        kind,
                        ratio,
                        x: x.iter().copied().collect(),
                        y: y.iter().copied().collect(),
                    });
                }
            }
        }
    }
    audit
}

/// Largest relative disagreement between each agent's gradient and central
/// finite differences at `points` seeded points in `[-5, 5]^n`.
pub fn gradient_fd_error(suite: &ObjectiveSuite, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = suite.dimension();
    let mut worst: f64 = 0.0;
    for agent in suite.agents() {
        for _ in 0..points {
            let x = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
            let g = agent.gradient(&x);
            for d in 0..n {
                let h = 1e-5 * (1.0 + x[d].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                let fd = (agent.value(&xp) - agent.value(&xm)) / (2.0 * h);
                let err = (fd - g[d]).abs() / g[d].abs().max(1.0);
                worst = worst.max(err);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) const A: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
    pub(crate) const B: [f64; 5] = [3.33, 1.67, 1.11, 0.83, 0.67];
    pub(crate) const C: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

    fn sensor() -> ObjectiveSuite {
        make_sensor_suite(&A, &B, &C).unwrap()
    }

    #[test]
    fn sensor_suite_values() {
        let s = sensor();
        assert_eq!(s.n_agents(), 5);
        assert_eq!(s.agent(2).value(&DVector::from_element(1, 0.6)), 3.0);
        assert_abs_diff_eq!(s.stats().l_hat, 2.0 / 0.67, epsilon = 1e-12);
        assert_abs_diff_eq!(s.stats().l_hat, 2.9851, epsilon = 1e-4);
        let mu_bar = B.iter().map(|b| 2.0 / b).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(s.stats().mu_bar, mu_bar, epsilon = 1e-14);
        assert!(s.stats().kappa >= 1.0);
        assert!(s.stats().l_hat >= s.stats().l_bar && s.stats().mu_hat >= s.stats().mu_bar);
    }

    #[test]
    fn rejects_nonpositive_gain() {
        let err = make_sensor_suite(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap_err();
        assert_eq!(err, ObjectiveError::NonPositiveGain { index: 2, value: 0.0 });
        assert!(matches!(make_sensor_suite(&[0.0], &[1.0, 2.0], &[0.0]), Err(ObjectiveError::LengthMismatch { .. })));
    }

    #[test]
    fn rejects_suite_without_strong_convexity() {
        let flat = FnObjective::new(1, 1.0, 0.0, |x| x[0], |_| DVector::from_element(1, 1.0));
        let err = ObjectiveSuite::new(vec![Arc::new(flat)]).unwrap_err();
        assert_eq!(err, ObjectiveError::NoStrongConvexity);
    }

    #[test]
    fn sensor_optimum_matches_descent_oracle() {
        let s = sensor();
        let closed = optimal_point(&s).unwrap();
        assert_abs_diff_eq!(closed[0], 0.73299, epsilon = 1e-5);
        let oracle = centralized_descent(&s, &DVector::zeros(1), 1e-14, 100_000);
        assert_abs_diff_eq!(closed[0], oracle[0], epsilon = 1e-12);
    }

    #[test]
    fn symmetric_and_single_optima() {
        let s = make_sensor_suite(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0], &[0.3, 0.3, 0.3]).unwrap();
        assert_abs_diff_eq!(optimal_point(&s).unwrap()[0], 0.3, epsilon = 1e-15);
        let one = make_sensor_suite(&[0.0], &[2.0], &[0.4]).unwrap();
        assert_eq!(optimal_point(&one).unwrap()[0], 0.4);
    }

    #[test]
    fn custom_suite_uses_oracle() {
        // f_i(x) = softplus(w_i x) + (r_i / 2) x^2
        let make = |w: f64, r: f64| {
            Arc::new(FnObjective::new(
                1,
                w * w / 4.0 + r,
                r,
                move |x| (w * x[0]).exp().ln_1p() + 0.5 * r * x[0] * x[0],
                move |x| DVector::from_element(1, w / (1.0 + (-w * x[0]).exp()) + r * x[0]),
            )) as Arc<dyn AgentObjective>
        };
        let s = ObjectiveSuite::new(vec![make(1.0, 0.5), make(-2.0, 1.0)]).unwrap();
        assert!(optimal_point(&s).is_none());
        let x = resolve_optimum(&s);
        assert!(s.average_gradient(&x).norm() <= 1e-13);
        assert!(check_constants(&s, 200, 1).passed());
        assert!(gradient_fd_error(&s, 100, 2) <= 1e-6);
    }

    #[test]
    fn stacked_gradients() {
        let s = sensor();
        let at_centers = DMatrix::from_column_slice(5, 1, &C);
        assert_eq!(stacked_gradient(&s, &at_centers), DMatrix::zeros(5, 1));
        let zeros = stacked_gradient(&s, &DMatrix::zeros(5, 1));
        for i in 0..5 {
            assert_abs_diff_eq!(zeros[(i, 0)], -2.0 * C[i] / B[i], epsilon = 1e-15);
        }
        let one = make_sensor_suite(&[0.0], &[2.0], &[0.4]).unwrap();
        assert_abs_diff_eq!(stacked_gradient(&one, &DMatrix::from_element(1, 1, 1.4))[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn constants_audit() {
        let s = sensor();
        let audit = check_constants(&s, 200, 9);
        assert!(audit.passed(), "{:?}", audit.violations.first());
        assert!(audit.worst_lipschitz_ratio <= 1.0 + 1e-9);
        assert!(check_constants(&s, 0, 9).passed());
        assert!(gradient_fd_error(&s, 100, 3) <= 1e-6);

        let understated =
            FnObjective::new(1, 1.0, 1.0, |x| x[0] * x[0] / 0.5, |x| DVector::from_element(1, 4.0 * x[0]));
        let bad = ObjectiveSuite::new(vec![Arc::new(understated)]).unwrap();
        let audit = check_constants(&bad, 10, 0);
        assert!(!audit.passed());
        assert!(audit.violations.iter().any(|v| v.kind == ConstantKind::Lipschitz));
    }

    #[test]
    fn vector_centers() {
        let c = vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![2.0, -1.0])];
        let s = make_sensor_suite_nd(&[0.0, 0.0], &[1.0, 1.0], &c).unwrap();
        assert_eq!(s.dimension(), 2);
        let opt = optimal_point(&s).unwrap();
        assert_abs_diff_eq!(opt[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(opt[1], 0.0, epsilon = 1e-15);
    }
}
