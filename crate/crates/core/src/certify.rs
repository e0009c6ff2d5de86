//! Closed-form rate constants, the small gain machinery, and numerical audits
//! of each inequality in the convergence argument.
//!
//! Sequences are audited through their λ-weighted norms
//! `||u||^{λ,K} = max_{k<=K} λ^-k ||u(k)||`, checked at every prefix `K`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::engine::{InexactRun, StepSizes, Trace};
use crate::graphs::GraphSequence;
use crate::mixing::{
    averaging_projector, disagreement_projector, mixing_at, spectral_norm, ConsensusConstants, MixingError,
    ScalingTrajectory,
};
use crate::objectives::SuiteStats;

/// Relative slack allowed before an audited inequality counts as violated.
pub const AUDIT_REL_TOL: f64 = 1e-9;

/// Smallest rate the certified evaluations accept.
pub const LAMBDA_FLOOR: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CertifyError {
    #[error("gain product {product} is not below 1")]
    GainProduct { product: f64 },
    #[error("gain and offset lists differ in length ({gains} vs {offsets})")]
    GainLength { gains: usize, offsets: usize },
    #[error("lambda {lambda} is not admissible: {}", join_violations(.violations))]
    Inadmissible { lambda: f64, violations: Vec<ConstraintViolation> },
    #[error("inexact descent hypotheses violated: {}", .0.join("; "))]
    Hypothesis(Vec<String>),
    #[error("rate formula outside its domain: {0}")]
    Domain(String),
    #[error("trace has no auxiliary quantities recorded")]
    MissingAux,
    #[error("trace holds a non-finite value at iteration {k}")]
    NonFinite { k: usize },
    #[error("sequence of length {len} is too short for horizon K = {k}")]
    ShortSequence { len: usize, k: usize },
    #[error(transparent)]
    Mixing(#[from] MixingError),
}

fn join_violations(v: &[ConstraintViolation]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("; ")
}

/// Anything with a Euclidean (Frobenius for matrices) norm.
pub trait Normed {
    fn norm_value(&self) -> f64;
}

impl Normed for f64 {
    fn norm_value(&self) -> f64 {
        self.abs()
    }
}

impl Normed for DVector<f64> {
    fn norm_value(&self) -> f64 {
        self.norm()
    }
}

impl Normed for DMatrix<f64> {
    fn norm_value(&self) -> f64 {
        self.norm()
    }
}

/// `max_{k<=K} λ^-k ||u(k)||`.
///
/// # Panics
/// If `values.len() <= k`.
pub fn lambda_norm<T: Normed>(values: &[T], lambda: f64, k: usize) -> f64 {
    assert!(values.len() > k, "sequence of length {} does not reach K = {k}", values.len());
    values[..=k].iter().enumerate().map(|(i, v)| v.norm_value() / lambda.powi(i as i32)).fold(0.0, f64::max)
}

/// `||u||^{λ,K}` for every `K < norms.len()`, from a sequence of norms.
pub fn lambda_norm_prefix(norms: &[f64], lambda: f64) -> Vec<f64> {
    let mut best: f64 = 0.0;
    norms
        .iter()
        .enumerate()
        .map(|(i, v)| {
            best = best.max(v / lambda.powi(i as i32));
            best
        })
        .collect()
}

/// Right-hand side of the small gain bound
/// `(γ_m…γ_2 ω_1 + … + γ_m ω_{m-1} + ω_m) / (1 - γ_1…γ_m)`.
pub fn small_gain_bound(gains: &[f64], offsets: &[f64]) -> Result<f64, CertifyError> {
    if gains.len() != offsets.len() {
        return Err(CertifyError::GainLength { gains: gains.len(), offsets: offsets.len() });
    }
    let product: f64 = gains.iter().product();
    if !(product < 1.0) {
        return Err(CertifyError::GainProduct { product });
    }
    let m = gains.len();
    let numerator: f64 = (0..m).map(|i| gains[i + 1..].iter().product::<f64>() * offsets[i]).sum();
    Ok(numerator / (1.0 - product))
}

/// One audited inequality `lhs_K <= rhs_K`, checked at every prefix `K`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub name: String,
    /// Values at the prefix with the smallest slack.
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs` at that prefix; negative means violated.
    pub slack: f64,
    pub worst_k: usize,
    pub holds: bool,
}

impl InequalityCheck {
    pub fn from_series(name: impl Into<String>, lhs: &[f64], rhs: &[f64]) -> Self {
        assert_eq!(lhs.len(), rhs.len());
        let mut worst = (0usize, f64::INFINITY);
        let mut holds = true;
        for (k, (l, r)) in lhs.iter().zip(rhs).enumerate() {
            let slack = r - l;
            let scale = l.abs().max(r.abs()).max(f64::MIN_POSITIVE);
            if !(slack >= -AUDIT_REL_TOL * scale) {
                holds = false;
            }
            if !(slack >= worst.1) {
                worst = (k, slack);
            }
        }
        let k = worst.0;
        Self {
            name: name.into(),
            lhs: lhs.get(k).copied().unwrap_or(0.0),
            rhs: rhs.get(k).copied().unwrap_or(0.0),
            slack: worst.1,
            worst_k: k,
            holds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmallGainAudit {
    pub arrows: Vec<InequalityCheck>,
    /// `||u_1||^{λ,K}` against the closed-form bound; absent when the gain
    /// product is not below 1.
    pub bound: Option<InequalityCheck>,
    pub gain_product: f64,
}

impl SmallGainAudit {
    pub fn passed(&self) -> bool {
        self.arrows.iter().all(|a| a.holds) && self.bound.as_ref().is_none_or(|b| b.holds)
    }

    pub fn violations(&self) -> Vec<&str> {
        self.arrows.iter().chain(&self.bound).filter(|a| !a.holds).map(|a| a.name.as_str()).collect()
    }
}

/// Checks the cyclic inequalities `||u_{i+1}||^{λ,K} <= γ_i ||u_i||^{λ,K} + ω_i`
/// (indices mod m) on norm sequences, and the bound on `||u_1||^{λ,K}` when
/// the gain product is below 1.
pub fn small_gain_empirical_check(
    sequences: &[Vec<f64>],
    gains: &[f64],
    offsets: &[f64],
    lambda: f64,
    k: usize,
) -> Result<SmallGainAudit, CertifyError> {
    let m = sequences.len();
    if gains.len() != m || offsets.len() != m {
        return Err(CertifyError::GainLength { gains: gains.len(), offsets: offsets.len() });
    }
    if let Some(s) = sequences.iter().find(|s| s.len() <= k) {
        return Err(CertifyError::ShortSequence { len: s.len(), k });
    }
    let norms: Vec<Vec<f64>> = sequences.iter().map(|s| lambda_norm_prefix(&s[..=k], lambda)).collect();
    let arrows = (0..m)
        .map(|i| {
            let next = (i + 1) % m;
            let rhs: Vec<f64> = norms[i].iter().map(|v| gains[i] * v + offsets[i]).collect();
            InequalityCheck::from_series(format!("u{} -> u{}", i + 1, next + 1), &norms[next], &rhs)
        })
        .collect();
    let gain_product: f64 = gains.iter().product();
    let bound = small_gain_bound(gains, offsets)
        .ok()
        .map(|b| InequalityCheck::from_series("small gain bound on u1", &norms[0], &vec![b; k + 1]));
    Ok(SmallGainAudit { arrows, bound, gain_product })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundsMode {
    /// The sequence is periodic and `s` returns to `s(0)` after one period,
    /// so the horizon covers every value the bounds can take.
    ExactOverPeriod,
    FiniteHorizon,
}

impl fmt::Display for BoundsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundsMode::ExactOverPeriod => "exact-over-period",
            BoundsMode::FiniteHorizon => "finite-horizon",
        })
    }
}

/// Sup-norm bounds of `S(k)`, `S(k)^-1`, `J R(k)` and `A(k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NormBounds {
    pub s_max: f64,
    pub s_inv_max: f64,
    pub jr_max: f64,
    pub a_max: f64,
    pub mode: BoundsMode,
}

impl NormBounds {
    /// `||S^-1||_max ||A||_max`
    pub fn f(&self) -> f64 {
        self.s_inv_max * self.a_max
    }
}

/// Measures the bounds over `k = 0..horizon` (`s` up to `horizon`, matrices
/// `A(k)` and `R(k)` for `k < horizon`).
pub fn measure_norm_bounds(
    seq: &GraphSequence,
    scaling: &ScalingTrajectory,
    horizon: usize,
) -> Result<NormBounds, CertifyError> {
    let n = seq.n_agents();
    let j = averaging_projector(n);
    let mut s_max: f64 = 0.0;
    let mut s_inv_max: f64 = 0.0;
    for k in 0..=horizon {
        let s = scaling.s(k)?;
        s_max = s_max.max(s.max());
        s_inv_max = s_inv_max.max(1.0 / s.min());
    }
    let mut a_max: f64 = 0.0;
    let mut jr_max: f64 = 0.0;
    for k in 0..horizon {
        let a = mixing_at(seq, k).into_entries();
        a_max = a_max.max(spectral_norm(&a));
        let r = normalize(a, scaling.s(k + 1)?, scaling.s(k)?);
        jr_max = jr_max.max(spectral_norm(&(&j * r)));
    }
    let mode = match seq.period() {
        Some(p) if p <= horizon && returns_to_start(scaling, p)? => BoundsMode::ExactOverPeriod,
        _ => BoundsMode::FiniteHorizon,
    };
    Ok(NormBounds { s_max, s_inv_max, jr_max, a_max, mode })
}

fn returns_to_start(scaling: &ScalingTrajectory, period: usize) -> Result<bool, CertifyError> {
    let s0 = scaling.s(0)?;
    let sp = scaling.s(period)?;
    Ok((sp - s0).amax() <= 1e-12)
}

/// `S_left^-1 M S_right`.
fn normalize(mut m: DMatrix<f64>, s_left: &DVector<f64>, s_right: &DVector<f64>) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        for jj in 0..m.ncols() {
            m[(i, jj)] *= s_right[jj] / s_left[i];
        }
    }
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaMode {
    Certified,
    #[default]
    EmpiricalDelta,
}

impl fmt::Display for DeltaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeltaMode::Certified => "certified",
            DeltaMode::EmpiricalDelta => "empirical-delta",
        })
    }
}

/// Window contraction `δ` and transient constant `Q1` for windows of `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeltaConstants {
    pub delta: f64,
    pub q1: f64,
    /// Only defined for the closed-form constants.
    pub tau: Option<f64>,
    pub b: usize,
    pub mode: DeltaMode,
}

impl From<ConsensusConstants> for DeltaConstants {
    fn from(c: ConsensusConstants) -> Self {
        Self { delta: c.delta, q1: c.q1, tau: Some(c.tau), b: c.b, mode: DeltaMode::Certified }
    }
}

/// Measured constants over `k < horizon`:
/// `δ = max_k ||J̃ R_b(k) J̃||` and `Q1 = max(1, max_{k, 1<=t<b} ||J̃ R_t(k) J̃||)`.
pub fn empirical_delta(
    seq: &GraphSequence,
    scaling: &ScalingTrajectory,
    b: usize,
    horizon: usize,
) -> Result<DeltaConstants, CertifyError> {
    assert!(b >= 1, "window length must be positive");
    let n = seq.n_agents();
    let p = disagreement_projector(n);
    let mut delta: f64 = 0.0;
    let mut q1: f64 = 1.0;
    let mut saw_window = false;
    for k in 0..horizon {
        let s_next = scaling.s(k + 1)?;
        let mut prod = DMatrix::<f64>::identity(n, n);
        for t in 1..=b.min(k + 1) {
            prod *= mixing_at(seq, k + 1 - t).entries();
            let r = normalize(prod.clone(), s_next, scaling.s(k + 1 - t)?);
            let c = spectral_norm(&(&p * r * &p));
            if t == b {
                delta = delta.max(c);
                saw_window = true;
            } else {
                q1 = q1.max(c);
            }
        }
    }
    if !saw_window {
        return Err(CertifyError::ShortSequence { len: horizon, k: b });
    }
    Ok(DeltaConstants { delta, q1, tau: None, b, mode: DeltaMode::EmpiricalDelta })
}

/// Which form of the tracking-error gain `γ12` to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingGainForm {
    /// `sqrt(3 - α_max μ̄)/(λ μ̄) (1 - 1/k_D)`
    #[default]
    AlphaMax,
    /// `sqrt(3 - ᾱ μ̄)/(ᾱ sqrt(N) λ μ̄) ||α - ᾱ 1||`
    AlphaMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LambdaConstraint {
    StepBound,
    ContractionFloor,
    DeltaRoot,
    JrBelowLambda,
    BelowOne,
    AtLeastHalf,
}

impl fmt::Display for LambdaConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaConstraint::StepBound => "step bound alpha < min{(beta+1)/(mu_bar beta), 1/(L_hat(1+eta)), 3/mu_bar}",
            LambdaConstraint::ContractionFloor => "contraction floor sqrt(1 - alpha mu_bar beta/(2(beta+1))) <= lambda",
            LambdaConstraint::DeltaRoot => "window root delta^(1/B) < lambda",
            LambdaConstraint::JrBelowLambda => "averaged-mixing bound ||JR||_max < lambda",
            LambdaConstraint::BelowOne => "lambda < 1",
            LambdaConstraint::AtLeastHalf => "lambda >= 0.5",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintViolation {
    pub constraint: LambdaConstraint,
    pub detail: String,
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.constraint, self.detail)
    }
}

/// Free parameters of the gain evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GainParams {
    pub lambda: f64,
    pub beta: f64,
    pub eta: f64,
    pub form: TrackingGainForm,
}

impl GainParams {
    /// `β = 2 L̂/μ̂`, `η = 1`.
    pub fn standard(stats: &SuiteStats, lambda: f64) -> Self {
        Self { lambda, beta: 2.0 * stats.l_hat / stats.mu_hat, eta: 1.0, form: TrackingGainForm::AlphaMax }
    }
}

/// Trajectory data behind the offsets `ω1`, `ω21` and `ω3`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrajectoryOffsets {
    /// `||x̄(0) - x*||`
    pub mean_error0: f64,
    /// `||x̃(t)||` for `t < B`.
    pub x_tilde_prefix: Vec<f64>,
    /// `||h̃(t)||` for `t < B`.
    pub h_tilde_prefix: Vec<f64>,
}

impl TrajectoryOffsets {
    pub fn from_trace(trace: &Trace, b: usize) -> Result<Self, CertifyError> {
        let seqs = ChainSequences::from_trace(trace)?;
        let take = |v: &[f64]| v.iter().take(b).copied().collect::<Vec<_>>();
        let x0 = trace.x_at(0);
        let mean0 = x0.row_mean().transpose();
        Ok(Self {
            mean_error0: (mean0 - &trace.x_star).norm(),
            x_tilde_prefix: take(&seqs.x_tilde),
            h_tilde_prefix: take(&seqs.h_tilde),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GainSet {
    pub gamma_11: f64,
    pub gamma_12: f64,
    pub gamma_21: f64,
    pub gamma_22: f64,
    pub gamma_3: f64,
    pub gamma_4: f64,
    pub omega_1: f64,
    pub omega_21: f64,
    pub omega_22: f64,
    pub omega_3: f64,
    pub omega_4: f64,
    pub params: GainParams,
    pub b: usize,
    pub delta: f64,
    pub q1: f64,
    pub norms: NormBounds,
    /// Admissibility constraints that failed; empty for checked evaluations.
    pub violations: Vec<ConstraintViolation>,
}

impl GainSet {
    /// `(γ11 γ21 + γ12 γ22) γ3 γ4`
    pub fn product(&self) -> f64 {
        (self.gamma_11 * self.gamma_21 + self.gamma_12 * self.gamma_22) * self.gamma_3 * self.gamma_4
    }

    /// Small gain bound on `||q||^λ` around the cycle `q → z → h → {x̃, y} → q`.
    pub fn q_bound(&self) -> Result<f64, CertifyError> {
        let g1 = self.gamma_11 * self.gamma_21 + self.gamma_12 * self.gamma_22;
        let w1 = self.gamma_11 * self.omega_21 + self.gamma_12 * self.omega_22 + self.omega_1;
        small_gain_bound(&[self.gamma_4, self.gamma_3, g1], &[self.omega_4, self.omega_3, w1])
    }
}

fn alpha_for(steps: &StepSizes, form: TrackingGainForm) -> f64 {
    match form {
        TrackingGainForm::AlphaMax => steps.alpha_max(),
        TrackingGainForm::AlphaMean => steps.alpha_mean(),
    }
}

/// Constraints on `(α, λ, β, η)` that every gain relies on.
pub fn admissibility_violations(
    stats: &SuiteStats,
    norms: &NormBounds,
    steps: &StepSizes,
    consts: &DeltaConstants,
    params: &GainParams,
) -> Vec<ConstraintViolation> {
    let GainParams { lambda, beta, eta, form } = *params;
    let alpha = alpha_for(steps, form);
    let mu = stats.mu_bar;
    let mut out = Vec::new();
    let mut push = |constraint, detail: String| out.push(ConstraintViolation { constraint, detail });
    let step_cap = ((beta + 1.0) / (mu * beta)).min(1.0 / (stats.l_hat * (1.0 + eta))).min(3.0 / mu);
    if !(alpha > 0.0 && alpha < step_cap && beta >= 2.0 && eta > 0.0) {
        push(
            LambdaConstraint::StepBound,
            format!("alpha = {alpha:.6e}, cap = {step_cap:.6e}, beta = {beta}, eta = {eta}"),
        );
    }
    let floor = (1.0 - alpha * mu * beta / (2.0 * (beta + 1.0))).sqrt();
    if !(floor <= lambda) {
        push(LambdaConstraint::ContractionFloor, format!("floor = {floor:.6e}"));
    }
    let root = consts.delta.powf(1.0 / consts.b as f64);
    if !(root < lambda) {
        push(LambdaConstraint::DeltaRoot, format!("delta^(1/B) = {root:.6e}"));
    }
    if !(norms.jr_max < lambda) {
        push(LambdaConstraint::JrBelowLambda, format!("||JR||_max = {:.6e}", norms.jr_max));
    }
    if !(lambda < 1.0) {
        push(LambdaConstraint::BelowOne, format!("lambda = {lambda:.6e}"));
    }
    if !(lambda >= LAMBDA_FLOOR) {
        push(LambdaConstraint::AtLeastHalf, format!("lambda = {lambda:.6e}"));
    }
    out
}

/// Gains and offsets of the five arrows, rejecting inadmissible `λ`.
pub fn evaluate_gains(
    stats: &SuiteStats,
    norms: &NormBounds,
    steps: &StepSizes,
    consts: &DeltaConstants,
    params: &GainParams,
    offsets: &TrajectoryOffsets,
) -> Result<GainSet, CertifyError> {
    let gains = evaluate_gains_unchecked(stats, norms, steps, consts, params, offsets);
    if gains.violations.is_empty() {
        Ok(gains)
    } else {
        Err(CertifyError::Inadmissible { lambda: params.lambda, violations: gains.violations })
    }
}

/// Evaluates every formula regardless of admissibility and records the
/// violated constraints in the result.
pub fn evaluate_gains_unchecked(
    stats: &SuiteStats,
    norms: &NormBounds,
    steps: &StepSizes,
    consts: &DeltaConstants,
    params: &GainParams,
    offsets: &TrajectoryOffsets,
) -> GainSet {
    let violations = admissibility_violations(stats, norms, steps, consts, params);
    let GainParams { lambda, beta, eta, form } = *params;
    let n = stats.n_agents as f64;
    let sn = n.sqrt();
    let mu = stats.mu_bar;
    let (delta, q1, b) = (consts.delta, consts.q1, consts.b);
    let lb = lambda.powi(b as i32);
    let gap = lb - delta;

    let coupling = (stats.l_hat * (1.0 + eta) / (eta * mu) + stats.mu_hat / mu * beta).sqrt();
    let gamma_11 = (1.0 + sn) * (1.0 + sn / lambda * coupling);
    let gamma_12 = match form {
        TrackingGainForm::AlphaMax => {
            let a = steps.alpha_max();
            (3.0 - a * mu).sqrt() / (lambda * mu) * (1.0 - 1.0 / steps.k_d())
        }
        TrackingGainForm::AlphaMean => {
            let a = steps.alpha_mean();
            let spread = steps.alphas().iter().map(|x| (x - a).powi(2)).sum::<f64>().sqrt();
            (3.0 - a * mu).sqrt() / (a * sn * lambda * mu) * spread
        }
    };
    let gamma_21 = steps.alpha_max() / gap * (delta + q1 * (lambda - lb) / (1.0 - lambda));
    let gamma_22 = norms.s_max;
    let jr_ratio = 1.0 - norms.jr_max / lambda;
    let gamma_3 = norms.f() * (1.0 + q1 * lambda * (1.0 - lb) / (gap * (1.0 - lambda))) / jr_ratio;
    let gamma_4 = stats.l_hat * (1.0 + 1.0 / lambda);

    let prefix_sum = |v: &[f64]| -> f64 { v.iter().take(b).enumerate().map(|(t, x)| x / lambda.powi(t as i32)).sum() };
    let omega_1 = 2.0 * sn * offsets.mean_error0;
    let omega_21 = lb / gap * prefix_sum(&offsets.x_tilde_prefix);
    let omega_3 = lb / gap * prefix_sum(&offsets.h_tilde_prefix) / jr_ratio;

    GainSet {
        gamma_11,
        gamma_12,
        gamma_21,
        gamma_22,
        gamma_3,
        gamma_4,
        omega_1,
        omega_21,
        omega_22: 0.0,
        omega_3,
        omega_4: 0.0,
        params: *params,
        b,
        delta,
        q1,
        norms: *norms,
        violations,
    }
}

/// Optional overrides of `β` and `η` for certification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CertifyOverrides {
    pub beta: Option<f64>,
    pub eta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateCertificate {
    pub f: f64,
    pub g: f64,
    pub c: f64,
    pub h: f64,
    pub k: f64,
    pub delta: f64,
    pub q1: f64,
    pub tau: Option<f64>,
    pub b: usize,
    pub n_agents: usize,
    pub alpha_max: f64,
    pub k_d: f64,
    /// `min{closed-form interval end, 1/(2 L̂)}`
    pub alpha_max_bound: f64,
    /// Interval end built from `(1/2^B - δ)`.
    pub alpha_interval_end: f64,
    /// Step bound built from `(λ^B - δ)` at the candidate rate.
    pub alpha_bound_at_lambda: f64,
    pub kd_bound: f64,
    /// The three lower bounds whose maximum is the candidate rate.
    pub lambda_terms: [f64; 3],
    pub lambda_candidate: f64,
    /// The certified rate, or `None` when any condition fails.
    pub lambda: Option<f64>,
    pub gain_product: Option<f64>,
    pub beta: f64,
    pub eta: f64,
    pub norms: NormBounds,
    pub mode: DeltaMode,
    pub reasons: Vec<String>,
    pub notes: Vec<String>,
}

impl RateCertificate {
    pub fn is_valid(&self) -> bool {
        self.lambda.is_some()
    }

    pub fn report(&self) -> Report {
        let mut r = Report::default();
        let mode = self.mode.to_string();
        r.constant("F", "||S^-1||_max ||A||_max", self.f);
        r.constant("G", "2 L_hat (1+sqrt N)(1+4 sqrt N sqrt kappa)(delta + Q1 (B-1))", self.g);
        r.constant("C", "1 - ||JR||_max", self.c);
        r.constant("H", "-4 sqrt3 kappa (1 - 1/k_D) ||S||_max", self.h);
        r.constant("K", "B Q1 ||S^-1||_max ||A||_max", self.k);
        r.constant(
            "delta",
            if self.mode == DeltaMode::Certified {
                "Q1 (1 - tau^(N B0))^((B-1)/(N B0))"
            } else {
                "max_k ||J~ R_B(k) J~||"
            },
            self.delta,
        );
        r.constant(
            "Q1",
            if self.mode == DeltaMode::Certified {
                "2N (1 + tau^-(N B0))/(1 - tau^(N B0))"
            } else {
                "max(1, max_{k,t<B} ||J~ R_t(k) J~||)"
            },
            self.q1,
        );
        if let Some(tau) = self.tau {
            r.constant("tau", "N^-(2 + N B0)", tau);
        }
        r.constant("alpha_max_bound", "min{interval end, 1/(2 L_hat)}", self.alpha_max_bound);
        r.constant("alpha_interval_end", "(1-delta)/G ((1-delta) C - 4 sqrt3 kappa (1-1/k_D) ||S|| F (B Q1 + 2^-B - delta)) / (F (B Q1 + 2^-B - delta))", self.alpha_interval_end);
        r.constant(
            "alpha_bound_at_lambda",
            "(lambda^B - delta)/G (C (lambda^B - delta)/(F (lambda^B - delta) + K) + H)",
            self.alpha_bound_at_lambda,
        );
        r.constant(
            "kD_bound",
            "1 + (lambda^B-delta) C / (4 sqrt3 kappa ||S|| F (B Q1 + lambda^B - delta) - (lambda^B-delta) C)",
            self.kd_bound,
        );
        r.constant("lambda_term.window", "(delta + positive root)^(1/B)", self.lambda_terms[0]);
        r.constant("lambda_term.descent", "sqrt(1 - alpha_max mu_bar / 3)", self.lambda_terms[1]);
        r.constant("lambda_term.jr", "||JR||_max", self.lambda_terms[2]);
        r.constant("lambda_candidate", "max of the three lambda terms", self.lambda_candidate);
        r.value("input.alpha_max", self.alpha_max);
        r.value("input.k_D", self.k_d);
        r.count("input.B", self.b);
        r.count("input.N", self.n_agents);
        r.value("input.beta", self.beta);
        r.value("input.eta", self.eta);
        r.value("input.norm.s_max", self.norms.s_max);
        r.value("input.norm.s_inv_max", self.norms.s_inv_max);
        r.value("input.norm.jr_max", self.norms.jr_max);
        r.value("input.norm.a_max", self.norms.a_max);
        r.text("input.norm.mode", &self.norms.mode.to_string());
        r.text("mode", &mode);
        match self.gain_product {
            Some(p) => r.constant("gain_product", "(g11 g21 + g12 g22) g3 g4", p),
            None => r.text("gain_product", "unavailable"),
        }
        match self.lambda {
            Some(l) => r.value("lambda", l),
            None => r.text("lambda", "invalid"),
        }
        for (i, reason) in self.reasons.iter().enumerate() {
            r.text(&format!("reason.{i:02}"), reason);
        }
        for (i, note) in self.notes.iter().enumerate() {
            r.text(&format!("note.{i:02}"), note);
        }
        r.status(self.is_valid());
        r
    }
}

/// Rate certificate for the given bounds, constants and step-sizes. Failed
/// conditions are listed in `reasons` and leave `lambda` unset.
pub fn certify(
    stats: &SuiteStats,
    norms: &NormBounds,
    consts: &DeltaConstants,
    steps: &StepSizes,
    overrides: &CertifyOverrides,
) -> RateCertificate {
    let n = stats.n_agents as f64;
    let sn = n.sqrt();
    let kappa = stats.kappa;
    let (delta, q1, b) = (consts.delta, consts.q1, consts.b);
    let bf = b as f64;
    let alpha = steps.alpha_max();
    let k_d = steps.k_d();
    let mu = stats.mu_bar;
    let s3 = 3f64.sqrt();

    let f = norms.f();
    let g = 2.0 * stats.l_hat * (1.0 + sn) * (1.0 + 4.0 * sn * kappa.sqrt()) * (delta + q1 * (bf - 1.0));
    let c = 1.0 - norms.jr_max;
    let h = -4.0 * s3 * kappa * (1.0 - 1.0 / k_d) * norms.s_max;
    let k = bf * q1 * f;

    let mut reasons = Vec::new();
    let mut notes = Vec::new();

    let half_b = 0.5f64.powi(b as i32) - delta;
    let alpha_interval_end = (1.0 - delta) / g
        * (((1.0 - delta) * c - 4.0 * s3 * kappa * (1.0 - 1.0 / k_d) * norms.s_max * f * (bf * q1 + half_b))
            / (f * (bf * q1 + half_b)));
    let alpha_max_bound = alpha_interval_end.min(1.0 / (2.0 * stats.l_hat));

    let chf = c + h * f;
    let lambda_window = if chf > 0.0 {
        let lin = g * f * alpha - h * k;
        let root = (lin + (lin * lin + 4.0 * chf * g * k * alpha).sqrt()) / (2.0 * chf);
        (delta + root).powf(1.0 / bf)
    } else {
        reasons.push(format!("C + H F = {chf:.6e} must be positive for the window rate"));
        f64::NAN
    };
    let lambda_descent = (1.0 - alpha * mu / 3.0).sqrt();
    let lambda_terms = [lambda_window, lambda_descent, norms.jr_max];
    let lambda_candidate =
        lambda_terms.iter().copied().fold(f64::MIN, |a, v| if v.is_nan() || a.is_nan() { f64::NAN } else { a.max(v) });

    let w = lambda_candidate.powi(b as i32) - delta;
    let alpha_bound_at_lambda = w / g * (c * w / (f * w + k) + h);
    let rho = c * w / (4.0 * s3 * kappa * norms.s_max * (f * w + k));
    let kd_bound = if rho >= 1.0 { f64::INFINITY } else { 1.0 / (1.0 - rho) };

    if !(c > 0.0) {
        reasons.push(format!("C = 1 - ||JR||_max = {c:.6e} must be positive"));
    }
    if !(consts.delta < 1.0) {
        reasons.push(format!("delta = {delta:.6e} must be below 1"));
    }
    if !(alpha_max_bound > 0.0) {
        reasons.push(format!("k_D bound violated: alpha_max upper bound {alpha_max_bound:.6e} is not positive"));
    } else if !(alpha < alpha_max_bound) {
        reasons.push(format!("alpha_max = {alpha:.6e} exceeds its bound {alpha_max_bound:.6e}"));
    }

    let beta = overrides.beta.unwrap_or(2.0 * stats.l_hat / stats.mu_hat);
    let eta = overrides.eta.unwrap_or(1.0);
    let mut gain_product = None;
    if lambda_candidate.is_finite() {
        if half_b.signum() != w.signum() {
            notes.push(format!("(1/2^B - delta) = {half_b:.6e} and (lambda^B - delta) = {w:.6e} differ in sign"));
        }
        if k_d > 1.0 && !(k_d < kd_bound) {
            reasons.push(format!("k_D bound violated: k_D = {k_d:.6e} >= {kd_bound:.6e}"));
        }
        if !(w > 0.0) {
            reasons.push(format!("delta = {delta:.6e} is not below lambda^B"));
        }
        let params = GainParams { lambda: lambda_candidate, beta, eta, form: TrackingGainForm::AlphaMax };
        let gains = evaluate_gains_unchecked(stats, norms, steps, consts, &params, &TrajectoryOffsets::default());
        for v in &gains.violations {
            reasons.push(format!("constraint violated: {v}"));
        }
        let product = gains.product();
        gain_product = product.is_finite().then_some(product);
        if !(0.0..1.0).contains(&product) {
            reasons.push(format!("gain product {product:.6e} is not in [0, 1)"));
        }
    } else {
        reasons.push("no finite rate candidate; rate-dependent conditions not evaluated".into());
    }

    RateCertificate {
        f,
        g,
        c,
        h,
        k,
        delta,
        q1,
        tau: consts.tau,
        b,
        n_agents: stats.n_agents,
        alpha_max: alpha,
        k_d,
        alpha_max_bound,
        alpha_interval_end,
        alpha_bound_at_lambda,
        kd_bound,
        lambda_terms,
        lambda_candidate,
        lambda: reasons.is_empty().then_some(lambda_candidate),
        gain_product,
        beta,
        eta,
        norms: *norms,
        mode: consts.mode,
        reasons,
        notes,
    }
}

/// Constants entering the two-branch rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TwoBranchInputs {
    pub f: f64,
    pub g: f64,
    pub c: f64,
    pub h: f64,
    pub k: f64,
    pub delta: f64,
    pub b: usize,
    pub mu_bar: f64,
}

impl TwoBranchInputs {
    pub fn from_certificate(c: &RateCertificate, mu_bar: f64) -> Self {
        Self { f: c.f, g: c.g, c: c.c, h: c.h, k: c.k, delta: c.delta, b: c.b, mu_bar }
    }

    /// `((C+HF)(1-δ)^2 + HK(1-δ)) / (G(F+K))`
    pub fn interval_end(&self) -> f64 {
        let chf = self.c + self.h * self.f;
        let d = 1.0 - self.delta;
        (chf * d * d + self.h * self.k * d) / (self.g * (self.f + self.k))
    }

    /// Left end `3(1 - λ^{2B})/μ̄` of the non-emptiness interval.
    pub fn interval_left(&self, lambda: f64) -> f64 {
        3.0 * (1.0 - lambda.powi(2 * self.b as i32)) / self.mu_bar
    }

    /// Right end `((C+HF)(λ^B-δ)^2 + HK(λ^B-δ)) / (G(F+K))`.
    pub fn interval_right(&self, lambda: f64) -> f64 {
        let u = lambda.powi(self.b as i32) - self.delta;
        ((self.c + self.h * self.f) * u * u + self.h * self.k * u) / (self.g * (self.f + self.k))
    }

    /// Change of the left and right interval ends under a perturbation of
    /// `λ` by four units in the last place.
    pub fn interval_rounding(&self, lambda: f64) -> (f64, f64) {
        let b = self.b as f64;
        let dl = 4.0 * f64::EPSILON * lambda;
        let u = lambda.powi(self.b as i32) - self.delta;
        let left = 6.0 * b * lambda.powi(2 * self.b as i32 - 1) / self.mu_bar;
        let right = (2.0 * (self.c + self.h * self.f) * u + self.h * self.k).abs() * b * lambda.powi(self.b as i32 - 1)
            / (self.g * (self.f + self.k));
        (left * dl, right * dl)
    }

    /// Rate `(1 - α μ̄/3)^{1/(2B)}` of the small-step branch.
    pub fn descent_branch(&self, alpha: f64) -> f64 {
        (1.0 - alpha * self.mu_bar / 3.0).powf(1.0 / (2.0 * self.b as f64))
    }

    /// Rate `λ` with `λ^B` the positive root of
    /// `(C+HF)(w-δ)^2 + HK(w-δ) = G(F+K)α`.
    pub fn window_branch(&self, alpha: f64) -> f64 {
        let chf = self.c + self.h * self.f;
        let hk = self.h * self.k;
        let lin = 2.0 * self.delta * chf - hk;
        let w = (lin
            + (lin * lin
                + 4.0 * chf * (hk * self.delta + self.g * (self.f + self.k) * alpha - chf * self.delta * self.delta))
                .sqrt())
            / (2.0 * chf);
        w.powf(1.0 / self.b as f64)
    }

    /// Crossover rate at which both interval ends meet.
    pub fn lambda_mid(&self) -> f64 {
        let chf = self.c + self.h * self.f;
        let p = self.mu_bar * chf;
        let q = 3.0 * self.g * (self.f + self.k);
        let r = self.mu_bar * self.h * self.k;
        let d = self.delta;
        let lin = 2.0 * d * p - r;
        let w = (lin + ((r - 2.0 * d * p).powi(2) + 4.0 * (p + q) * (d * r + q - p * d * d)).sqrt()) / (2.0 * (p + q));
        w.powf(1.0 / self.b as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateBranch {
    Descent,
    Window,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TwoBranchRate {
    pub m: f64,
    pub lambda_mid: f64,
    pub lambda: f64,
    pub branch: RateBranch,
    pub interval_end: f64,
    /// `left(λ) <= α <= right(λ)` at the returned rate, within tolerance.
    pub interval_holds: bool,
}

/// Two-branch rate: small steps `α <= M` use the descent branch, larger
/// admissible steps the window branch.
pub fn two_branch_rate(inputs: &TwoBranchInputs, alpha_max: f64) -> Result<TwoBranchRate, CertifyError> {
    let chf = inputs.c + inputs.h * inputs.f;
    if !(inputs.delta < 1.0) {
        return Err(CertifyError::Domain(format!("delta = {} must be below 1", inputs.delta)));
    }
    if !(chf > 0.0) {
        return Err(CertifyError::Domain(format!("C + H F = {chf} must be positive")));
    }
    if !(inputs.mu_bar > 0.0 && inputs.g > 0.0) {
        return Err(CertifyError::Domain("mu_bar and G must be positive".into()));
    }
    let interval_end = inputs.interval_end();
    if !(interval_end > 0.0) {
        return Err(CertifyError::Domain(format!("step interval end {interval_end} is not positive")));
    }
    if !(alpha_max > 0.0 && alpha_max <= interval_end) {
        return Err(CertifyError::Domain(format!("alpha_max = {alpha_max} outside (0, {interval_end}]")));
    }
    let lambda_mid = inputs.lambda_mid();
    let m = inputs.interval_left(lambda_mid);
    let (lambda, branch) = if alpha_max <= m {
        (inputs.descent_branch(alpha_max), RateBranch::Descent)
    } else {
        (inputs.window_branch(alpha_max), RateBranch::Window)
    };
    let (left_tol, right_tol) = inputs.interval_rounding(lambda);
    let tol = 1e-9 * alpha_max.max(interval_end);
    let interval_holds = inputs.interval_left(lambda) <= alpha_max + tol + left_tol
        && alpha_max <= inputs.interval_right(lambda) + tol + right_tol;
    Ok(TwoBranchRate { m, lambda_mid, lambda, branch, interval_end, interval_holds })
}

/// Parameters of the inexact descent bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InexactParams {
    pub theta: f64,
    pub lambda: f64,
    pub beta: f64,
    pub eta: f64,
}

/// Hypotheses on `(θ, λ, β, η)`, with the smoothness constant read as `L̂`.
pub fn inexact_hypothesis_violations(stats: &SuiteStats, p: &InexactParams) -> Vec<String> {
    let mu = stats.mu_bar;
    let mut out = Vec::new();
    if !(p.beta >= 2.0) {
        out.push(format!("beta = {} must be at least 2", p.beta));
    }
    if !(p.eta > 0.0) {
        out.push(format!("eta = {} must be positive", p.eta));
    }
    let cap = ((p.beta + 1.0) / (mu * p.beta)).min(1.0 / (stats.l_hat * (1.0 + p.eta))).min(3.0 / mu);
    if !(p.theta > 0.0 && p.theta < cap) {
        out.push(format!("theta = {} outside (0, {cap})", p.theta));
    }
    let floor = (1.0 - p.theta * mu * p.beta / (2.0 * (p.beta + 1.0))).sqrt();
    if !(floor <= p.lambda && p.lambda < 1.0) {
        out.push(format!("lambda = {} outside [{floor}, 1)", p.lambda));
    }
    out
}

/// Audits `|r|^{λ,K} <= 2 r_0 + c_e ||e||^{λ,K} + c_u Σ_i ||v - u_i||^{λ,K}`
/// for every `K <= k` on a recorded inexact descent run.
pub fn audit_inexact_gradient_bound(
    run: &InexactRun,
    stats: &SuiteStats,
    p: &InexactParams,
    k: usize,
) -> Result<InequalityCheck, CertifyError> {
    let bad = inexact_hypothesis_violations(stats, p);
    if !bad.is_empty() {
        return Err(CertifyError::Hypothesis(bad));
    }
    let len = run.r.len().min(run.e.len()).min(run.u.len());
    if len <= k {
        return Err(CertifyError::ShortSequence { len, k });
    }
    let mu = stats.mu_bar;
    let lambda = p.lambda;
    let n = stats.n_agents;
    let c_e = (3.0 - p.theta * mu).sqrt() / (lambda * p.theta * mu);
    let c_u =
        (stats.l_hat * (1.0 + p.eta) / (p.eta * mu) + stats.mu_hat / mu * p.beta).sqrt() / (lambda * (n as f64).sqrt());

    let lhs = lambda_norm_prefix(&run.r[..=k], lambda);
    let e_norms: Vec<f64> = run.e[..=k].iter().map(|e| e.norm()).collect();
    let e_pref = lambda_norm_prefix(&e_norms, lambda);
    let mut u_sum = vec![0.0; k + 1];
    for i in 0..n {
        let dev: Vec<f64> =
            (0..=k).map(|t| (run.u[t].row(i).transpose() - &run.v[t.min(run.v.len() - 1)]).norm()).collect();
        for (acc, v) in u_sum.iter_mut().zip(lambda_norm_prefix(&dev, lambda)) {
            *acc += v;
        }
    }
    let r0 = run.r[0];
    let rhs: Vec<f64> = (0..=k).map(|t| 2.0 * r0 + c_e * e_pref[t] + c_u * u_sum[t]).collect();
    Ok(InequalityCheck::from_series("inexact descent bound", &lhs, &rhs))
}

/// Rate used when auditing a trace: halfway between 1 and the largest of the
/// descent floor, `δ^(1/B)` and 0.5. The averaged-mixing bound `||JR||_max`
/// is left to the admissibility report.
pub fn audit_lambda(stats: &SuiteStats, steps: &StepSizes, consts: &DeltaConstants, beta: f64) -> f64 {
    let floor = (1.0 - steps.alpha_max() * stats.mu_bar * beta / (2.0 * (beta + 1.0))).max(0.0).sqrt();
    let root = consts.delta.powf(1.0 / consts.b as f64);
    let lo = floor.max(root).max(LAMBDA_FLOOR);
    lo + 0.5 * (1.0 - lo)
}

/// Per-iteration norms of the quantities in the gain cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSequences {
    /// `||x(k) - 1x*||`
    pub q: Vec<f64>,
    /// `||J̃ x(k)||`
    pub x_tilde: Vec<f64>,
    pub y: Vec<f64>,
    pub h: Vec<f64>,
    /// `||J̃ h(k)||`
    pub h_tilde: Vec<f64>,
    /// `||J h(k)||`
    pub h_avg: Vec<f64>,
    pub z: Vec<f64>,
}

impl ChainSequences {
    pub fn from_trace(trace: &Trace) -> Result<Self, CertifyError> {
        let aux = trace.aux.as_ref().ok_or(CertifyError::MissingAux)?;
        let n = trace.n_agents;
        let pt = disagreement_projector(n);
        let pj = averaging_projector(n);
        let mut out = ChainSequences {
            q: Vec::new(),
            x_tilde: Vec::new(),
            y: Vec::new(),
            h: Vec::new(),
            h_tilde: Vec::new(),
            h_avg: Vec::new(),
            z: Vec::new(),
        };
        for (k, (row, a)) in trace.rows.iter().zip(aux).enumerate() {
            let x = trace.x_at(k);
            let finite = row.x.iter().chain(a.y.iter()).chain(a.h.iter()).chain(a.z.iter()).all(|v| v.is_finite());
            if !finite || !row.residual_q.is_finite() {
                return Err(CertifyError::NonFinite { k });
            }
            out.q.push(row.residual_q);
            out.x_tilde.push((&pt * &x).norm());
            out.y.push(a.y.norm());
            out.h.push(a.h.norm());
            out.h_tilde.push((&pt * &a.h).norm());
            out.h_avg.push((&pj * &a.h).norm());
            out.z.push(a.z.norm());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainAudit {
    /// The five arrows of the cycle.
    pub arrows: Vec<InequalityCheck>,
    /// Triangle split, window bound on `h̃` and averaged bound on `Jh`.
    pub sub_inequalities: Vec<InequalityCheck>,
    pub violations: Vec<ConstraintViolation>,
    pub lambda: f64,
    pub horizon: usize,
}

impl ChainAudit {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.arrows.iter().chain(&self.sub_inequalities).all(|c| c.holds)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.arrows.iter().chain(&self.sub_inequalities).filter(|c| !c.holds).map(|c| c.name.as_str()).collect()
    }

    pub fn report(&self) -> Report {
        let mut r = Report::default();
        r.value("lambda", self.lambda);
        r.count("horizon", self.horizon);
        for c in self.arrows.iter().chain(&self.sub_inequalities) {
            r.check(c);
        }
        for (i, v) in self.violations.iter().enumerate() {
            r.text(&format!("constraint_violation.{i:02}"), &v.to_string());
        }
        r.status(self.passed());
        r
    }
}

/// Audits every arrow of `q → z → h → {x̃, y} → q` and the three pieces of
/// the `z → h` arrow on a recorded trace, at every prefix `K <= k`.
pub fn audit_gain_chain(trace: &Trace, gains: &GainSet, k: usize) -> Result<ChainAudit, CertifyError> {
    let seqs = ChainSequences::from_trace(trace)?;
    if seqs.len() <= k {
        return Err(CertifyError::ShortSequence { len: seqs.len(), k });
    }
    let lambda = gains.params.lambda;
    let pref = |v: &[f64]| lambda_norm_prefix(&v[..=k], lambda);
    let q = pref(&seqs.q);
    let xt = pref(&seqs.x_tilde);
    let y = pref(&seqs.y);
    let h = pref(&seqs.h);
    let ht = pref(&seqs.h_tilde);
    let hj = pref(&seqs.h_avg);
    let z = pref(&seqs.z);
    let lin = |a: &[f64], g: f64, b: &[f64], g2: f64, w: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| g * x + g2 * y + w).collect()
    };
    let zero = vec![0.0; k + 1];

    let arrows = vec![
        InequalityCheck::from_series("{x~, y} -> q", &q, &lin(&xt, gains.gamma_11, &y, gains.gamma_12, gains.omega_1)),
        InequalityCheck::from_series("h -> x~", &xt, &lin(&h, gains.gamma_21, &zero, 0.0, gains.omega_21)),
        InequalityCheck::from_series("h -> y", &y, &lin(&h, gains.gamma_22, &zero, 0.0, gains.omega_22)),
        InequalityCheck::from_series("z -> h", &h, &lin(&z, gains.gamma_3, &zero, 0.0, gains.omega_3)),
        InequalityCheck::from_series("q -> z", &z, &lin(&q, gains.gamma_4, &zero, 0.0, gains.omega_4)),
    ];

    let b = gains.b;
    let lb = lambda.powi(b as i32);
    let gap = lb - gains.delta;
    let f = gains.norms.f();
    let window_gain = gains.q1 * f * lambda * (1.0 - lb) / (gap * (1.0 - lambda));
    let window_offset =
        lb / gap * seqs.h_tilde.iter().take(b).enumerate().map(|(t, x)| x / lambda.powi(t as i32)).sum::<f64>();
    let sub_inequalities = vec![
        InequalityCheck::from_series("h split into h~ and Jh", &h, &lin(&ht, 1.0, &hj, 1.0, 0.0)),
        InequalityCheck::from_series("z -> h~ over windows", &ht, &lin(&z, window_gain, &zero, 0.0, window_offset)),
        InequalityCheck::from_series("{h, z} -> Jh", &hj, &lin(&h, gains.norms.jr_max / lambda, &z, f, 0.0)),
    ];
    Ok(ChainAudit { arrows, sub_inequalities, violations: gains.violations.clone(), lambda, horizon: k })
}

/// Diff-stable `key = value` document with sorted keys and fixed precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    entries: BTreeMap<String, String>,
}

impl Report {
    pub fn value(&mut self, key: &str, v: f64) {
        self.entries.insert(key.to_string(), format_value(v));
    }

    pub fn count(&mut self, key: &str, v: usize) {
        self.entries.insert(key.to_string(), v.to_string());
    }

    pub fn text(&mut self, key: &str, v: &str) {
        self.entries.insert(key.to_string(), format!("{v:?}"));
    }

    pub fn constant(&mut self, name: &str, formula: &str, v: f64) {
        self.text(&format!("constant.{name}.formula"), formula);
        self.value(&format!("constant.{name}.value"), v);
    }

    pub fn check(&mut self, c: &InequalityCheck) {
        let key = format!("check.{}", c.name.replace(' ', "_"));
        self.value(&format!("{key}.lhs"), c.lhs);
        self.value(&format!("{key}.rhs"), c.rhs);
        self.value(&format!("{key}.slack"), c.slack);
        self.count(&format!("{key}.worst_k"), c.worst_k);
        self.text(&format!("{key}.status"), if c.holds { "pass" } else { "fail" });
    }

    pub fn status(&mut self, passed: bool) {
        self.text("status", if passed { "pass" } else { "fail" });
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn merge(&mut self, prefix: &str, other: &Report) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.12e}")
    }
}
