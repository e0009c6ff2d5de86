//! Experiment configuration, orchestration and on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{
    audit_gain_chain, audit_lambda, certify, empirical_delta, evaluate_gains_unchecked, measure_norm_bounds,
    CertifyError, CertifyOverrides, ChainAudit, DeltaConstants, DeltaMode, GainParams, GainSet, NormBounds,
    RateCertificate, Report, TrackingGainForm, TrajectoryOffsets,
};
use crate::engine::{
    run_dgd_baseline, run_push_diging, run_push_sum_baseline, Algorithm, EngineError, RunOptions, StepSizes, Trace,
};
use crate::graphs::{
    make_periodic_partition, make_random_sequence, make_ring, verify_b0_connectivity, ConnectivityReport, Digraph,
    GraphError, GraphSequence,
};
use crate::mixing::{consensus_constants, push_sum_scaling, ConsensusConstants, MixingError, DEFAULT_SCALING_FLOOR};
use crate::objectives::{make_sensor_suite, ObjectiveError, ObjectiveSuite};

/// Overrides the base directory of relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "PUSHDIGING_OUTPUT_ROOT";

/// Windows longer than this fall back to `N B0` in certified mode.
const MAX_CERTIFIED_WINDOW: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Mixing(#[from] MixingError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error("{context}: {source}")]
    Engine { context: String, source: EngineError },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Invalid(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Ring,
    PeriodicPartition,
    Random,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub generator: GeneratorKind,
    pub n_agents: usize,
    pub b0: Option<usize>,
    pub seed: Option<u64>,
    pub probability: Option<f64>,
    pub retry_budget: Option<usize>,
    /// One edge list per period slice, 1-based `[from, to]` pairs.
    pub slices: Option<Vec<Vec<[usize; 2]>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    Sensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub suite: SuiteKind,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub run: Vec<Algorithm>,
    /// Per-agent step-sizes for Push-DIGing.
    pub step_sizes: Option<Vec<f64>>,
    /// Initial diminishing step of the baselines; defaults to the mean step-size.
    pub alpha0: Option<f64>,
}

fn default_fit_window() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub horizon: usize,
    #[serde(default)]
    pub stop_residual: f64,
    /// Initial iterate; drawn uniformly from (0, 1) with `seed` when absent.
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Trailing fraction of iterations used for the fitted rate.
    #[serde(default = "default_fit_window")]
    pub fit_window: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateConfig {
    /// Window length; defaults to `N B0` (or the smallest valid window in
    /// certified mode).
    pub b: Option<usize>,
    #[serde(default)]
    pub mode: DeltaMode,
    pub beta: Option<f64>,
    pub eta: Option<f64>,
    /// Rate for the gain-chain audit; chosen automatically when absent.
    pub lambda: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Csv,
    Json,
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub graph: GraphConfig,
    pub objective: ObjectiveConfig,
    pub algorithms: AlgorithmConfig,
    pub run: RunConfig,
    pub certificate: Option<CertificateConfig>,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or("experiment")
    }

    pub fn b0(&self) -> usize {
        self.graph.b0.unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let n = self.graph.n_agents;
        if n == 0 {
            return Err(invalid("graph.n_agents must be positive"));
        }
        let g = &self.graph;
        match g.generator {
            GeneratorKind::Ring => {}
            GeneratorKind::PeriodicPartition => {
                if g.b0.is_none() {
                    return Err(invalid("graph.b0 is required for the periodic-partition generator"));
                }
            }
            GeneratorKind::Random => {
                if g.probability.is_none() {
                    return Err(invalid("graph.probability is required for the random generator"));
                }
            }
            GeneratorKind::Explicit => {
                if g.slices.as_ref().is_none_or(|s| s.is_empty()) {
                    return Err(invalid("graph.slices must list at least one slice for the explicit generator"));
                }
            }
        }
        if g.b0 == Some(0) {
            return Err(invalid("graph.b0 must be positive"));
        }
        let o = &self.objective;
        for (name, v) in [("a", &o.a), ("b", &o.b), ("c", &o.c)] {
            if v.len() != n {
                return Err(invalid(format!("objective.{name} has length {} but n_agents = {n}", v.len())));
            }
        }
        let alg = &self.algorithms;
        if alg.run.is_empty() {
            return Err(invalid("algorithms.run must name at least one algorithm"));
        }
        if alg.run.contains(&Algorithm::PushDiging) {
            match &alg.step_sizes {
                None => return Err(invalid("algorithms.step_sizes is required for push-diging")),
                Some(d) if d.len() != n => {
                    return Err(invalid(format!("step-size vector length {} does not match n_agents = {n}", d.len())))
                }
                Some(d) => {
                    StepSizes::new(d.clone()).map_err(|e| invalid(e.to_string()))?;
                }
            }
        }
        let needs_alpha0 = alg.run.iter().any(|a| *a != Algorithm::PushDiging);
        if needs_alpha0 && alg.alpha0.is_none() && alg.step_sizes.is_none() {
            return Err(invalid("algorithms.alpha0 or algorithms.step_sizes is required for the baselines"));
        }
        if let Some(a0) = alg.alpha0 {
            if !(a0 > 0.0 && a0.is_finite()) {
                return Err(invalid(format!("algorithms.alpha0 = {a0} must be positive")));
            }
        }
        let r = &self.run;
        if r.horizon == 0 {
            return Err(invalid("run.horizon must be positive"));
        }
        if !(r.stop_residual >= 0.0) {
            return Err(invalid("run.stop_residual must be nonnegative"));
        }
        if !(r.fit_window > 0.0 && r.fit_window <= 1.0) {
            return Err(invalid("run.fit_window must lie in (0, 1]"));
        }
        if let Some(x0) = &r.x0 {
            if x0.len() != n {
                return Err(invalid(format!("run.x0 has length {} but n_agents = {n}", x0.len())));
            }
        }
        if let Some(c) = &self.certificate {
            if c.b == Some(0) {
                return Err(invalid("certificate.b must be positive"));
            }
        }
        Ok(())
    }

    pub fn sequence(&self) -> Result<GraphSequence, HarnessError> {
        let g = &self.graph;
        let seed = g.seed.unwrap_or(0);
        Ok(match g.generator {
            GeneratorKind::Ring => make_ring(g.n_agents)?,
            GeneratorKind::PeriodicPartition => make_periodic_partition(g.n_agents, self.b0(), seed)?,
            GeneratorKind::Random => make_random_sequence(
                g.n_agents,
                g.probability.unwrap_or(0.0),
                self.b0(),
                g.retry_budget.unwrap_or(100),
                seed,
            )?,
            GeneratorKind::Explicit => {
                let slices = g
                    .slices
                    .as_ref()
                    .map(|s| {
                        s.iter()
                            .map(|edges| {
                                let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
                                Digraph::from_one_based(g.n_agents, &pairs)
                            })
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .transpose()?
                    .unwrap_or_default();
                GraphSequence::periodic(slices, self.b0())?
            }
        })
    }

    pub fn suite(&self) -> Result<ObjectiveSuite, HarnessError> {
        let o = &self.objective;
        match o.suite {
            SuiteKind::Sensor => Ok(make_sensor_suite(&o.a, &o.b, &o.c)?),
        }
    }

    pub fn step_sizes(&self) -> Option<StepSizes> {
        self.algorithms.step_sizes.clone().and_then(|d| StepSizes::new(d).ok())
    }

    pub fn alpha0(&self) -> f64 {
        self.algorithms.alpha0.or_else(|| self.step_sizes().map(|d| d.alpha_mean())).unwrap_or(0.0)
    }

    pub fn initial_iterate(&self) -> DMatrix<f64> {
        let n = self.graph.n_agents;
        match &self.run.x0 {
            Some(x0) => DMatrix::from_column_slice(n, 1, x0),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed);
                DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.0..1.0))
            }
        }
    }

    fn run_options(&self, record_aux: bool) -> RunOptions {
        RunOptions {
            max_iters: self.run.horizon,
            stop_residual: self.run.stop_residual,
            record_aux,
            scaling_floor: DEFAULT_SCALING_FLOOR,
            x_star: None,
        }
    }

    /// Output directory, with relative paths placed under `$PUSHDIGING_OUTPUT_ROOT`
    /// when it is set.
    pub fn output_dir(&self) -> PathBuf {
        let dir = &self.output.dir;
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => Path::new(&root).join(dir),
            _ => dir.clone(),
        }
    }
}

/// Parses and validates a TOML experiment document.
pub fn load_config(document: &str) -> Result<ExperimentConfig, HarnessError> {
    if document.trim().is_empty() {
        return Err(invalid("empty config document"));
    }
    let cfg: ExperimentConfig = toml::from_str(document)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    load_config(&text)
}

/// Least-squares line `y = slope x + intercept` with its coefficient of
/// determination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Some(LinearFit { slope, intercept, r2, points: n })
}

/// Indices of the trailing `window` fraction of a series of `len` points.
fn trailing(len: usize, window: f64) -> std::ops::Range<usize> {
    let keep = ((len as f64) * window).ceil() as usize;
    len.saturating_sub(keep.max(2).min(len))..len
}

/// Values at or below this fraction of the initial value are treated as the
/// floating-point floor and excluded from rate fits.
pub const FIT_FLOOR: f64 = 1e-12;

/// Prefix of `values` before the series first reaches the floating-point floor.
fn above_floor(values: &[f64]) -> &[f64] {
    let floor = FIT_FLOOR * values.first().copied().filter(|v| *v > 0.0).unwrap_or(1.0);
    let end = values.iter().position(|v| *v <= floor).unwrap_or(values.len());
    &values[..end]
}

/// Fit of `log10(values[k])` against `k` over the trailing window of the
/// iterations preceding the floating-point floor; the slope is the log10 of
/// the per-iteration contraction.
pub fn fit_log_rate(values: &[f64], window: f64) -> Option<LinearFit> {
    let values = above_floor(values);
    let (xs, ys): (Vec<f64>, Vec<f64>) = trailing(values.len(), window)
        .filter(|&k| values[k] > 0.0 && values[k].is_finite())
        .map(|k| (k as f64, values[k].log10()))
        .unzip();
    linear_fit(&xs, &ys)
}

/// Fit of `log10(values[k])` against `log10(k)` over the trailing window.
pub fn fit_log_log(values: &[f64], window: f64) -> Option<LinearFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = trailing(values.len(), window)
        .filter(|&k| k > 0 && values[k] > 0.0 && values[k].is_finite())
        .map(|k| ((k as f64).log10(), values[k].log10()))
        .unzip();
    linear_fit(&xs, &ys)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunOutcome {
    Completed { iterations: usize },
    Diverged { k: usize, reason: String },
    Failed { reason: String },
}

impl RunOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunOutcome::Completed { .. })
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub outcome: RunOutcome,
    pub trace: Option<Trace>,
    /// Fit of `log10 residual_q` against `k`.
    pub fit: Option<LinearFit>,
}

#[derive(Clone, Debug)]
pub struct ArtifactBundle {
    pub dir: PathBuf,
    pub runs: Vec<RunRecord>,
    pub certificate: Option<RateCertificate>,
    pub summary: Report,
    pub files: Vec<PathBuf>,
}

impl ArtifactBundle {
    pub fn all_ok(&self) -> bool {
        self.runs.iter().all(|r| r.outcome.is_ok())
    }

    pub fn run(&self, alg: Algorithm) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.algorithm == alg)
    }
}

fn write_file(path: &Path, contents: &str, files: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    files.push(path.to_path_buf());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })
}

fn execute(cfg: &ExperimentConfig, alg: Algorithm, seq: &GraphSequence, suite: &ObjectiveSuite) -> RunRecord {
    let x0 = cfg.initial_iterate();
    let opts = cfg.run_options(false);
    let result = match alg {
        Algorithm::PushDiging => match cfg.step_sizes() {
            Some(d) => run_push_diging(seq, suite, &d, &x0, &opts),
            None => Err(EngineError::NoStepSizes),
        },
        Algorithm::Dgd => run_dgd_baseline(seq, suite, cfg.alpha0(), &x0, &opts),
        Algorithm::PushSum => run_push_sum_baseline(seq, suite, cfg.alpha0(), &x0, &opts),
    };
    match result {
        Ok(trace) => {
            let residuals: Vec<f64> = trace.rows.iter().map(|r| r.residual_q).collect();
            RunRecord {
                algorithm: alg,
                outcome: RunOutcome::Completed { iterations: trace.rows.len() - 1 },
                fit: fit_log_rate(&residuals, cfg.run.fit_window),
                trace: Some(trace),
            }
        }
        Err(EngineError::Diverged { k, reason }) => RunRecord {
            algorithm: alg,
            outcome: RunOutcome::Diverged { k, reason: format!("{} / {alg}: {reason}", cfg.label()) },
            trace: None,
            fit: None,
        },
        Err(e) => RunRecord {
            algorithm: alg,
            outcome: RunOutcome::Failed { reason: format!("{} / {alg}: {e}", cfg.label()) },
            trace: None,
            fit: None,
        },
    }
}

/// Window length used for certificates and audits.
pub fn window_length(cfg: &ExperimentConfig) -> usize {
    let n = cfg.graph.n_agents;
    let b0 = cfg.b0();
    let cert = cfg.certificate.clone().unwrap_or_default();
    cert.b.unwrap_or_else(|| match cert.mode {
        DeltaMode::Certified => {
            let w = ConsensusConstants::min_valid_window(n, b0);
            if w.is_finite() && w <= MAX_CERTIFIED_WINDOW {
                w as usize
            } else {
                n * b0
            }
        }
        DeltaMode::EmpiricalDelta => n * b0,
    })
}

/// Norm bounds and window constants measured over the configured horizon.
pub fn measured_constants(
    cfg: &ExperimentConfig,
    seq: &GraphSequence,
) -> Result<(NormBounds, DeltaConstants), HarnessError> {
    let horizon = cfg.run.horizon;
    let b = window_length(cfg);
    let scaling = push_sum_scaling(seq, horizon.max(b), DEFAULT_SCALING_FLOOR)?;
    let norms = measure_norm_bounds(seq, &scaling, horizon)?;
    let mode = cfg.certificate.as_ref().map(|c| c.mode).unwrap_or_default();
    let consts = match mode {
        DeltaMode::Certified => consensus_constants(cfg.graph.n_agents, cfg.b0(), b).into(),
        DeltaMode::EmpiricalDelta => empirical_delta(seq, &scaling, b, horizon.max(b))?,
    };
    Ok((norms, consts))
}

pub fn certificate_for(cfg: &ExperimentConfig) -> Result<RateCertificate, HarnessError> {
    let seq = cfg.sequence()?;
    let suite = cfg.suite()?;
    let steps = cfg.step_sizes().ok_or_else(|| invalid("certificate requires algorithms.step_sizes"))?;
    let (norms, consts) = measured_constants(cfg, &seq)?;
    let c = cfg.certificate.clone().unwrap_or_default();
    Ok(certify(&suite.stats(), &norms, &consts, &steps, &CertifyOverrides { beta: c.beta, eta: c.eta }))
}

fn comparison_csv(runs: &[RunRecord]) -> String {
    let traces: Vec<(Algorithm, &Trace)> =
        runs.iter().filter_map(|r| r.trace.as_ref().map(|t| (r.algorithm, t))).collect();
    let len = traces.iter().map(|(_, t)| t.rows.len()).max().unwrap_or(0);
    let mut out = String::from("k");
    for (alg, _) in &traces {
        out.push_str(&format!(",fig1_metric_{}", alg.name().replace('-', "_")));
    }
    out.push('\n');
    for k in 0..len {
        out.push_str(&k.to_string());
        for (_, t) in &traces {
            out.push(',');
            if let Some(row) = t.rows.get(k) {
                out.push_str(&crate::engine::format_full(row.fig1_metric));
            }
        }
        out.push('\n');
    }
    out
}

fn summarize(runs: &[RunRecord], cert: Option<&RateCertificate>) -> Report {
    let mut r = Report::default();
    for run in runs {
        let p = run.algorithm.name();
        match &run.outcome {
            RunOutcome::Completed { iterations } => {
                r.text(&format!("{p}.status"), "completed");
                r.count(&format!("{p}.iterations"), *iterations);
            }
            RunOutcome::Diverged { k, reason } => {
                r.text(&format!("{p}.status"), "diverged");
                r.count(&format!("{p}.diverged_at"), *k);
                r.text(&format!("{p}.reason"), reason);
            }
            RunOutcome::Failed { reason } => {
                r.text(&format!("{p}.status"), "failed");
                r.text(&format!("{p}.reason"), reason);
            }
        }
        if let Some(t) = &run.trace {
            let last = t.final_row();
            r.value(&format!("{p}.final_residual_q"), last.residual_q);
            r.value(&format!("{p}.final_fig1_metric"), last.fig1_metric);
        }
        if let Some(f) = &run.fit {
            r.value(&format!("{p}.fitted_slope_log10"), f.slope);
            r.value(&format!("{p}.fitted_rate"), 10f64.powf(f.slope));
            r.value(&format!("{p}.fit_r2"), f.r2);
        }
    }
    if let Some(c) = cert {
        match c.lambda {
            Some(l) => r.value("certificate.lambda", l),
            None => r.text("certificate.lambda", "invalid"),
        }
        r.value("certificate.alpha_max_bound", c.alpha_max_bound);
        r.text("certificate.mode", &c.mode.to_string());
    }
    r.status(runs.iter().all(|x| x.outcome.is_ok()));
    r
}

/// Runs every configured algorithm and writes traces, the comparison file,
/// the summary and (when configured) the certificate into the output
/// directory resolved from the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ArtifactBundle, HarnessError> {
    run_experiment_in(cfg, &cfg.output_dir())
}

pub fn run_experiment_in(cfg: &ExperimentConfig, dir: &Path) -> Result<ArtifactBundle, HarnessError> {
    cfg.validate()?;
    let seq = cfg.sequence()?;
    let suite = cfg.suite()?;
    let runs: Vec<RunRecord> = cfg.algorithms.run.iter().map(|&alg| execute(cfg, alg, &seq, &suite)).collect();
    let certificate = match &cfg.certificate {
        Some(_) if cfg.step_sizes().is_some() => Some(certificate_for(cfg)?),
        _ => None,
    };
    let summary = summarize(&runs, certificate.as_ref());

    create_dir(dir)?;
    let mut files = Vec::new();
    if cfg.output.formats.contains(&OutputFormat::Csv) {
        for run in &runs {
            if let Some(t) = &run.trace {
                write_file(&dir.join(format!("trace_{}.csv", run.algorithm.name())), &t.to_csv(), &mut files)?;
            }
        }
        write_file(&dir.join("comparison.csv"), &comparison_csv(&runs), &mut files)?;
    }
    write_file(&dir.join("summary.txt"), &summary.render(), &mut files)?;
    if let Some(c) = &certificate {
        write_file(&dir.join("certificate.txt"), &c.report().render(), &mut files)?;
    }
    if cfg.output.formats.contains(&OutputFormat::Json) {
        let outcomes: BTreeMap<&str, &RunOutcome> = runs.iter().map(|r| (r.algorithm.name(), &r.outcome)).collect();
        let json = serde_json::to_string_pretty(&outcomes).expect("outcomes serialize");
        write_file(&dir.join("summary.json"), &(json + "\n"), &mut files)?;
    }
    Ok(ArtifactBundle { dir: dir.to_path_buf(), runs, certificate, summary, files })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepEntry {
    pub scale: f64,
    pub alpha_max: f64,
    pub outcome: RunOutcome,
    pub fitted_rate: Option<f64>,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub largest_converging_scale: Option<f64>,
    /// Step bound of the base configuration's certificate, when one is configured.
    pub certificate_alpha_bound: Option<f64>,
}

impl SweepReport {
    pub fn report(&self) -> Report {
        let mut r = Report::default();
        for (i, e) in self.entries.iter().enumerate() {
            let p = format!("scale.{i:02}");
            r.value(&format!("{p}.scale"), e.scale);
            r.value(&format!("{p}.alpha_max"), e.alpha_max);
            let status = match &e.outcome {
                RunOutcome::Completed { .. } => "converged".to_string(),
                RunOutcome::Diverged { k, .. } => format!("diverged at {k}"),
                RunOutcome::Failed { reason } => format!("failed: {reason}"),
            };
            r.text(&format!("{p}.status"), &status);
            if let Some(rate) = e.fitted_rate {
                r.value(&format!("{p}.fitted_rate"), rate);
            }
            if let Some(b) = self.certificate_alpha_bound {
                r.text(&format!("{p}.within_certified_bound"), if e.alpha_max < b { "yes" } else { "no" });
            }
        }
        match self.largest_converging_scale {
            Some(s) => r.value("largest_converging_scale", s),
            None => r.text("largest_converging_scale", "none"),
        }
        if let Some(b) = self.certificate_alpha_bound {
            r.value("certificate.alpha_max_bound", b);
        }
        r
    }
}

/// Re-runs Push-DIGing with the step-sizes scaled by each grid value, each in
/// its own subdirectory of `dir`. Runs execute concurrently.
pub fn sweep_step_sizes(base: &ExperimentConfig, scales: &[f64], dir: &Path) -> Result<SweepReport, HarnessError> {
    let base_steps = base.step_sizes().ok_or_else(|| invalid("sweep requires algorithms.step_sizes"))?;
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(invalid(format!("sweep scale {s} must be positive")));
    }
    let configs: Vec<(f64, ExperimentConfig, PathBuf)> = scales
        .iter()
        .enumerate()
        .map(|(i, &scale)| {
            let mut cfg = base.clone();
            cfg.algorithms.run = vec![Algorithm::PushDiging];
            cfg.algorithms.step_sizes = Some(base_steps.alphas().iter().map(|a| a * scale).collect());
            cfg.certificate = None;
            (scale, cfg, dir.join(format!("scale-{i:02}-{scale}")))
        })
        .collect();
    let results: Vec<Result<ArtifactBundle, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            configs.iter().map(|(_, cfg, sub)| s.spawn(move || run_experiment_in(cfg, sub))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut entries = Vec::with_capacity(scales.len());
    for ((scale, cfg, sub), res) in configs.iter().zip(results) {
        let alpha_max = cfg.step_sizes().map(|d| d.alpha_max()).unwrap_or(f64::NAN);
        let (outcome, fitted_rate) = match res {
            Ok(bundle) => {
                let run = &bundle.runs[0];
                (run.outcome.clone(), run.fit.map(|f| 10f64.powf(f.slope)))
            }
            Err(e) => (RunOutcome::Failed { reason: e.to_string() }, None),
        };
        entries.push(SweepEntry { scale: *scale, alpha_max, outcome, fitted_rate, dir: sub.clone() });
    }
    let largest_converging_scale = entries
        .iter()
        .filter(|e| e.outcome.is_ok())
        .map(|e| e.scale)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
    let certificate_alpha_bound = match &base.certificate {
        Some(_) => Some(certificate_for(base)?.alpha_max_bound),
        None => None,
    };
    let report = SweepReport { entries, largest_converging_scale, certificate_alpha_bound };
    if !scales.is_empty() {
        create_dir(dir)?;
        let mut files = Vec::new();
        write_file(&dir.join("sweep.txt"), &report.report().render(), &mut files)?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct AuditBundle {
    pub gains: GainSet,
    pub chain: ChainAudit,
    pub report: Report,
}

impl AuditBundle {
    pub fn passed(&self) -> bool {
        self.chain.passed()
    }
}

/// Runs Push-DIGing with auxiliary recording and audits the gain cycle at
/// the configured (or automatic) rate over the full horizon.
pub fn audit_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<AuditBundle, HarnessError> {
    cfg.validate()?;
    let seq = cfg.sequence()?;
    let suite = cfg.suite()?;
    let steps = cfg.step_sizes().ok_or_else(|| invalid("audit requires algorithms.step_sizes"))?;
    let mut opts = cfg.run_options(true);
    opts.stop_residual = 0.0;
    let trace = run_push_diging(&seq, &suite, &steps, &cfg.initial_iterate(), &opts)
        .map_err(|source| HarnessError::Engine { context: format!("{} / audit", cfg.label()), source })?;
    let (norms, consts) = measured_constants(cfg, &seq)?;
    let stats = suite.stats();
    let c = cfg.certificate.clone().unwrap_or_default();
    let mut params = GainParams::standard(&stats, 0.0);
    if let Some(b) = c.beta {
        params.beta = b;
    }
    if let Some(e) = c.eta {
        params.eta = e;
    }
    params.form = TrackingGainForm::AlphaMax;
    params.lambda = c.lambda.unwrap_or_else(|| audit_lambda(&stats, &steps, &consts, params.beta));
    let offsets = TrajectoryOffsets::from_trace(&trace, consts.b)?;
    let gains = evaluate_gains_unchecked(&stats, &norms, &steps, &consts, &params, &offsets);
    let chain = audit_gain_chain(&trace, &gains, trace.rows.len() - 1)?;
    let mut report = chain.report();
    report.text("mode", &consts.mode.to_string());
    report.value("delta", consts.delta);
    report.value("q1", consts.q1);
    report.count("b", consts.b);
    create_dir(dir)?;
    let mut files = Vec::new();
    write_file(&dir.join("audit.txt"), &report.render(), &mut files)?;
    Ok(AuditBundle { gains, chain, report })
}

/// Verifies the configured connectivity window over the horizon.
pub fn check_graph(cfg: &ExperimentConfig) -> Result<ConnectivityReport, HarnessError> {
    let seq = cfg.sequence()?;
    Ok(verify_b0_connectivity(&seq, cfg.b0(), cfg.run.horizon))
}
