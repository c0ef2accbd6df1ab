//! Run configuration, synthetic datasets, seeded runs, comparison tables and
//! on-disk persistence.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    exact_rate, fit_rate, verify_trajectory, RateFit, Tolerances, VerificationReport,
};
use crate::error::{Error, Result};
use crate::flows::FlowKind;
use crate::integrator::{integrate, IntegratorConfig, Method, StopRule, Termination, Trajectory};
use crate::linalg::{Matrix, Vector, DEFAULT_RANK_TOL};
use crate::network::{cost, forward, Activation, Layer, NetworkSpec, TrainingSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RANK_LOSS: i32 = 3;

/// ChaCha stream used for dataset generation.
pub const DATASET_STREAM: u64 = 1;
/// ChaCha stream used for parameter initialization.
pub const INIT_STREAM: u64 = 2;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const VERIFICATION_FILE: &str = "verification.json";
pub const RECORD_FILE: &str = "run.json";

/// Copies of each input point in the teacher law.
pub const TEACHER_COPIES: usize = 8;
const TEACHER_WEIGHT_SCALE: f64 = 1.5;
const TEACHER_BIAS_SCALE: f64 = 0.3;
const TEACHER_AMPLITUDE: f64 = 0.5;
const GAUSSIAN_SEPARATION: f64 = 2.0;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataLaw {
    /// Class-dependent Gaussian clouds.
    #[serde(alias = "gaussian_inputs")]
    Gaussian,
    /// Regular grid on `[-1, 1]^M`, labels cycling through the classes.
    #[serde(alias = "grid_inputs")]
    Grid,
    /// Repeated inputs whose label frequencies equal a one-unit tanh
    /// network's output, so the least-squares optimum is attained at finite
    /// parameters. Requires `Q = 2` and `N` a multiple of 8.
    Teacher,
}

impl std::str::FromStr for DataLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gaussian_inputs" => Ok(DataLaw::Gaussian),
            "grid" | "grid_inputs" => Ok(DataLaw::Grid),
            "teacher" => Ok(DataLaw::Teacher),
            other => Err(Error::Config(format!("unknown dataset law {other:?}"))),
        }
    }
}

fn one_hot_outputs(q: usize) -> Vec<Vec<f64>> {
    (0..q)
        .map(|i| (0..q).map(|k| if i == k { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn check_dataset_shape(m: usize, q: usize, n: usize) -> Result<()> {
    if m == 0 || q == 0 || n == 0 {
        return Err(Error::InvalidShape(format!(
            "dataset needs M, Q, N ≥ 1, got M = {m}, Q = {q}, N = {n}"
        )));
    }
    if q > n {
        return Err(Error::InvalidShape(format!(
            "every class needs a sample: Q = {q} > N = {n}"
        )));
    }
    Ok(())
}

/// Synthetic training set with one-hot reference outputs `e_1..e_Q`.
pub fn generate_dataset(
    m: usize,
    q: usize,
    n: usize,
    law: DataLaw,
    seed: u64,
) -> Result<TrainingSet> {
    check_dataset_shape(m, q, n)?;
    let mut rng = rng_for(seed, DATASET_STREAM);
    let labels: Vec<usize> = (0..n).map(|j| j % q).collect();
    let inputs = match law {
        DataLaw::Gaussian => {
            let means: Vec<Vec<f64>> = (0..q)
                .map(|_| {
                    (0..m)
                        .map(|_| GAUSSIAN_SEPARATION * normal(&mut rng))
                        .collect()
                })
                .collect();
            labels
                .iter()
                .map(|&l| means[l].iter().map(|c| c + normal(&mut rng)).collect())
                .collect()
        }
        DataLaw::Grid => grid_points(m, n),
        DataLaw::Teacher if q == 2 => return teacher_dataset(m, n, seed).map(|(data, _)| data),
        DataLaw::Teacher => {
            return Err(Error::InvalidShape(format!(
                "teacher law needs Q = 2, got {q}"
            )))
        }
    };
    TrainingSet::new(inputs, one_hot_outputs(q), labels)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn grid_points(m: usize, n: usize) -> Vec<Vec<f64>> {
    let mut side = 1usize;
    while side.checked_pow(m as u32).is_some_and(|c| c < n) {
        side += 1;
    }
    let coord = |i: usize| {
        if side == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (side - 1) as f64
        }
    };
    (0..n)
        .map(|j| {
            let mut rest = j;
            let mut u = vec![0.0; m];
            for slot in u.iter_mut().rev() {
                *slot = coord(rest % side);
                rest /= side;
            }
            u
        })
        .collect()
}

/// Teacher-law dataset together with the teacher parameters in the layout of
/// widths `[M, 1, 2]`.
pub fn teacher_dataset(m: usize, n: usize, seed: u64) -> Result<(TrainingSet, Vector)> {
    check_dataset_shape(m, 2, n)?;
    if n % TEACHER_COPIES != 0 {
        return Err(Error::InvalidShape(format!(
            "teacher law needs N to be a multiple of {TEACHER_COPIES}, got {n}"
        )));
    }
    let mut rng = rng_for(seed, DATASET_STREAM);
    let w: Vec<f64> = (0..m)
        .map(|_| TEACHER_WEIGHT_SCALE * normal(&mut rng))
        .collect();
    let b = TEACHER_BIAS_SCALE * normal(&mut rng);
    let w_sq: f64 = w.iter().map(|v| v * v).sum();
    if !(w_sq > 0.0) {
        return Err(Error::InvalidShape("degenerate teacher weights".into()));
    }
    let c0 = 0.5;

    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n / TEACHER_COPIES {
        // class-1 frequency k/8 = c0 + a·tanh(w·u + b) fixes the component along w
        let k = rng.gen_range(1..TEACHER_COPIES);
        let tau = (k as f64 / TEACHER_COPIES as f64 - c0) / TEACHER_AMPLITUDE;
        let along = (tau.atanh() - b) / w_sq;
        let mut u: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
        let dot: f64 = u.iter().zip(&w).map(|(a, c)| a * c).sum();
        for (ui, wi) in u.iter_mut().zip(&w) {
            *ui += (along - dot / w_sq) * wi;
        }
        for copy in 0..TEACHER_COPIES {
            inputs.push(u.clone());
            labels.push(usize::from(copy >= k));
        }
    }
    let data = TrainingSet::new(inputs, one_hot_outputs(2), labels)?;
    let spec = NetworkSpec::new(vec![m, 1, 2], Activation::Tanh)?;
    let teacher = spec.flatten(&[
        Layer {
            weight: Matrix::from_row_slice(1, m, &w),
            bias: Vector::from_element(1, b),
        },
        Layer {
            weight: Matrix::from_column_slice(2, 1, &[TEACHER_AMPLITUDE, -TEACHER_AMPLITUDE]),
            bias: Vector::from_column_slice(&[c0, 1.0 - c0]),
        },
    ])?;
    Ok((data, teacher))
}

/// Flow selection in a config: a fixed kind or the regime-dependent choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FlowChoice {
    Auto,
    Kind(FlowKind),
}

impl FlowChoice {
    pub fn resolve(self, k: usize, qn: usize) -> FlowKind {
        match self {
            FlowChoice::Auto => FlowKind::auto(k, qn),
            FlowChoice::Kind(kind) => kind,
        }
    }
}

impl std::str::FromStr for FlowChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(FlowChoice::Auto)
        } else {
            s.parse().map(FlowChoice::Kind)
        }
    }
}

impl TryFrom<String> for FlowChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FlowChoice> for String {
    fn from(c: FlowChoice) -> String {
        match c {
            FlowChoice::Auto => "auto".into(),
            FlowChoice::Kind(k) => k.name().into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Layer-wise uniform draw, scaled by `init_scale`.
    #[default]
    Uniform,
    /// Teacher parameters plus `init_scale`-scaled Gaussian noise.
    Teacher,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub law: Option<DataLaw>,
    /// Sample count `N` for synthetic laws.
    pub n: Option<usize>,
    /// `j,x_0..,omega` CSV, relative to the config file.
    pub inputs: Option<PathBuf>,
    /// `i,y_0..` CSV, relative to the config file.
    pub outputs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub kind: FlowChoice,
    /// Kinds run side by side by `compare`; empty means just `kind`.
    #[serde(default)]
    pub compare: Vec<FlowChoice>,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            kind: FlowChoice::Auto,
            compare: Vec::new(),
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

fn default_method() -> Method {
    Method::Rk4
}

fn default_abs_tol() -> f64 {
    1e-12
}

fn default_rel_tol() -> f64 {
    1e-10
}

fn default_sample_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    #[serde(default = "default_method")]
    pub method: Method,
    /// Defaults to `N/100`.
    pub step: Option<f64>,
    /// Defaults to `1000·N`.
    pub s_max: Option<f64>,
    #[serde(default = "default_abs_tol")]
    pub abs_tol: f64,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        IntegratorSection {
            method: default_method(),
            step: None,
            s_max: None,
            abs_tol: default_abs_tol(),
            rel_tol: default_rel_tol(),
            sample_every: default_sample_every(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopName {
    TimeLimit,
    CostBelow,
    StoppingTime,
    FieldNormBelow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSection {
    pub rule: StopName,
    pub value: f64,
    /// Rank loss before the stopping rule fires is an error (exit code 3).
    #[serde(default)]
    pub require_completion: bool,
}

impl StopSection {
    pub fn rule(&self) -> StopRule {
        match self.rule {
            StopName::TimeLimit => StopRule::TimeLimit(self.value),
            StopName::CostBelow => StopRule::CostBelow(self.value),
            StopName::StoppingTime => StopRule::StoppingTimeFormula(self.value),
            StopName::FieldNormBelow => StopRule::FieldNormBelow(self.value),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// One experiment as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub network: NetworkSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub integrator: IntegratorSection,
    pub stop: StopSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Everything needed to integrate one configured run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: NetworkSpec,
    pub data: TrainingSet,
    pub z0: Vector,
    pub kind: FlowKind,
    pub integrator: IntegratorConfig,
    pub stop: StopRule,
}

impl Problem {
    pub fn k(&self) -> usize {
        self.spec.param_count()
    }

    pub fn qn(&self) -> usize {
        self.spec.output_dim() * self.data.len()
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.base_dir = base;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn validate(&self) -> Result<()> {
        NetworkSpec::new(self.network.widths.clone(), self.network.activation)?;
        if !(self.network.init_scale >= 0.0) || !self.network.init_scale.is_finite() {
            return Err(Error::Config(
                "network.init_scale must be finite and ≥ 0".into(),
            ));
        }
        let d = &self.dataset;
        match (d.law, d.n, &d.inputs, &d.outputs) {
            (Some(_), Some(_), None, None) | (None, None, Some(_), Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "dataset needs either `law` and `n`, or `inputs` and `outputs`".into(),
                ))
            }
        }
        if self.network.init == InitMode::Teacher {
            let w = &self.network.widths;
            if d.law != Some(DataLaw::Teacher) || w.len() != 3 || w[1] != 1 || w[2] != 2 {
                return Err(Error::Config(
                    "init = \"teacher\" needs dataset law \"teacher\" and widths [M, 1, 2]".into(),
                ));
            }
        }
        if !(self.flow.rank_tol > 0.0) {
            return Err(Error::Config("flow.rank_tol must be positive".into()));
        }
        let i = &self.integrator;
        for (v, name) in [(i.step, "step"), (i.s_max, "s_max")] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Config(format!("integrator.{name} must be positive")));
                }
            }
        }
        if !(i.abs_tol > 0.0) || !(i.rel_tol > 0.0) || i.sample_every == 0 {
            return Err(Error::Config(
                "integrator tolerances and sample_every must be positive".into(),
            ));
        }
        self.stop
            .rule()
            .validate()
            .map_err(|e| Error::Config(format!("stop: {e}")))?;
        Ok(())
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve_path(&self.output_dir)
    }

    /// Builds the network, dataset and seeded initial parameters.
    pub fn problem(&self) -> Result<Problem> {
        let spec = NetworkSpec::new(self.network.widths.clone(), self.network.activation)?;
        let (m, q) = (spec.input_dim(), spec.output_dim());
        let d = &self.dataset;
        let (data, teacher) = match (d.law, d.n, &d.inputs, &d.outputs) {
            (Some(DataLaw::Teacher), Some(n), _, _) => {
                if q != 2 {
                    return Err(Error::Config("teacher law needs Q = 2 outputs".into()));
                }
                let (data, teacher) = teacher_dataset(m, n, self.seed)?;
                (data, Some(teacher))
            }
            (Some(law), Some(n), _, _) => (generate_dataset(m, q, n, law, self.seed)?, None),
            (_, _, Some(inputs), Some(outputs)) => (
                TrainingSet::from_csv(&self.resolve_path(inputs), &self.resolve_path(outputs))?,
                None,
            ),
            _ => unreachable!("validated"),
        };
        data.check_against(&spec)?;

        let mut rng = rng_for(self.seed, INIT_STREAM);
        let scale = self.network.init_scale;
        let z0 = match (self.network.init, teacher) {
            (InitMode::Teacher, Some(t)) => t.map(|v| v + scale * normal(&mut rng)),
            (InitMode::Teacher, None) => {
                return Err(Error::Config(
                    "init = \"teacher\" needs the teacher dataset law".into(),
                ))
            }
            (InitMode::Uniform, _) => spec.init_params(&mut rng) * scale,
        };

        let n = data.len();
        let (k, qn) = (spec.param_count(), q * n);
        let kind = self.flow.kind.resolve(k, qn);
        let mut integrator = IntegratorConfig::for_sample_count(n);
        let i = &self.integrator;
        integrator.method = i.method;
        integrator.step = i.step.unwrap_or(integrator.step);
        integrator.s_max = i.s_max.unwrap_or(integrator.s_max);
        integrator.abs_tol = i.abs_tol;
        integrator.rel_tol = i.rel_tol;
        integrator.sample_every = i.sample_every;
        integrator.rank_tol = self.flow.rank_tol;
        Ok(Problem {
            spec,
            data,
            z0,
            kind,
            integrator,
            stop: self.stop.rule(),
        })
    }

    /// One config per listed comparison kind (or just this one).
    pub fn expand(&self) -> Vec<RunConfig> {
        if self.flow.compare.is_empty() {
            return vec![self.clone()];
        }
        self.flow
            .compare
            .iter()
            .map(|&choice| {
                let mut c = self.clone();
                c.flow.kind = choice;
                c.flow.compare.clear();
                c
            })
            .collect()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_output_dir(mut self, dir: PathBuf) -> Self {
        self.output_dir = dir;
        self
    }

    pub fn with_flow(mut self, choice: FlowChoice) -> Self {
        self.flow.kind = choice;
        self.flow.compare.clear();
        self
    }

    /// Replaces the target cost; rules without one switch to the stopping-time rule.
    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !matches!(self.stop.rule, StopName::CostBelow | StopName::StoppingTime) {
            self.stop.rule = StopName::StoppingTime;
        }
        self.stop.value = eps;
        self.validate()?;
        Ok(self)
    }
}

/// Summary of one run, written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub flow: FlowKind,
    pub k: usize,
    pub qn: usize,
    pub n: usize,
    pub termination: Termination,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_s: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rate_fit: Option<RateFit>,
    pub expected_rate: Option<f64>,
    pub verification: VerificationReport,
    pub wall_time_s: f64,
    pub version: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub trajectory: Trajectory,
    pub require_completion: bool,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.require_completion
            && matches!(self.record.termination, Termination::RankLost { .. })
        {
            EXIT_RANK_LOSS
        } else if self.record.verification.all_pass() {
            EXIT_OK
        } else {
            EXIT_INVARIANT_FAILURE
        }
    }
}

/// Integrates a configured problem without touching the filesystem.
pub fn execute(config: &RunConfig) -> Result<RunOutcome> {
    let problem = config.problem()?;
    let start = Instant::now();
    let trajectory = integrate(
        problem.kind,
        &problem.spec,
        &problem.data,
        &problem.z0,
        &problem.integrator,
        &problem.stop,
    )?;
    let verification = verify_trajectory(
        &trajectory,
        &problem.spec,
        &problem.data,
        &Tolerances {
            rank_tol: config.flow.rank_tol,
            ..Tolerances::default()
        },
    );
    let wall_time_s = start.elapsed().as_secs_f64();
    let (x0, _) = forward(&problem.spec, &problem.z0, &problem.data)?;
    let initial_cost = cost(&x0, &problem.data.target(), problem.data.len())?;
    let n = problem.data.len();
    let record = RunRecord {
        config_hash: config.hash(),
        seed: config.seed,
        flow: problem.kind,
        k: problem.k(),
        qn: problem.qn(),
        n,
        termination: trajectory.termination.clone(),
        initial_cost,
        final_cost: trajectory.final_cost(),
        final_s: trajectory.last().s(),
        accepted_steps: trajectory.accepted_steps,
        rejected_steps: trajectory.rejected_steps,
        rate_fit: fit_rate(&trajectory).ok(),
        expected_rate: problem.kind.has_exact_rate().then(|| exact_rate(n)),
        verification,
        wall_time_s,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(RunOutcome {
        record,
        trajectory,
        require_completion: config.stop.require_completion,
    })
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn persist(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    let mut csv = Vec::new();
    outcome.trajectory.write_csv(&mut csv)?;
    write_atomic(&dir.join(TRAJECTORY_FILE), &csv)?;
    write_atomic(
        &dir.join(VERIFICATION_FILE),
        outcome.record.verification.to_json().as_bytes(),
    )?;
    let record = serde_json::to_string_pretty(&outcome.record)?;
    write_atomic(&dir.join(RECORD_FILE), record.as_bytes())
}

/// Runs a config and writes the trajectory CSV, verification JSON and run
/// record into its output directory.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let outcome = execute(config)?;
    persist(&outcome, &config.output_path())?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub flow: FlowKind,
    pub k: usize,
    pub qn: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_s: f64,
    pub lambda_hat: Option<f64>,
    pub expected_rate: f64,
    pub steps: usize,
    pub termination: String,
    pub checks_pass: bool,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub outcomes: Vec<RunOutcome>,
}

const COMPARISON_HEADER: [&str; 11] = [
    "flow",
    "k",
    "qn",
    "initial_cost",
    "final_cost",
    "final_s",
    "lambda_hat",
    "expected_rate",
    "steps",
    "termination",
    "checks_pass",
];

impl Comparison {
    fn cells(row: &ComparisonRow) -> [String; 11] {
        [
            row.flow.to_string(),
            row.k.to_string(),
            row.qn.to_string(),
            format!("{:e}", row.initial_cost),
            format!("{:e}", row.final_cost),
            format!("{:e}", row.final_s),
            row.lambda_hat
                .map_or_else(String::new, |v| format!("{v:e}")),
            format!("{:e}", row.expected_rate),
            row.steps.to_string(),
            row.termination.clone(),
            row.checks_pass.to_string(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COMPARISON_HEADER).expect("in-memory write");
        for row in &self.rows {
            w.write_record(Self::cells(row)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn to_text(&self) -> String {
        let mut table: Vec<Vec<String>> =
            vec![COMPARISON_HEADER.iter().map(|s| s.to_string()).collect()];
        for row in &self.rows {
            let mut cells = Self::cells(row).to_vec();
            for (i, c) in cells.iter_mut().enumerate() {
                if let Ok(v) = c.parse::<f64>() {
                    if (3..=7).contains(&i) {
                        *c = format!("{v:.4e}");
                    }
                }
            }
            table.push(cells);
        }
        let widths: Vec<usize> = (0..COMPARISON_HEADER.len())
            .map(|i| {
                table
                    .iter()
                    .map(|r| r[i].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// The sections that must agree for runs to be comparable.
fn shared_key(
    c: &RunConfig,
) -> (
    u64,
    NetworkSection,
    DatasetSection,
    Option<(PathBuf, PathBuf)>,
) {
    let files = match (&c.dataset.inputs, &c.dataset.outputs) {
        (Some(i), Some(o)) => Some((c.resolve_path(i), c.resolve_path(o))),
        _ => None,
    };
    let mut dataset = c.dataset.clone();
    dataset.inputs = None;
    dataset.outputs = None;
    (c.seed, c.network.clone(), dataset, files)
}

/// Runs configs that share network, dataset and seed concurrently and
/// tabulates them. Each run writes into `<output_dir>/<flow>/`; the table goes
/// to the first config's output directory.
pub fn compare(configs: &[RunConfig]) -> Result<Comparison> {
    let members: Vec<RunConfig> = configs.iter().flat_map(RunConfig::expand).collect();
    let Some(first) = members.first() else {
        return Err(Error::Config("compare needs at least one config".into()));
    };
    let key = shared_key(first);
    for c in &members[1..] {
        if shared_key(c) != key {
            return Err(Error::MismatchedConfigs(
                "compared runs must share seed, [network] and [dataset]".into(),
            ));
        }
    }

    let problems: Vec<Problem> = members
        .iter()
        .map(RunConfig::problem)
        .collect::<Result<_>>()?;
    let mut seen = HashSet::new();
    let dirs: Vec<PathBuf> = members
        .iter()
        .zip(&problems)
        .enumerate()
        .map(|(i, (c, p))| {
            let name = if seen.insert(p.kind) {
                p.kind.name().to_string()
            } else {
                format!("{}-{i}", p.kind.name())
            };
            c.output_path().join(name)
        })
        .collect();

    let results: Vec<Result<RunOutcome>> = std::thread::scope(|scope| {
        let handles: Vec<_> = members
            .iter()
            .map(|c| scope.spawn(move || execute(c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    });
    let outcomes: Vec<RunOutcome> = results.into_iter().collect::<Result<_>>()?;
    for (o, dir) in outcomes.iter().zip(&dirs) {
        persist(o, dir)?;
    }

    let rows = outcomes
        .iter()
        .map(|o| {
            let r = &o.record;
            ComparisonRow {
                flow: r.flow,
                k: r.k,
                qn: r.qn,
                initial_cost: r.initial_cost,
                final_cost: r.final_cost,
                final_s: r.final_s,
                lambda_hat: r.rate_fit.map(|f| f.lambda_hat),
                expected_rate: exact_rate(r.n),
                steps: r.accepted_steps,
                termination: r.termination.label().to_string(),
                checks_pass: r.verification.all_pass(),
            }
        })
        .collect();
    let comparison = Comparison { rows, outcomes };
    let out = first.output_path();
    write_atomic(&out.join("comparison.csv"), comparison.to_csv().as_bytes())?;
    write_atomic(&out.join("comparison.txt"), comparison.to_text().as_bytes())?;
    Ok(comparison)
}
