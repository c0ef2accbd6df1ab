//! Time stepping for the flows in the continuous flow time `s`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{evaluate_kind, evaluate_route, FieldEval, FieldRoute, FlowKind, FlowState};
use crate::linalg::{RankReport, Vector, DEFAULT_RANK_TOL};
use crate::network::{cost, forward, NetworkSpec, TrainingSet};

/// Smallest step the adaptive scheme may take before giving up.
pub const MIN_ADAPTIVE_STEP: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    #[serde(rename = "rk45")]
    AdaptiveRk45,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "rk45" | "adaptive" | "dopri5" => Ok(Method::AdaptiveRk45),
            other => Err(Error::Config(format!(
                "unknown integration method {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Fixed step, or the initial step for the adaptive scheme.
    pub step: f64,
    pub s_max: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Record every k-th accepted step (the first and last states are always kept).
    pub sample_every: usize,
    pub rank_tol: f64,
}

impl IntegratorConfig {
    /// RK4 with step `N/100`, the rate constant of the exact flows being `1/N`.
    pub fn for_sample_count(n: usize) -> Self {
        let n = n as f64;
        IntegratorConfig {
            method: Method::Rk4,
            step: 1e-2 * n,
            s_max: 1e3 * n,
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            sample_every: 1,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.step, "step"),
            (self.s_max, "s_max"),
            (self.abs_tol, "abs_tol"),
            (self.rel_tol, "rel_tol"),
            (self.rank_tol, "rank_tol"),
        ];
        for (v, name) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositive(name));
            }
        }
        if self.sample_every == 0 {
            return Err(Error::NonPositive("sample_every"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum StopRule {
    TimeLimit(f64),
    CostBelow(f64),
    /// Run to `s₀ = (N/2)·ln(C(0)/ε)`.
    StoppingTimeFormula(f64),
    FieldNormBelow(f64),
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        let (v, name) = match *self {
            StopRule::TimeLimit(v) => (v, "time limit"),
            StopRule::CostBelow(v) => (v, "cost threshold"),
            StopRule::StoppingTimeFormula(v) => (v, "target cost"),
            StopRule::FieldNormBelow(v) => (v, "field norm threshold"),
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonPositive(name))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Stopped { rule: StopRule },
    RankLost { s: f64, report: RankReport },
    StepUnderflow { s: f64 },
    Completed,
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Stopped { .. } => "stopped",
            Termination::RankLost { .. } => "rank_lost",
            Termination::StepUnderflow { .. } => "step_underflow",
            Termination::Completed => "completed",
        }
    }
}

/// One recorded point of an orbit with its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: FlowState,
    pub cost: f64,
    pub field_norm: f64,
    /// `‖x(s) - y_ω‖`.
    pub x_residual_norm: f64,
}

impl Sample {
    pub fn s(&self) -> f64 {
        self.state.s
    }

    /// `σ_min/σ_max` of the Jacobian; 1 for the output-space model, whose
    /// parametrization is the identity.
    pub fn sigma_ratio(&self) -> f64 {
        self.state
            .rank_report
            .as_ref()
            .map_or(1.0, RankReport::sigma_ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: FlowKind,
    /// Number of training samples `N`.
    pub n: usize,
    pub samples: Vec<Sample>,
    pub termination: Termination,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

pub const TRAJECTORY_CSV_HEADER: [&str; 5] = [
    "s",
    "cost",
    "field_norm",
    "sigma_min_over_max",
    "x_residual_norm",
];

impl Trajectory {
    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        self.samples
            .last()
            .expect("trajectory has at least one sample")
    }

    pub fn final_cost(&self) -> f64 {
        self.last().cost
    }

    pub fn rows(&self) -> Vec<[f64; 5]> {
        self.samples
            .iter()
            .map(|p| {
                [
                    p.s(),
                    p.cost,
                    p.field_norm,
                    p.sigma_ratio(),
                    p.x_residual_norm,
                ]
            })
            .collect()
    }

    /// Writes `s,cost,field_norm,sigma_min_over_max,x_residual_norm`, one row
    /// per sample, floats in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAJECTORY_CSV_HEADER)?;
        for row in self.rows() {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Rows of a trajectory CSV read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub rows: Vec<[f64; 5]>,
}

impl TrajectoryTable {
    pub fn read<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != TRAJECTORY_CSV_HEADER {
            return Err(Error::Parse {
                path: "<trajectory>".into(),
                message: format!("unexpected header {header:?}"),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut row = [0.0; 5];
            if rec.len() != 5 {
                return Err(Error::Parse {
                    path: "<trajectory>".into(),
                    message: format!("row {}: expected 5 columns", i + 1),
                });
            }
            for (slot, field) in row.iter_mut().zip(rec.iter()) {
                *slot = field.parse().map_err(|e| Error::Parse {
                    path: "<trajectory>".into(),
                    message: format!("row {}: {e}", i + 1),
                })?;
            }
            rows.push(row);
        }
        Ok(TrajectoryTable { rows })
    }
}

/// `s₀ = max(0, (N/2)·ln(C(0)/ε))`, the flow time at which `e^{-2s/N}C(0) = ε`.
pub fn stopping_time(c0: f64, eps: f64, n: usize) -> Result<f64> {
    if !(c0 > 0.0) {
        return Err(Error::NonPositive("initial cost"));
    }
    if !(eps > 0.0) {
        return Err(Error::NonPositive("target cost"));
    }
    if n == 0 {
        return Err(Error::NonPositive("sample count"));
    }
    Ok((0.5 * n as f64 * (c0 / eps).ln()).max(0.0))
}

/// One explicit Euler step.
pub fn step_euler<F>(mut field: F, y: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    Ok(y + field(y)? * h)
}

/// One classical fourth-order Runge-Kutta step.
pub fn step_rk4<F>(mut field: F, y: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    let k1 = field(y)?;
    rk4_from(&mut field, y, &k1, h)
}

fn rk4_from<F>(field: &mut F, y: &Vector, k1: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    let k2 = field(&(y + k1 * (0.5 * h)))?;
    let k3 = field(&(y + &k2 * (0.5 * h)))?;
    let k4 = field(&(y + &k3 * h))?;
    Ok(y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

// Dormand-Prince 5(4) tableau
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// fifth-order weights minus embedded fourth-order weights
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Output of evaluating a flow system at one state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub field: Vector,
    pub x: Vector,
    pub cost: f64,
    pub x_residual_norm: f64,
    pub rank_report: Option<RankReport>,
}

impl From<FieldEval> for Evaluation {
    fn from(e: FieldEval) -> Self {
        Evaluation {
            field: e.field,
            x_residual_norm: 0.0,
            x: e.x,
            cost: e.cost,
            rank_report: e.rank_report,
        }
    }
}

/// An autonomous ODE `ẏ = F(y)` together with its output-space readout.
pub trait FlowSystem {
    fn evaluate(&mut self, y: &Vector) -> Result<Evaluation>;
    /// Whether `y` is a parameter vector (as opposed to the output vector itself).
    fn is_parametric(&self) -> bool;
}

/// Parameter-space flow evaluated along a fixed route.
pub struct ParameterFlow<'a> {
    pub spec: &'a NetworkSpec,
    pub data: &'a TrainingSet,
    pub route: FieldRoute,
    pub rank_tol: f64,
    target: Vector,
}

impl<'a> ParameterFlow<'a> {
    pub fn new(
        spec: &'a NetworkSpec,
        data: &'a TrainingSet,
        route: FieldRoute,
        rank_tol: f64,
    ) -> Self {
        ParameterFlow {
            spec,
            data,
            route,
            rank_tol,
            target: data.target(),
        }
    }
}

impl FlowSystem for ParameterFlow<'_> {
    fn evaluate(&mut self, z: &Vector) -> Result<Evaluation> {
        let e = evaluate_route(self.route, self.spec, self.data, z, self.rank_tol)?;
        let residual = (&e.x - &self.target).norm();
        Ok(Evaluation {
            x_residual_norm: residual,
            ..e.into()
        })
    }

    fn is_parametric(&self) -> bool {
        true
    }
}

/// `ẋ = -(x - y_ω)/N` in output space.
pub struct OutputFlow {
    pub target: Vector,
    pub n: usize,
}

impl FlowSystem for OutputFlow {
    fn evaluate(&mut self, x: &Vector) -> Result<Evaluation> {
        let diff = x - &self.target;
        Ok(Evaluation {
            field: &diff * (-1.0 / self.n as f64),
            x_residual_norm: diff.norm(),
            cost: cost(x, &self.target, self.n)?,
            x: x.clone(),
            rank_report: None,
        })
    }

    fn is_parametric(&self) -> bool {
        false
    }
}

/// Integrates the flow of `kind` from `z0`.
///
/// At `K = QN` both modified kinds use the common square solve. The
/// comparison model starts from `x[z0]` and runs in output space.
pub fn integrate(
    kind: FlowKind,
    spec: &NetworkSpec,
    data: &TrainingSet,
    z0: &Vector,
    cfg: &IntegratorConfig,
    stop: &StopRule,
) -> Result<Trajectory> {
    let (k, qn) = (spec.param_count(), spec.output_dim() * data.len());
    kind.check_admissible(k, qn)?;
    if kind == FlowKind::ComparisonModel {
        let (x0, _) = forward(spec, z0, data)?;
        return integrate_comparison(&x0, &data.target(), data.len(), cfg, stop);
    }
    // surface rank problems with the kind's own error before stepping
    evaluate_kind(kind, spec, data, z0, cfg.rank_tol)?;
    integrate_route(kind, kind.route(k, qn), spec, data, z0, cfg, stop)
}

/// Integrates a parameter-space flow with an explicitly chosen factorization.
pub fn integrate_route(
    kind: FlowKind,
    route: FieldRoute,
    spec: &NetworkSpec,
    data: &TrainingSet,
    z0: &Vector,
    cfg: &IntegratorConfig,
    stop: &StopRule,
) -> Result<Trajectory> {
    let mut system = ParameterFlow::new(spec, data, route, cfg.rank_tol);
    integrate_system(&mut system, kind, data.len(), z0.clone(), cfg, stop)
}

/// Integrates the output-space comparison model from `x0`.
pub fn integrate_comparison(
    x0: &Vector,
    target: &Vector,
    n: usize,
    cfg: &IntegratorConfig,
    stop: &StopRule,
) -> Result<Trajectory> {
    if x0.len() != target.len() {
        return Err(Error::shape("output vector", target.len(), x0.len()));
    }
    let mut system = OutputFlow {
        target: target.clone(),
        n,
    };
    integrate_system(
        &mut system,
        FlowKind::ComparisonModel,
        n,
        x0.clone(),
        cfg,
        stop,
    )
}

struct Recorder {
    parametric: bool,
    samples: Vec<Sample>,
}

impl Recorder {
    fn record(&mut self, s: f64, y: &Vector, e: &Evaluation) {
        if self.samples.last().is_some_and(|p| p.s() == s) {
            return;
        }
        self.samples.push(Sample {
            state: FlowState {
                s,
                z: self.parametric.then(|| y.clone()),
                x: e.x.clone(),
                rank_report: e.rank_report.clone(),
            },
            cost: e.cost,
            field_norm: e.field.norm(),
            x_residual_norm: e.x_residual_norm,
        });
    }
}

enum StepOutcome {
    Accepted {
        y: Vector,
        eval: Evaluation,
        h_used: f64,
    },
    Rejected,
    /// A trial stage left the full-rank region; retried with a smaller step.
    RejectedRank(RankReport),
    RankLost(RankReport),
}

fn rank_lost(err: Error) -> Result<RankReport> {
    match err {
        Error::RankDeficient { report, .. } => Ok(*report),
        other => Err(other),
    }
}

/// Drives any [`FlowSystem`] under the given scheme and stopping rule.
pub fn integrate_system<S: FlowSystem>(
    system: &mut S,
    kind: FlowKind,
    n: usize,
    y0: Vector,
    cfg: &IntegratorConfig,
    stop: &StopRule,
) -> Result<Trajectory> {
    cfg.validate()?;
    stop.validate()?;
    if n == 0 {
        return Err(Error::NonPositive("sample count"));
    }

    let mut y = y0;
    let mut eval = system.evaluate(&y)?;
    let mut rec = Recorder {
        parametric: system.is_parametric(),
        samples: Vec::new(),
    };
    rec.record(0.0, &y, &eval);

    let (s_end, time_rule) = match *stop {
        StopRule::TimeLimit(t) => (t.min(cfg.s_max), t <= cfg.s_max),
        StopRule::StoppingTimeFormula(eps) => {
            let s0 = if eval.cost > 0.0 {
                stopping_time(eval.cost, eps, n)?
            } else {
                0.0
            };
            (s0.min(cfg.s_max), s0 <= cfg.s_max)
        }
        _ => (cfg.s_max, false),
    };

    let mut s = 0.0;
    let mut h = cfg.step;
    let mut err_prev = 1.0_f64;
    let mut accepted = 0usize;
    let mut rejected = 0usize;

    let termination = loop {
        match *stop {
            StopRule::CostBelow(eps) if eval.cost <= eps => {
                break Termination::Stopped { rule: *stop }
            }
            StopRule::FieldNormBelow(delta) if eval.field.norm() <= delta => {
                break Termination::Stopped { rule: *stop }
            }
            _ => {}
        }
        let remaining = s_end - s;
        if remaining <= 1e-12 * s_end.max(1.0) {
            break if time_rule {
                Termination::Stopped { rule: *stop }
            } else {
                Termination::Completed
            };
        }
        let last_step = h >= remaining;
        let h_try = if last_step { remaining } else { h };

        let outcome = match cfg.method {
            Method::Euler | Method::Rk4 => fixed_step(system, cfg.method, &y, &eval, h_try)?,
            Method::AdaptiveRk45 => adaptive_step(
                system,
                cfg,
                &y,
                &eval,
                h_try,
                &mut h,
                &mut err_prev,
                last_step,
            )?,
        };
        match outcome {
            StepOutcome::Accepted {
                y: y_new,
                eval: e_new,
                h_used,
            } => {
                accepted += 1;
                s = if last_step && h_used == h_try {
                    s_end
                } else {
                    s + h_used
                };
                y = y_new;
                eval = e_new;
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("flow state"));
                }
                if accepted % cfg.sample_every == 0 {
                    rec.record(s, &y, &eval);
                }
            }
            StepOutcome::Rejected => {
                rejected += 1;
                if h < MIN_ADAPTIVE_STEP {
                    break Termination::StepUnderflow { s };
                }
            }
            StepOutcome::RejectedRank(report) => {
                rejected += 1;
                if h < MIN_ADAPTIVE_STEP {
                    break Termination::RankLost { s, report };
                }
            }
            StepOutcome::RankLost(report) => break Termination::RankLost { s, report },
        }
    };
    rec.record(s, &y, &eval);

    Ok(Trajectory {
        kind,
        n,
        samples: rec.samples,
        termination,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}

fn fixed_step<S: FlowSystem>(
    system: &mut S,
    method: Method,
    y: &Vector,
    eval: &Evaluation,
    h: f64,
) -> Result<StepOutcome> {
    let mut field = |v: &Vector| system.evaluate(v).map(|e| e.field);
    let stepped = match method {
        Method::Euler => Ok(y + &eval.field * h),
        _ => rk4_from(&mut field, y, &eval.field, h),
    };
    let y_new = match stepped {
        Ok(v) => v,
        Err(e) => return rank_lost(e).map(StepOutcome::RankLost),
    };
    match system.evaluate(&y_new) {
        Ok(e) => Ok(StepOutcome::Accepted {
            y: y_new,
            eval: e,
            h_used: h,
        }),
        Err(e) => rank_lost(e).map(StepOutcome::RankLost),
    }
}

#[allow(clippy::too_many_arguments)]
fn adaptive_step<S: FlowSystem>(
    system: &mut S,
    cfg: &IntegratorConfig,
    y: &Vector,
    eval: &Evaluation,
    h_try: f64,
    h_next: &mut f64,
    err_prev: &mut f64,
    last_step: bool,
) -> Result<StepOutcome> {
    let mut k: Vec<Vector> = Vec::with_capacity(7);
    k.push(eval.field.clone());
    let mut last_eval = None;
    for stage in 1..7 {
        let mut arg = y.clone();
        for (j, kj) in k.iter().enumerate() {
            let a = DP_A[stage][j];
            if a != 0.0 {
                arg.axpy(h_try * a, kj, 1.0);
            }
        }
        debug_assert!(DP_C[stage] > 0.0);
        match system.evaluate(&arg) {
            Ok(e) => {
                k.push(e.field.clone());
                if stage == 6 {
                    // FSAL: the last stage is evaluated at the candidate state
                    last_eval = Some((arg, e));
                }
            }
            Err(e) => {
                *h_next = 0.25 * h_try;
                return rank_lost(e).map(StepOutcome::RejectedRank);
            }
        }
    }
    let (y_new, e_new) = last_eval.expect("seven stages");

    let mut err_vec = Vector::zeros(y.len());
    for (kj, e) in k.iter().zip(DP_E) {
        if e != 0.0 {
            err_vec.axpy(h_try * e, kj, 1.0);
        }
    }
    let err = err_vec
        .iter()
        .zip(y.iter().zip(y_new.iter()))
        .map(|(d, (a, b))| (d / (cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs()))).abs())
        .fold(0.0, f64::max);

    if err <= 1.0 {
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0)).clamp(0.2, 5.0)
        };
        *err_prev = err.max(1e-4);
        // a step shortened to land on the end time does not shrink the nominal step
        if !last_step || h_try * factor > *h_next {
            *h_next = h_try * factor;
        }
        Ok(StepOutcome::Accepted {
            y: y_new,
            eval: e_new,
            h_used: h_try,
        })
    } else {
        *h_next = h_try * (0.9 * err.powf(-0.2)).max(0.2);
        Ok(StepOutcome::Rejected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::comparison_closed_form;
    use crate::network::Activation;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn v(s: &[f64]) -> Vector {
        Vector::from_column_slice(s)
    }

    fn cfg(method: Method, step: f64, s_max: f64) -> IntegratorConfig {
        IntegratorConfig {
            method,
            step,
            s_max,
            ..IntegratorConfig::for_sample_count(1)
        }
    }

    #[test]
    fn stopping_time_examples() {
        assert_eq!(stopping_time(0.3, 0.3, 4).unwrap(), 0.0);
        assert_relative_eq!(
            stopping_time(1.0, (-2.0f64).exp(), 1).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            stopping_time(1.0, 1e-6, 10).unwrap(),
            5.0 * 1e6f64.ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            stopping_time(1.0, 1e-6, 10).unwrap(),
            69.0776,
            epsilon = 1e-4
        );
        assert_eq!(stopping_time(1e-9, 1.0, 3).unwrap(), 0.0);
        assert!(stopping_time(0.0, 1.0, 1).is_err());
        assert!(stopping_time(1.0, 0.0, 1).is_err());
    }

    proptest::proptest! {
        // C0·e^{-2 s0/N} = ε whenever ε < C0
        #[test]
        fn stopping_time_reaches_eps(c0 in 1e-6f64..1e3, ratio in 1e-12f64..1.0, n in 1usize..64) {
            let eps = c0 * ratio;
            let s0 = stopping_time(c0, eps, n).unwrap();
            let reached = c0 * (-2.0 * s0 / n as f64).exp();
            proptest::prop_assert!((reached - eps).abs() <= 1e-12 * eps.max(1e-300) * (1.0 + (c0 / eps).ln()));
        }

        #[test]
        fn comparison_cost_never_rises(x in proptest::collection::vec(-5.0f64..5.0, 1..6), n in 1usize..6) {
            let target = Vector::zeros(x.len());
            let c = cfg(Method::Rk4, 0.05 * n as f64, 1e3);
            let t = integrate_comparison(&v(&x), &target, n, &c, &StopRule::TimeLimit(2.0 * n as f64)).unwrap();
            for w in t.samples.windows(2) {
                proptest::prop_assert!(w[1].cost <= w[0].cost);
            }
        }
    }

    #[test]
    fn rk4_linear_multiplier() {
        for h in [0.1, 0.25, 0.5] {
            let y = step_rk4(|y: &Vector| Ok(-y), &v(&[1.0]), h).unwrap();
            let expected = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
            assert_relative_eq!(y[0], expected, epsilon = 1e-15);
        }
        let y = step_rk4(|y: &Vector| Ok(y * 0.0), &v(&[3.0, -1.0]), 0.7).unwrap();
        assert_eq!(y, v(&[3.0, -1.0]));
    }

    #[test]
    fn rk4_agrees_with_euler_to_second_order() {
        // ẏ = sin(y): the one-step difference scales like h²
        let f = |y: &Vector| Ok(y.map(f64::sin));
        let y0 = v(&[0.8]);
        let diff = |h: f64| (step_rk4(f, &y0, h).unwrap() - step_euler(f, &y0, h).unwrap()).norm();
        let ratio = diff(1e-2) / diff(5e-3);
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn comparison_rk4_matches_closed_form() {
        let c = cfg(Method::Rk4, 1e-3, 1.0);
        let traj =
            integrate_comparison(&v(&[1.0]), &v(&[0.0]), 1, &c, &StopRule::TimeLimit(1.0)).unwrap();
        assert_eq!(traj.last().s(), 1.0);
        assert!((traj.last().state.x[0] - (-1.0f64).exp()).abs() <= 1e-9);
        assert_eq!(
            traj.termination,
            Termination::Stopped {
                rule: StopRule::TimeLimit(1.0)
            }
        );
        assert!(traj.samples.windows(2).all(|w| w[0].s() < w[1].s()));
        assert_eq!(traj.first().s(), 0.0);
    }

    #[test]
    fn rk4_order_against_closed_form() {
        let x0 = v(&[1.0, -2.0]);
        let y = v(&[0.5, 0.5]);
        let n = 2;
        let exact = comparison_closed_form(&x0, &y, n, 4.0).unwrap();
        let err = |h: f64| {
            let t = integrate_comparison(
                &x0,
                &y,
                n,
                &cfg(Method::Rk4, h, 4.0),
                &StopRule::TimeLimit(4.0),
            )
            .unwrap();
            (&t.last().state.x - &exact).norm()
        };
        let hs = [0.4, 0.2, 0.1, 0.05];
        let errs: Vec<f64> = hs.iter().map(|&h| err(h)).collect();
        let order = (errs[0] / errs[3]).log2() / 3.0;
        assert!(order >= 3.7, "measured order {order}, errors {errs:?}");
    }

    #[test]
    fn adaptive_matches_closed_form() {
        let mut c = cfg(Method::AdaptiveRk45, 0.1, 10.0);
        c.abs_tol = 1e-13;
        c.rel_tol = 1e-12;
        let x0 = v(&[2.0, -1.0, 0.5]);
        let y = v(&[0.0, 1.0, 0.0]);
        let t = integrate_comparison(&x0, &y, 3, &c, &StopRule::TimeLimit(10.0)).unwrap();
        let exact = comparison_closed_form(&x0, &y, 3, 10.0).unwrap();
        assert!((&t.last().state.x - &exact).norm() <= 1e-10);
        assert!(t.accepted_steps < 2000);
    }

    #[test]
    fn adaptive_underflow_is_reported() {
        struct Blowup;
        impl FlowSystem for Blowup {
            fn evaluate(&mut self, y: &Vector) -> Result<Evaluation> {
                Ok(Evaluation {
                    field: y.map(|a| a * a * 1e12),
                    x: y.clone(),
                    cost: 1.0,
                    x_residual_norm: 1.0,
                    rank_report: None,
                })
            }
            fn is_parametric(&self) -> bool {
                false
            }
        }
        let c = cfg(Method::AdaptiveRk45, 1.0, 10.0);
        let t = integrate_system(
            &mut Blowup,
            FlowKind::Standard,
            1,
            v(&[1e6]),
            &c,
            &StopRule::TimeLimit(10.0),
        );
        match t {
            Ok(t) => assert!(matches!(t.termination, Termination::StepUnderflow { .. })),
            Err(e) => assert!(matches!(e, Error::NonFinite(_)), "{e}"),
        }
    }

    #[test]
    fn equilibrium_start_is_constant() {
        // x[z] = 2·3 + 1 = 7 = y
        let spec = NetworkSpec::new(vec![1, 1], Activation::Tanh).unwrap();
        let data = TrainingSet::new(vec![vec![3.0]], vec![vec![7.0]], vec![0]).unwrap();
        let z0 = v(&[2.0, 1.0]);
        for kind in [
            FlowKind::Standard,
            FlowKind::OverparamModified,
            FlowKind::ComparisonModel,
        ] {
            let c = cfg(Method::Rk4, 0.1, 1.0);
            let t = integrate(kind, &spec, &data, &z0, &c, &StopRule::TimeLimit(1.0)).unwrap();
            assert!(t.samples.len() > 5);
            for p in &t.samples {
                assert_eq!(p.cost, 0.0);
                assert_eq!(p.state.x[0], 7.0);
                if let Some(z) = &p.state.z {
                    assert_eq!(z, &z0);
                }
            }
        }
    }

    #[test]
    fn field_norm_rule_stops_at_equilibrium() {
        let spec = NetworkSpec::new(vec![1, 1], Activation::Tanh).unwrap();
        let data = TrainingSet::new(vec![vec![3.0]], vec![vec![7.0]], vec![0]).unwrap();
        let t = integrate(
            FlowKind::Standard,
            &spec,
            &data,
            &v(&[2.0, 1.0]),
            &cfg(Method::Rk4, 0.1, 1.0),
            &StopRule::FieldNormBelow(1e-12),
        )
        .unwrap();
        assert_eq!(t.samples.len(), 1);
        assert_eq!(t.accepted_steps, 0);
    }

    fn overparam_problem(seed: u64) -> (NetworkSpec, Vector, TrainingSet) {
        let spec = NetworkSpec::new(vec![2, 8, 8, 2], Activation::Tanh).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = spec.init_params(&mut rng);
        let inputs = (0..4)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let data = TrainingSet::new(
            inputs,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        (spec, z, data)
    }

    #[test]
    fn overparam_stopping_time_reaches_target() {
        let (spec, z0, data) = overparam_problem(3);
        let c = IntegratorConfig::for_sample_count(data.len());
        let eps = 1e-8;
        let t = integrate(
            FlowKind::OverparamModified,
            &spec,
            &data,
            &z0,
            &c,
            &StopRule::StoppingTimeFormula(eps),
        )
        .unwrap();
        assert_eq!(
            t.termination,
            Termination::Stopped {
                rule: StopRule::StoppingTimeFormula(eps)
            }
        );
        assert!(
            t.final_cost() <= eps * (1.0 + 1e-3),
            "final cost {}",
            t.final_cost()
        );
        let c0 = t.first().cost;
        assert_relative_eq!(
            t.last().s(),
            stopping_time(c0, eps, 4).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn overparam_x_follows_comparison_model() {
        let (spec, z0, data) = overparam_problem(5);
        let mut c = IntegratorConfig::for_sample_count(data.len());
        c.sample_every = 100;
        c.step = 1e-3 * data.len() as f64;
        let n = data.len();
        let s_end = 5.0 * n as f64;
        let t = integrate(
            FlowKind::OverparamModified,
            &spec,
            &data,
            &z0,
            &c,
            &StopRule::TimeLimit(s_end),
        )
        .unwrap();
        let x0 = &t.first().state.x;
        let y = data.target();
        for p in &t.samples {
            let exact = comparison_closed_form(x0, &y, n, p.s()).unwrap();
            let rel = (&p.state.x - &exact).norm() / exact.norm();
            assert!(
                rel <= 1e-6,
                "s = {}, rel {rel:e}, sr {}",
                p.s(),
                p.sigma_ratio()
            );
        }
        assert!(t.samples.windows(2).all(|w| w[1].cost <= w[0].cost + 1e-9));
    }

    #[test]
    fn trajectories_are_deterministic() {
        let (spec, z0, data) = overparam_problem(8);
        let c = IntegratorConfig::for_sample_count(data.len());
        let run = || {
            integrate(
                FlowKind::Standard,
                &spec,
                &data,
                &z0,
                &c,
                &StopRule::TimeLimit(2.0),
            )
            .unwrap()
            .to_csv_string()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rank_loss_terminates_and_records() {
        // two identical inputs: rank(D) ≤ 1 < QN = 2 from the start
        let spec = NetworkSpec::new(vec![1, 1], Activation::Tanh).unwrap();
        let data =
            TrainingSet::new(vec![vec![1.0], vec![1.0]], vec![vec![0.0]], vec![0, 0]).unwrap();
        let err = integrate(
            FlowKind::OverparamModified,
            &spec,
            &data,
            &v(&[1.0, 0.0]),
            &cfg(Method::Rk4, 0.1, 1.0),
            &StopRule::TimeLimit(1.0),
        );
        assert!(matches!(
            err,
            Err(Error::InadmissibleFlow { .. }) | Err(Error::RankDeficient { .. })
        ));

        // a system that loses rank after a few steps
        struct Fading(usize);
        impl FlowSystem for Fading {
            fn evaluate(&mut self, y: &Vector) -> Result<Evaluation> {
                self.0 += 1;
                if self.0 > 9 {
                    let report = RankReport::from_singular_values(vec![1.0, 0.0], DEFAULT_RANK_TOL);
                    return Err(Error::RankDeficient {
                        required: 2,
                        report: Box::new(report),
                    });
                }
                Ok(Evaluation {
                    field: -y,
                    x: y.clone(),
                    cost: y.norm_squared() / 2.0,
                    x_residual_norm: y.norm(),
                    rank_report: Some(RankReport::from_singular_values(
                        vec![1.0, 0.5],
                        DEFAULT_RANK_TOL,
                    )),
                })
            }
            fn is_parametric(&self) -> bool {
                true
            }
        }
        let t = integrate_system(
            &mut Fading(0),
            FlowKind::OverparamModified,
            1,
            v(&[1.0]),
            &cfg(Method::Rk4, 0.1, 5.0),
            &StopRule::TimeLimit(5.0),
        )
        .unwrap();
        match &t.termination {
            Termination::RankLost { s, report } => {
                assert_relative_eq!(*s, 0.2, epsilon = 1e-12);
                assert_eq!(report.numerical_rank, 1);
            }
            other => panic!("unexpected termination {other:?}"),
        }
        assert_eq!(t.last().s(), t.samples.last().unwrap().s());
    }

    #[test]
    fn csv_header_and_round_trip() {
        let c = cfg(Method::Rk4, 0.5, 2.0);
        let t = integrate_comparison(
            &v(&[1.0, 2.0]),
            &v(&[0.0, 0.0]),
            2,
            &c,
            &StopRule::TimeLimit(2.0),
        )
        .unwrap();
        let text = t.to_csv_string();
        assert!(text.starts_with("s,cost,field_norm,sigma_min_over_max,x_residual_norm\n"));
        let table = TrajectoryTable::read(text.as_bytes()).unwrap();
        assert_eq!(table.rows, t.rows());
    }
}
