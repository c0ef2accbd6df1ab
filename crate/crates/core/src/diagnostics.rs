//! Checks of the flows' analytic properties on computed trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{evaluate_kind, FieldEval, FlowKind, FlowState};
use crate::integrator::{StopRule, Termination, Trajectory, TrajectoryTable};
use crate::linalg::{FullRankSvd, Matrix, Vector, DEFAULT_RANK_TOL};
use crate::network::{evaluate, NetworkSpec, TrainingSet};

/// Costs at or below this are excluded from rate fits.
pub const COST_FLOOR: f64 = 1e-300;
pub const MIN_FIT_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Fitted `λ` in `C(s) ≈ C₀e^{-λs}`.
    pub lambda_hat: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub points_used: usize,
}

/// Least-squares rate of `ln C(s)` over the middle 80% of the samples with
/// positive cost.
pub fn fit_rate(traj: &Trajectory) -> Result<RateFit> {
    let points: Vec<(f64, f64)> = traj.samples.iter().map(|p| (p.s(), p.cost)).collect();
    fit_rate_points(&points)
}

/// As [`fit_rate`] on raw `(s, C)` pairs.
pub fn fit_rate_points(points: &[(f64, f64)]) -> Result<RateFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(s, c)| *c > COST_FLOOR && c.is_finite() && s.is_finite())
        .map(|&(s, c)| (s, c.ln()))
        .collect();
    if usable.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_FIT_SAMPLES,
            have: usable.len(),
        });
    }
    let trim = usable.len() / 10;
    let window = &usable[trim..usable.len() - trim];

    let m = window.len() as f64;
    let s_mean = window.iter().map(|p| p.0).sum::<f64>() / m;
    let l_mean = window.iter().map(|p| p.1).sum::<f64>() / m;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(s, l) in window {
        sxx += (s - s_mean) * (s - s_mean);
        sxy += (s - s_mean) * (l - l_mean);
        syy += (l - l_mean) * (l - l_mean);
    }
    if !(sxx > 0.0) {
        return Err(Error::InvalidShape(
            "rate fit needs distinct sample times".into(),
        ));
    }
    let slope = sxy / sxx;
    let ss_res = window
        .iter()
        .map(|&(s, l)| {
            let r = l - (l_mean + slope * (s - s_mean));
            r * r
        })
        .sum::<f64>();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(RateFit {
        lambda_hat: -slope,
        r_squared,
        window: (window[0].0, window[window.len() - 1].0),
        points_used: window.len(),
    })
}

/// The rate `2/N` of the exact flows.
pub fn exact_rate(n: usize) -> f64 {
    2.0 / n as f64
}

fn pushforward_from(kind: FlowKind, d: &Matrix, e: &FieldEval, tol_rel: f64) -> Result<f64> {
    let dv = d * &e.field;
    Ok(match kind {
        FlowKind::Standard => (&dv + d * (d.transpose() * &e.grad_x)).norm(),
        FlowKind::OverparamModified => (&dv + &e.grad_x).norm(),
        FlowKind::UnderparamModified => {
            let f = FullRankSvd::new(d, tol_rel)?;
            (&dv - f.project_onto_column_space(&dv)).norm()
        }
        FlowKind::ComparisonModel => (&e.field + &e.grad_x).norm(),
    })
}

/// Residual of the output-space dynamics implied by the field of `kind`:
/// `‖D·v + ∇ₓC‖` (overparametrized), `‖(I - 𝒫)D·v‖` (underparametrized),
/// `‖D·v + DDᵀ∇ₓC‖` (standard).
pub fn pushforward_residual(
    kind: FlowKind,
    spec: &NetworkSpec,
    data: &TrainingSet,
    state: &FlowState,
) -> Result<f64> {
    let tol = DEFAULT_RANK_TOL;
    if kind == FlowKind::ComparisonModel {
        let target = data.target();
        let field = crate::flows::field_comparison(&state.x, &target, data.len())?;
        let g = crate::network::cost_gradient_x(&state.x, &target, data.len())?;
        return Ok((field + g).norm());
    }
    let z = state
        .z
        .as_ref()
        .ok_or_else(|| Error::InvalidShape("parameter-space state without parameters".into()))?;
    let e = evaluate_kind(kind, spec, data, z, tol)?;
    let d = e
        .jacobian
        .as_ref()
        .expect("parameter-space evaluation has a Jacobian");
    pushforward_from(kind, d, &e, tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointReport {
    /// `‖𝒫∇ₓC‖`.
    pub projected_grad_norm: f64,
    /// `‖𝒫⊥∇ₓC‖`.
    pub perp_grad_norm: f64,
    pub cost_value: f64,
    /// `|C - (N/2)‖𝒫⊥∇ₓC‖²|`, zero exactly at critical points.
    pub identity_residual: f64,
    /// `|C - (N/2)(‖𝒫∇ₓC‖² + ‖𝒫⊥∇ₓC‖²)|`, zero everywhere.
    pub decomposition_residual: f64,
}

/// Splits `∇ₓC` along `range(D)` and its complement at `z` (`K ≤ QN`).
pub fn analyze_critical_point(
    spec: &NetworkSpec,
    data: &TrainingSet,
    z: &Vector,
) -> Result<CriticalPointReport> {
    let (k, qn) = (spec.param_count(), spec.output_dim() * data.len());
    if k > qn {
        return Err(Error::InvalidShape(format!(
            "critical point analysis needs K ≤ QN, got K = {k}, QN = {qn}"
        )));
    }
    let eval = evaluate(spec, z, data)?;
    let target = data.target();
    let n = data.len();
    let g = crate::network::cost_gradient_x(&eval.x, &target, n)?;
    let c = crate::network::cost(&eval.x, &target, n)?;
    let f = FullRankSvd::new(&eval.jacobian, DEFAULT_RANK_TOL)?;
    Ok(critical_point_from(&f, &g, c, n))
}

fn critical_point_from(f: &FullRankSvd, g: &Vector, c: f64, n: usize) -> CriticalPointReport {
    let pg = f.project_onto_column_space(g);
    let perp = g - &pg;
    let half_n = 0.5 * n as f64;
    let (a, b) = (pg.norm(), perp.norm());
    CriticalPointReport {
        projected_grad_norm: a,
        perp_grad_norm: b,
        cost_value: c,
        identity_residual: (c - half_n * b * b).abs(),
        decomposition_residual: (c - half_n * (a * a + b * b)).abs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Largest allowed cost increase between consecutive samples.
    pub monotone_step: f64,
    /// Relative deviation of the fitted rate from `2/N`.
    pub rate_rel: f64,
    /// Relative deviation of `‖x(s) - y‖` from `e^{-s/N}‖x(0) - y‖`.
    pub x_residual_rel: f64,
    /// Multiplies `(1 + ‖∇ₓC‖)·cond(D)`.
    pub pushforward: f64,
    /// Relative to `1 + ‖v‖`.
    pub horizontality: f64,
    /// Multiplies `1 + C`.
    pub decomposition: f64,
    /// Relative to `σ_max²‖∇ₓC‖`.
    pub standard_identity: f64,
    pub terminal_projected_grad: f64,
    /// Multiplies `1 + C` in the critical-value identity.
    pub critical_value: f64,
    /// Terminal cost bound as a multiple of the target `ε`.
    pub terminal_cost_factor: f64,
    pub rank_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            monotone_step: 1e-9,
            rate_rel: 1e-2,
            x_residual_rel: 1e-4,
            pushforward: 1e-9,
            horizontality: 1e-9,
            decomposition: 1e-10,
            standard_identity: 1e-12,
            terminal_projected_grad: 1e-6,
            critical_value: 1e-8,
            terminal_cost_factor: 1.01,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub tolerance: f64,
    /// The analytic statement being checked.
    pub paper_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub kind: Option<FlowKind>,
    pub termination: String,
    pub samples: usize,
    pub checks: Vec<Check>,
    pub skipped: Vec<Skipped>,
    pub rate_fit: Option<RateFit>,
    /// `‖Z(s_end) - Z(s_mid)‖`; informational, orbits need not converge.
    pub z_drift: Option<f64>,
}

impl VerificationReport {
    fn new(kind: Option<FlowKind>, termination: &str, samples: usize) -> Self {
        VerificationReport {
            kind,
            termination: termination.to_string(),
            samples,
            checks: Vec::new(),
            skipped: Vec::new(),
            rate_fit: None,
            z_drift: None,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, measured: f64, tolerance: f64, claim: &str) {
        self.push_with(name, measured <= tolerance, measured, tolerance, claim);
    }

    fn push_with(&mut self, name: &str, pass: bool, measured: f64, tolerance: f64, claim: &str) {
        self.checks.push(Check {
            name: name.to_string(),
            pass: pass && !measured.is_nan(),
            measured,
            tolerance,
            paper_ref: claim.to_string(),
        });
    }

    fn skip(&mut self, name: &str, reason: impl Into<String>) {
        self.skipped.push(Skipped {
            name: name.to_string(),
            reason: reason.into(),
        });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

const CLAIM_TIMES: &str = "orbit sampled at strictly increasing flow times from s = 0";
const CLAIM_RANK: &str = "rank condition holds along the orbit";
const CLAIM_MONOTONE: &str = "cost is monotone nonincreasing along the flow";
const CLAIM_RATE: &str = "C(s) = exp(-2s/N) C(0), uniformly in the initial data";
const CLAIM_X: &str = "x(s) - y = exp(-s/N)(x(0) - y), the comparison dynamics";
const CLAIM_PUSH_OVER: &str = "D dZ/ds = -grad_x C, so x follows the comparison dynamics";
const CLAIM_PUSH_UNDER: &str = "P-perp dx/ds = 0: the output velocity stays in range(D)";
const CLAIM_PUSH_STD: &str = "dx/ds = -D D^T grad_x C, the pushforward metric of the standard flow";
const CLAIM_HORIZONTAL: &str = "the modified field lies in the horizontal space range(D^T)";
const CLAIM_DECOMP: &str = "C = (N/2)(|P grad_x C|^2 + |P-perp grad_x C|^2)";
const CLAIM_CRIT_GRAD: &str = "P grad_x C vanishes at the limit critical point";
const CLAIM_CRIT_VALUE: &str = "critical value C = (N/2)|P-perp grad_x C|^2";
const CLAIM_TERMINAL: &str = "cost reaches eps by the stopping time (N/2) ln(C(0)/eps)";

fn common_checks(report: &mut VerificationReport, times: &[f64], costs: &[f64], tol: &Tolerances) {
    let bad_times = times.windows(2).filter(|w| !(w[1] > w[0])).count()
        + usize::from(times.first().is_some_and(|&s| s != 0.0));
    report.push_with(
        "sample_times",
        bad_times == 0,
        bad_times as f64,
        0.0,
        CLAIM_TIMES,
    );

    let max_increase = costs
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    if costs.len() < 2 {
        report.skip("cost_monotone", "fewer than two samples");
    } else {
        report.push(
            "cost_monotone",
            max_increase,
            tol.monotone_step,
            CLAIM_MONOTONE,
        );
    }
}

fn rate_check(report: &mut VerificationReport, points: &[(f64, f64)], n: usize, tol: &Tolerances) {
    match fit_rate_points(points) {
        Ok(fit) => {
            let expected = exact_rate(n);
            report.rate_fit = Some(fit);
            report.push(
                "rate",
                (fit.lambda_hat - expected).abs() / expected,
                tol.rate_rel,
                CLAIM_RATE,
            );
        }
        Err(e) => report.skip("rate", e.to_string()),
    }
}

fn x_residual_check(
    report: &mut VerificationReport,
    points: &[(f64, f64)],
    n: usize,
    tol: &Tolerances,
) {
    let Some(&(_, r0)) = points.first() else {
        return report.skip("x_residual", "no samples");
    };
    if !(r0 > 0.0) {
        return report.skip("x_residual", "start is an equilibrium");
    }
    let worst = points
        .iter()
        .map(|&(s, r)| {
            let exact = (-s / n as f64).exp() * r0;
            (r - exact).abs() / exact
        })
        .fold(0.0, f64::max);
    report.push("x_residual", worst, tol.x_residual_rel, CLAIM_X);
}

fn terminal_cost_check(
    report: &mut VerificationReport,
    termination: &Termination,
    final_cost: f64,
    tol: &Tolerances,
) {
    if let Termination::Stopped {
        rule: StopRule::StoppingTimeFormula(eps) | StopRule::CostBelow(eps),
    } = termination
    {
        let bound = tol.terminal_cost_factor * eps;
        report.push("terminal_cost", final_cost, bound, CLAIM_TERMINAL);
    }
}

/// Re-evaluates every sampled state and checks the properties that apply to
/// the trajectory's flow kind. Failures are reported, never raised.
pub fn verify_trajectory(
    traj: &Trajectory,
    spec: &NetworkSpec,
    data: &TrainingSet,
    tol: &Tolerances,
) -> VerificationReport {
    let kind = traj.kind;
    let n = traj.n;
    let mut report =
        VerificationReport::new(Some(kind), traj.termination.label(), traj.samples.len());

    let times: Vec<f64> = traj.samples.iter().map(|p| p.s()).collect();
    let costs: Vec<f64> = traj.samples.iter().map(|p| p.cost).collect();
    common_checks(&mut report, &times, &costs, tol);

    if kind != FlowKind::Standard && kind != FlowKind::ComparisonModel {
        let min_ratio = traj
            .samples
            .iter()
            .map(|p| p.sigma_ratio())
            .fold(f64::INFINITY, f64::min);
        match &traj.termination {
            Termination::RankLost { s, .. } => {
                report.push_with("rank", false, *s, tol.rank_tol, CLAIM_RANK)
            }
            _ => report.push_with(
                "rank",
                min_ratio > tol.rank_tol,
                min_ratio,
                tol.rank_tol,
                CLAIM_RANK,
            ),
        }
    }

    let (k, qn) = (spec.param_count(), spec.output_dim() * data.len());
    let exact_rate_kind = kind.has_exact_rate() || (kind != FlowKind::Standard && k == qn);
    if exact_rate_kind {
        let points: Vec<(f64, f64)> = traj.samples.iter().map(|p| (p.s(), p.cost)).collect();
        rate_check(&mut report, &points, n, tol);
        let residuals: Vec<(f64, f64)> = traj
            .samples
            .iter()
            .map(|p| (p.s(), p.x_residual_norm))
            .collect();
        x_residual_check(&mut report, &residuals, n, tol);
        terminal_cost_check(&mut report, &traj.termination, traj.final_cost(), tol);
    }

    if kind != FlowKind::ComparisonModel {
        state_checks(&mut report, traj, spec, data, tol);
        let zs: Vec<&Vector> = traj
            .samples
            .iter()
            .filter_map(|p| p.state.z.as_ref())
            .collect();
        if zs.len() >= 2 {
            report.z_drift = Some((zs[zs.len() - 1] - zs[(zs.len() - 1) / 2]).norm());
        }
    }
    report
}

fn state_checks(
    report: &mut VerificationReport,
    traj: &Trajectory,
    spec: &NetworkSpec,
    data: &TrainingSet,
    tol: &Tolerances,
) {
    let kind = traj.kind;
    let (k, qn) = (spec.param_count(), spec.output_dim() * data.len());
    let n = traj.n;
    let mut push_worst = 0.0_f64;
    let mut horiz_worst = 0.0_f64;
    let mut decomp_worst = 0.0_f64;
    let mut evaluated = 0usize;
    let mut last_critical = None;
    let mut failure = None;

    for p in &traj.samples {
        let Some(z) = p.state.z.as_ref() else {
            continue;
        };
        let e = match evaluate_kind(kind, spec, data, z, tol.rank_tol) {
            Ok(e) => e,
            Err(err) => {
                failure = Some(err.to_string());
                break;
            }
        };
        let d = e
            .jacobian
            .as_ref()
            .expect("parameter-space evaluation has a Jacobian");
        let g_norm = e.grad_x.norm();
        let residual = match pushforward_from(kind, d, &e, tol.rank_tol) {
            Ok(r) => r,
            Err(err) => {
                failure = Some(err.to_string());
                break;
            }
        };
        let rep = e
            .rank_report
            .as_ref()
            .expect("parameter-space evaluation has a rank report");
        let scaled = match kind {
            FlowKind::Standard => {
                let scale = rep.sigma_max().powi(2) * g_norm;
                if scale > 0.0 {
                    residual / scale
                } else {
                    residual
                }
            }
            _ => residual / ((1.0 + g_norm) * rep.condition_estimate),
        };
        push_worst = push_worst.max(scaled);

        if kind != FlowKind::Standard {
            if let Ok(f) = FullRankSvd::new(d, tol.rank_tol) {
                if k >= qn {
                    let horizontal = f.project_onto_row_space(&e.field);
                    horiz_worst =
                        horiz_worst.max((&e.field - horizontal).norm() / (1.0 + e.field.norm()));
                }
                if k <= qn {
                    let cp = critical_point_from(&f, &e.grad_x, e.cost, n);
                    decomp_worst = decomp_worst.max(cp.decomposition_residual / (1.0 + e.cost));
                    last_critical = Some(cp);
                }
            }
        }
        evaluated += 1;
    }

    if let Some(reason) = failure {
        report.skip(
            "state_reevaluation",
            format!("stopped after {evaluated} samples: {reason}"),
        );
    }
    if evaluated == 0 {
        report.skip(
            "pushforward",
            "no sampled parameter states could be evaluated",
        );
        return;
    }
    match kind {
        FlowKind::Standard => report.push(
            "pushforward",
            push_worst,
            tol.standard_identity,
            CLAIM_PUSH_STD,
        ),
        FlowKind::UnderparamModified if k < qn => {
            report.push("pushforward", push_worst, tol.pushforward, CLAIM_PUSH_UNDER)
        }
        _ => report.push("pushforward", push_worst, tol.pushforward, CLAIM_PUSH_OVER),
    }
    if kind == FlowKind::Standard {
        return;
    }
    if k >= qn {
        report.push(
            "horizontality",
            horiz_worst,
            tol.horizontality,
            CLAIM_HORIZONTAL,
        );
    }
    if k <= qn {
        report.push(
            "decomposition",
            decomp_worst,
            tol.decomposition,
            CLAIM_DECOMP,
        );
        let converged = matches!(
            traj.termination,
            Termination::Stopped {
                rule: StopRule::FieldNormBelow(_)
            }
        );
        match (last_critical, converged) {
            (Some(cp), true) => {
                report.push(
                    "terminal_projected_gradient",
                    cp.projected_grad_norm,
                    tol.terminal_projected_grad,
                    CLAIM_CRIT_GRAD,
                );
                report.push(
                    "critical_value_identity",
                    cp.identity_residual / (1.0 + cp.cost_value),
                    tol.critical_value,
                    CLAIM_CRIT_VALUE,
                );
            }
            _ => report.skip(
                "terminal_projected_gradient",
                "run did not stop on the field-norm rule",
            ),
        }
    }
}

/// Checks a trajectory read back from CSV, where only the scalar columns are
/// available. `N` is recovered from `C = ‖x - y‖²/(2N)` on the first row.
pub fn verify_table(
    table: &TrajectoryTable,
    kind: Option<FlowKind>,
    tol: &Tolerances,
) -> VerificationReport {
    let rows = &table.rows;
    let mut report = VerificationReport::new(kind, "unknown", rows.len());
    let times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let costs: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    common_checks(&mut report, &times, &costs, tol);

    let finite = rows.iter().all(|r| r.iter().all(|v| v.is_finite()));
    report.push_with(
        "finite_values",
        finite,
        f64::from(u8::from(!finite)),
        0.0,
        "all recorded values are finite",
    );

    if matches!(
        kind,
        Some(FlowKind::OverparamModified | FlowKind::UnderparamModified)
    ) {
        let min_ratio = rows.iter().map(|r| r[3]).fold(f64::INFINITY, f64::min);
        report.push_with(
            "rank",
            min_ratio > tol.rank_tol,
            min_ratio,
            tol.rank_tol,
            CLAIM_RANK,
        );
    }

    if kind.is_some_and(FlowKind::has_exact_rate) {
        let Some(first) = rows.first() else {
            return report;
        };
        if !(first[1] > 0.0) {
            report.skip("rate", "start is an equilibrium");
            return report;
        }
        let n_est = first[4] * first[4] / (2.0 * first[1]);
        let n = n_est.round();
        if n < 1.0 || (n_est - n).abs() > 1e-6 * n {
            report.push_with(
                "sample_count_consistency",
                false,
                n_est,
                0.0,
                "C = |x - y|^2/(2N) with integer N",
            );
            return report;
        }
        let n = n as usize;
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
        rate_check(&mut report, &points, n, tol);
        let residuals: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[4])).collect();
        x_residual_check(&mut report, &residuals, n, tol);
    }
    report
}
