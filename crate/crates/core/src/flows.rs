//! Vector fields of the standard flow, the two modified flows and the
//! output-space comparison model, plus the pullback/pushforward metrics.
//!
//! The modified fields are evaluated through independent factorizations so
//! they can be cross-checked where they must agree:
//!
//! * overparametrized (`K > QN`): `-Pen[D]·∇ₓC` from the SVD of `D`;
//! * underparametrized (`K < QN`): least-squares solve of `D·v ≈ -∇ₓC` by QR;
//! * square (`K = QN`): `-D⁻¹∇ₓC` by LU.
//!
//! The rank condition is always tested on the singular values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    least_squares_qr, solve_square_lu, svd, FullRankSvd, Matrix, RankReport, Vector,
    DEFAULT_RANK_TOL,
};
use crate::network::{cost, cost_gradient_x, evaluate, NetworkSpec, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Standard,
    #[serde(rename = "overparam")]
    OverparamModified,
    #[serde(rename = "underparam")]
    UnderparamModified,
    #[serde(rename = "comparison")]
    ComparisonModel,
}

impl FlowKind {
    pub const ALL: [FlowKind; 4] = [
        FlowKind::Standard,
        FlowKind::OverparamModified,
        FlowKind::UnderparamModified,
        FlowKind::ComparisonModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlowKind::Standard => "standard",
            FlowKind::OverparamModified => "overparam",
            FlowKind::UnderparamModified => "underparam",
            FlowKind::ComparisonModel => "comparison",
        }
    }

    /// Modified kind matching the regime; the overparametrized kind at `K = QN`,
    /// where both coincide.
    pub fn auto(k: usize, qn: usize) -> FlowKind {
        if k >= qn {
            FlowKind::OverparamModified
        } else {
            FlowKind::UnderparamModified
        }
    }

    pub fn check_admissible(self, k: usize, qn: usize) -> Result<()> {
        let ok = match self {
            FlowKind::OverparamModified => k >= qn,
            FlowKind::UnderparamModified => k <= qn,
            FlowKind::Standard | FlowKind::ComparisonModel => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InadmissibleFlow {
                flow: self.name().into(),
                k,
                qn,
            })
        }
    }

    /// Cost decays exactly as `e^{-2s/N}` for these kinds.
    pub fn has_exact_rate(self) -> bool {
        matches!(
            self,
            FlowKind::OverparamModified | FlowKind::ComparisonModel
        )
    }

    /// Factorization used to evaluate this kind at the given shape.
    pub fn route(self, k: usize, qn: usize) -> FieldRoute {
        match self {
            FlowKind::Standard => FieldRoute::Gradient,
            FlowKind::OverparamModified | FlowKind::UnderparamModified if k == qn => {
                FieldRoute::SquareLu
            }
            FlowKind::OverparamModified => FieldRoute::PenroseSvd,
            FlowKind::UnderparamModified => FieldRoute::LeastSquaresQr,
            FlowKind::ComparisonModel => FieldRoute::OutputSpace,
        }
    }
}

impl std::fmt::Display for FlowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FlowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(FlowKind::Standard),
            "overparam" | "overparam-modified" => Ok(FlowKind::OverparamModified),
            "underparam" | "underparam-modified" => Ok(FlowKind::UnderparamModified),
            "comparison" | "comparison-model" => Ok(FlowKind::ComparisonModel),
            other => Err(Error::Config(format!("unknown flow kind {other:?}"))),
        }
    }
}

/// How a parameter-space field is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldRoute {
    /// `-Dᵀ∇ₓC`.
    Gradient,
    /// `-Pen[D]∇ₓC`, requires full row rank.
    PenroseSvd,
    /// Least-squares `-(DᵀD)⁻¹Dᵀ∇ₓC`, requires full column rank.
    LeastSquaresQr,
    /// `-D⁻¹∇ₓC`, square and invertible.
    SquareLu,
    /// `-∇ₓC` directly in output space.
    OutputSpace,
}

/// Current point of a flow orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub s: f64,
    /// Absent for the comparison model.
    pub z: Option<Vector>,
    pub x: Vector,
    pub rank_report: Option<RankReport>,
}

fn rank_failure(required: usize, report: RankReport) -> Error {
    Error::RankDeficient {
        required,
        report: Box::new(report),
    }
}

/// `-Dᵀ g`.
pub fn standard_direction(d: &Matrix, grad_x: &Vector) -> Vector {
    -d.tr_mul(grad_x)
}

/// `-Pen[D] g` for full-row-rank `D`.
pub fn overparam_direction(
    d: &Matrix,
    grad_x: &Vector,
    tol_rel: f64,
) -> Result<(Vector, RankReport)> {
    let dec = FullRankSvd::new(d, tol_rel)?;
    if d.nrows() > d.ncols() {
        return Err(rank_failure(d.nrows(), dec.into_report()));
    }
    let v = -dec.penrose_apply(grad_x);
    Ok((v, dec.into_report()))
}

/// `-(DᵀD)⁻¹Dᵀ g` for full-column-rank `D`, solved by QR.
pub fn underparam_direction(
    d: &Matrix,
    grad_x: &Vector,
    tol_rel: f64,
) -> Result<(Vector, RankReport)> {
    let report = checked_rank(d, d.ncols(), tol_rel)?;
    let v = least_squares_qr(d, grad_x).ok_or_else(|| rank_failure(d.ncols(), report.clone()))?;
    Ok((-v, report))
}

/// `-D⁻¹ g` for square invertible `D`, solved by LU.
pub fn square_direction(d: &Matrix, grad_x: &Vector, tol_rel: f64) -> Result<(Vector, RankReport)> {
    if !d.is_square() {
        return Err(Error::shape(
            "square Jacobian columns",
            d.nrows(),
            d.ncols(),
        ));
    }
    let report = checked_rank(d, d.nrows(), tol_rel)?;
    let v = solve_square_lu(d, grad_x).ok_or_else(|| rank_failure(d.nrows(), report.clone()))?;
    Ok((-v, report))
}

fn checked_rank(d: &Matrix, required: usize, tol_rel: f64) -> Result<RankReport> {
    if !(tol_rel > 0.0) {
        return Err(Error::NonPositive("rank tolerance"));
    }
    let report = svd(d)?.rank_report(tol_rel);
    if report.numerical_rank < required {
        return Err(rank_failure(required, report));
    }
    if report.sigma_ratio() < crate::linalg::NEAR_RANK_LOSS_RATIO {
        log::warn!(
            "near rank loss: sigma_min/sigma_max = {:.3e}",
            report.sigma_ratio()
        );
    }
    Ok(report)
}

/// Everything a single field evaluation produces.
#[derive(Debug, Clone)]
pub struct FieldEval {
    pub field: Vector,
    pub x: Vector,
    pub grad_x: Vector,
    pub cost: f64,
    /// `None` for the output-space field.
    pub jacobian: Option<Matrix>,
    pub rank_report: Option<RankReport>,
}

/// Evaluates a parameter-space field at `z` along the given route.
///
/// The gradient route never fails on rank; its report is informational.
pub fn evaluate_route(
    route: FieldRoute,
    spec: &NetworkSpec,
    data: &TrainingSet,
    z: &Vector,
    tol_rel: f64,
) -> Result<FieldEval> {
    let eval = evaluate(spec, z, data)?;
    let target = data.target();
    let n = data.len();
    let grad_x = cost_gradient_x(&eval.x, &target, n)?;
    let c = cost(&eval.x, &target, n)?;
    let d = &eval.jacobian;
    let (field, report) = match route {
        FieldRoute::Gradient => {
            let report = svd(d)?.rank_report(tol_rel);
            (standard_direction(d, &grad_x), report)
        }
        FieldRoute::PenroseSvd => overparam_direction(d, &grad_x, tol_rel)?,
        FieldRoute::LeastSquaresQr => underparam_direction(d, &grad_x, tol_rel)?,
        FieldRoute::SquareLu => square_direction(d, &grad_x, tol_rel)?,
        FieldRoute::OutputSpace => {
            return Err(Error::Config(
                "the output-space field has no parameter-space evaluation".into(),
            ))
        }
    };
    Ok(FieldEval {
        field,
        x: eval.x,
        grad_x,
        cost: c,
        jacobian: Some(eval.jacobian),
        rank_report: Some(report),
    })
}

/// Evaluates the field of `kind` at `z`, dispatching square shapes to LU.
pub fn evaluate_kind(
    kind: FlowKind,
    spec: &NetworkSpec,
    data: &TrainingSet,
    z: &Vector,
    tol_rel: f64,
) -> Result<FieldEval> {
    let (k, qn) = (spec.param_count(), spec.output_dim() * data.len());
    kind.check_admissible(k, qn)?;
    if kind == FlowKind::ComparisonModel {
        let (x, _) = crate::network::forward(spec, z, data)?;
        let target = data.target();
        let grad_x = cost_gradient_x(&x, &target, data.len())?;
        return Ok(FieldEval {
            field: -&grad_x,
            cost: cost(&x, &target, data.len())?,
            x,
            grad_x,
            jacobian: None,
            rank_report: None,
        });
    }
    evaluate_route(kind.route(k, qn), spec, data, z, tol_rel)
}

/// `-∇_Z C = -Dᵀ∇ₓC`.
pub fn field_standard(spec: &NetworkSpec, z: &Vector, data: &TrainingSet) -> Result<Vector> {
    Ok(-crate::network::cost_gradient_z(spec, z, data)?)
}

/// `-Pen[D]∇ₓC`, the negative pullback-metric gradient. Requires rank `QN`.
pub fn field_overparam(
    spec: &NetworkSpec,
    z: &Vector,
    data: &TrainingSet,
    tol_rel: f64,
) -> Result<Vector> {
    Ok(evaluate_route(FieldRoute::PenroseSvd, spec, data, z, tol_rel)?.field)
}

/// `-(DᵀD)⁻¹Dᵀ∇ₓC`, the negative gradient for the metric `DᵀD`. Requires rank `K`.
pub fn field_underparam(
    spec: &NetworkSpec,
    z: &Vector,
    data: &TrainingSet,
    tol_rel: f64,
) -> Result<Vector> {
    Ok(evaluate_route(FieldRoute::LeastSquaresQr, spec, data, z, tol_rel)?.field)
}

/// `-∇ₓC = -(x - y_ω)/N`.
pub fn field_comparison(x: &Vector, target: &Vector, n: usize) -> Result<Vector> {
    Ok(-cost_gradient_x(x, target, n)?)
}

/// `y_ω + e^{-s/N}(x₀ - y_ω)`.
pub fn comparison_closed_form(x0: &Vector, target: &Vector, n: usize, s: f64) -> Result<Vector> {
    if x0.len() != target.len() {
        return Err(Error::shape("output vector", target.len(), x0.len()));
    }
    if n == 0 {
        return Err(Error::NonPositive("sample count"));
    }
    if !(s >= 0.0) {
        return Err(Error::NonPositive("flow time"));
    }
    Ok(target + (x0 - target) * (-s / n as f64).exp())
}

/// `h(v, w) = ⟨Dv, Dw⟩`.
pub fn metric_h(
    spec: &NetworkSpec,
    z: &Vector,
    data: &TrainingSet,
    v: &Vector,
    w: &Vector,
) -> Result<f64> {
    let d = crate::network::jacobian(spec, z, data)?;
    metric_h_with(&d, v, w)
}

pub fn metric_h_with(d: &Matrix, v: &Vector, w: &Vector) -> Result<f64> {
    if v.len() != d.ncols() {
        return Err(Error::shape("tangent vector", d.ncols(), v.len()));
    }
    if w.len() != d.ncols() {
        return Err(Error::shape("tangent vector", d.ncols(), w.len()));
    }
    Ok((d * v).dot(&(d * w)))
}

/// `g = DᵀD`.
pub fn metric_g(spec: &NetworkSpec, z: &Vector, data: &TrainingSet) -> Result<Matrix> {
    let d = crate::network::jacobian(spec, z, data)?;
    Ok(d.tr_mul(&d))
}

/// `DDᵀ`, the output-space mobility of the standard flow.
pub fn pushforward_metric_standard(
    spec: &NetworkSpec,
    z: &Vector,
    data: &TrainingSet,
) -> Result<Matrix> {
    let d = crate::network::jacobian(spec, z, data)?;
    Ok(&d * d.transpose())
}

/// Default rank tolerance re-exported for callers that only touch flows.
pub const RANK_TOL: f64 = DEFAULT_RANK_TOL;
