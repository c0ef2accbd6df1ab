//! Dense real linear algebra on top of `nalgebra`.
//!
//! Everything the flows need reduces to one thin singular value
//! decomposition of the Jacobian: numerical rank, the Penrose inverse and the
//! two orthogonal projectors (onto `range(Dᵀ)` in parameter space and onto
//! `range(D)` in output space). The least-squares (QR) and square (LU) solves
//! are kept as separate routes so that the modified flows can be checked
//! against each other where they must coincide.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative rank threshold, measured against `sigma_max`.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Below this `sigma_min / sigma_max` a warning is logged; evaluation continues.
pub const NEAR_RANK_LOSS_RATIO: f64 = 1e-8;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Singular values and the numerical rank derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
    pub tolerance_used: f64,
    /// `sigma_max / sigma_r` with `r` the numerical rank; infinite when `r = 0`.
    pub condition_estimate: f64,
}

impl RankReport {
    /// Builds a report from singular values sorted in nonincreasing order.
    pub fn from_singular_values(singular_values: Vec<f64>, tol_rel: f64) -> Self {
        debug_assert!(singular_values.windows(2).all(|w| w[0] >= w[1]));
        let sigma_max = singular_values.first().copied().unwrap_or(0.0);
        let tolerance_used = if sigma_max > 0.0 {
            tol_rel * sigma_max
        } else {
            0.0
        };
        let numerical_rank = singular_values
            .iter()
            .filter(|&&s| s > tolerance_used)
            .count();
        let condition_estimate = if numerical_rank == 0 {
            f64::INFINITY
        } else {
            sigma_max / singular_values[numerical_rank - 1]
        };
        RankReport {
            singular_values,
            numerical_rank,
            tolerance_used,
            condition_estimate,
        }
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn sigma_min(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }

    /// `sigma_min / sigma_max` over all `min(rows, cols)` singular values, 0 for
    /// the zero matrix.
    pub fn sigma_ratio(&self) -> f64 {
        let max = self.sigma_max();
        if max > 0.0 {
            self.sigma_min() / max
        } else {
            0.0
        }
    }

    pub fn is_full_rank(&self) -> bool {
        self.numerical_rank == self.singular_values.len()
    }
}

/// Thin SVD `A = U diag(S) Vᵀ` with `U: rows × r`, `V: cols × r`, `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vector,
    pub v: Matrix,
}

impl Svd {
    pub fn rank_report(&self, tol_rel: f64) -> RankReport {
        RankReport::from_singular_values(self.singular_values.iter().copied().collect(), tol_rel)
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (mut col, s) in us.column_iter_mut().zip(self.singular_values.iter()) {
            col *= *s;
        }
        us * self.v.transpose()
    }

    /// `V_r diag(1/S_r) U_rᵀ`, keeping the leading `rank` singular triplets.
    fn pseudo_inverse(&self, rank: usize) -> Matrix {
        let v = self.v.columns(0, rank);
        let mut ut = self.u.columns(0, rank).transpose();
        for (mut row, s) in ut.row_iter_mut().zip(self.singular_values.iter()) {
            row /= *s;
        }
        v * ut
    }

    fn pseudo_inverse_apply(&self, rank: usize, rhs: &Vector) -> Vector {
        let mut coeffs = self.u.columns(0, rank).tr_mul(rhs);
        for (c, s) in coeffs.iter_mut().zip(self.singular_values.iter()) {
            *c /= *s;
        }
        self.v.columns(0, rank) * coeffs
    }
}

pub(crate) fn ensure_finite_matrix(a: &Matrix, what: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn ensure_finite_vector(a: &Vector, what: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Thin SVD by one-sided Jacobi rotations.
///
/// Columns of the taller orientation are orthogonalized pairwise until every
/// pair is orthogonal to working precision; the column norms are then the
/// singular values. This keeps small singular triplets accurate relative to
/// their own size, which the flows rely on near the edge of the full-rank
/// region.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidShape(format!(
            "matrix must be nonempty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    ensure_finite_matrix(a, "svd input")?;
    if a.nrows() >= a.ncols() {
        jacobi_svd_tall(a.clone())
    } else {
        let t = jacobi_svd_tall(a.transpose())?;
        Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        })
    }
}

fn jacobi_svd_tall(mut work: Matrix) -> Result<Svd> {
    let (m, n) = work.shape();
    let mut v = Matrix::identity(n, n);
    let tol = f64::EPSILON * (m as f64).sqrt();
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = work.column(p).norm_squared();
                let beta = work.column(q).norm_squared();
                let gamma = work.column(p).dot(&work.column(q));
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut work, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence);
    }

    let norms: Vec<f64> = work.column_iter().map(|c| c.norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms[order[0]];
    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut singular_values = Vector::zeros(n);
    let mut filled = Vec::with_capacity(n);
    for (k, &i) in order.iter().enumerate() {
        v_sorted.set_column(k, &v.column(i));
        singular_values[k] = norms[i];
        if norms[i] > 0.0 && norms[i] > f64::MIN_POSITIVE * sigma_max.max(1.0) {
            u.set_column(k, &(work.column(i) / norms[i]));
            filled.push(k);
        }
    }
    complete_orthonormal_columns(&mut u, &filled);
    Ok(Svd {
        u,
        singular_values,
        v: v_sorted,
    })
}

fn rotate_columns(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..a.nrows() {
        let x = a[(r, p)];
        let y = a[(r, q)];
        a[(r, p)] = c * x - s * y;
        a[(r, q)] = s * x + c * y;
    }
}

/// Fills the columns of `u` not listed in `filled` with unit vectors
/// orthogonal to all others (Gram-Schmidt against the standard basis).
fn complete_orthonormal_columns(u: &mut Matrix, filled: &[usize]) {
    let (m, n) = u.shape();
    if filled.len() == n {
        return;
    }
    let mut basis: Vec<usize> = filled.to_vec();
    let mut candidate = 0;
    for k in 0..n {
        if filled.contains(&k) {
            continue;
        }
        while candidate < m {
            let mut w = Vector::zeros(m);
            w[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &b in &basis {
                    let proj = u.column(b).dot(&w);
                    w.axpy(-proj, &u.column(b).into_owned(), 1.0);
                }
            }
            let norm = w.norm();
            if norm > 1e-8 {
                u.set_column(k, &(w / norm));
                basis.push(k);
                break;
            }
        }
    }
}

pub fn numerical_rank(a: &Matrix, tol_rel: f64) -> Result<RankReport> {
    if !(tol_rel > 0.0) {
        return Err(Error::NonPositive("rank tolerance"));
    }
    Ok(svd(a)?.rank_report(tol_rel))
}

/// SVD of a matrix already known to have full rank `min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct FullRankSvd {
    svd: Svd,
    report: RankReport,
}

impl FullRankSvd {
    pub fn new(d: &Matrix, tol_rel: f64) -> Result<Self> {
        if !(tol_rel > 0.0) {
            return Err(Error::NonPositive("rank tolerance"));
        }
        let svd = svd(d)?;
        let report = svd.rank_report(tol_rel);
        let required = d.nrows().min(d.ncols());
        if report.numerical_rank < required {
            return Err(Error::RankDeficient {
                required,
                report: Box::new(report),
            });
        }
        if report.sigma_ratio() < NEAR_RANK_LOSS_RATIO {
            log::warn!(
                "near rank loss: sigma_min/sigma_max = {:.3e}",
                report.sigma_ratio()
            );
        }
        Ok(FullRankSvd { svd, report })
    }

    pub fn report(&self) -> &RankReport {
        &self.report
    }

    pub fn into_report(self) -> RankReport {
        self.report
    }

    pub fn svd(&self) -> &Svd {
        &self.svd
    }

    fn rank(&self) -> usize {
        self.report.numerical_rank
    }

    pub fn penrose_inverse(&self) -> Matrix {
        self.svd.pseudo_inverse(self.rank())
    }

    /// `Pen[D]·rhs` without materializing the inverse.
    pub fn penrose_apply(&self, rhs: &Vector) -> Vector {
        self.svd.pseudo_inverse_apply(self.rank(), rhs)
    }

    /// Orthogonal projector onto `range(Dᵀ)` (parameter space).
    pub fn projector_row_space(&self) -> Matrix {
        let v = self.svd.v.columns(0, self.rank());
        &v * v.transpose()
    }

    /// Orthogonal projector onto `range(D)` (output space).
    pub fn projector_column_space(&self) -> Matrix {
        let u = self.svd.u.columns(0, self.rank());
        &u * u.transpose()
    }

    /// `U_r U_rᵀ rhs`.
    pub fn project_onto_column_space(&self, rhs: &Vector) -> Vector {
        let u = self.svd.u.columns(0, self.rank());
        &u * u.tr_mul(rhs)
    }

    /// `V_r V_rᵀ rhs`.
    pub fn project_onto_row_space(&self, rhs: &Vector) -> Vector {
        let v = self.svd.v.columns(0, self.rank());
        &v * v.tr_mul(rhs)
    }
}

/// Penrose inverse of a full-rank matrix.
///
/// For `rows <= cols` this is `Dᵀ(DDᵀ)⁻¹` and `D·Pen = I`; for `rows >= cols`
/// it is `(DᵀD)⁻¹Dᵀ` and `Pen·D = I`. Computed from the SVD.
pub fn penrose_inverse(d: &Matrix, tol_rel: f64) -> Result<Matrix> {
    Ok(FullRankSvd::new(d, tol_rel)?.penrose_inverse())
}

fn full_row_rank(d: &Matrix, tol_rel: f64) -> Result<FullRankSvd> {
    let dec = FullRankSvd::new(d, tol_rel)?;
    if d.nrows() > d.ncols() {
        return Err(Error::RankDeficient {
            required: d.nrows(),
            report: Box::new(dec.into_report()),
        });
    }
    Ok(dec)
}

fn full_column_rank(d: &Matrix, tol_rel: f64) -> Result<FullRankSvd> {
    let dec = FullRankSvd::new(d, tol_rel)?;
    if d.ncols() > d.nrows() {
        return Err(Error::RankDeficient {
            required: d.ncols(),
            report: Box::new(dec.into_report()),
        });
    }
    Ok(dec)
}

/// `P = Pen[D]·D`, the orthogonal projector onto `range(Dᵀ)`. Requires full row rank.
pub fn projector_range_dt(d: &Matrix) -> Result<Matrix> {
    projector_range_dt_with_tol(d, DEFAULT_RANK_TOL)
}

pub fn projector_range_dt_with_tol(d: &Matrix, tol_rel: f64) -> Result<Matrix> {
    Ok(full_row_rank(d, tol_rel)?.projector_row_space())
}

/// `D(DᵀD)⁻¹Dᵀ`, the orthogonal projector onto `range(D)`. Requires full column rank.
pub fn projector_range_d(d: &Matrix) -> Result<Matrix> {
    projector_range_d_with_tol(d, DEFAULT_RANK_TOL)
}

pub fn projector_range_d_with_tol(d: &Matrix, tol_rel: f64) -> Result<Matrix> {
    Ok(full_column_rank(d, tol_rel)?.projector_column_space())
}

/// Least-squares solution of `D·v ≈ rhs` by Householder QR, `rows >= cols`.
///
/// Returns `None` if `R` has a zero pivot.
pub fn least_squares_qr(d: &Matrix, rhs: &Vector) -> Option<Vector> {
    debug_assert!(d.nrows() >= d.ncols());
    let qr = d.clone().qr();
    let qtb = qr.q().tr_mul(rhs);
    qr.r().solve_upper_triangular(&qtb)
}

/// Solves the square system `D·v = rhs` by LU with partial pivoting.
pub fn solve_square_lu(d: &Matrix, rhs: &Vector) -> Option<Vector> {
    debug_assert!(d.is_square());
    d.clone().lu().solve(rhs)
}

/// Largest absolute entry.
pub fn max_norm(a: &Matrix) -> f64 {
    a.amax()
}

/// Writes `rows cols` then one line per row, 17 significant digits.
pub fn write_matrix<W: Write>(a: &Matrix, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{} {}", a.nrows(), a.ncols())?;
    let mut line = String::new();
    for row in a.row_iter() {
        line.clear();
        for (k, x) in row.iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{x:.16e}");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_matrix(text: &str) -> Result<Matrix> {
    let bad = |m: String| Error::Parse {
        path: "<matrix>".into(),
        message: m,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("header: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(bad(format!("header must be `rows cols`, got {header:?}")));
    };
    if rows == 0 || cols == 0 {
        return Err(bad("dimensions must be positive".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing row {i}")))?;
        let before = data.len();
        for tok in line.split_whitespace() {
            let x: f64 = tok.parse().map_err(|e| bad(format!("row {i}: {e}")))?;
            data.push(x);
        }
        if data.len() - before != cols {
            return Err(bad(format!(
                "row {i} has {} entries, expected {cols}",
                data.len() - before
            )));
        }
    }
    let m = Matrix::from_row_slice(rows, cols, &data);
    ensure_finite_matrix(&m, "matrix dump")?;
    Ok(m)
}
