//! Local quadratic models over a trust region.
//!
//! The derivative-free path interpolates adaptive sample means over a
//! design set; the default design is the coordinate scheme
//! `{center} ∪ {center ± delta·e_i}`, which pins the diagonal quadratic
//! exactly and has poisedness constant 1, so no geometry maintenance is
//! needed. A full quadratic basis over a larger design is available for
//! callers that want cross terms. The gradient-oracle path keeps a
//! quasi-Newton Hessian via a safeguarded BFGS update.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("design set is not poised (singular interpolation system)")]
    NonPoised,
    #[error("expected {expected} values (one per design point), got {got}")]
    WrongValueCount { expected: usize, got: usize },
}

/// Hessian norm bound applied when no explicit bound is configured.
pub const DEFAULT_KAPPA_H: f64 = 1e3;

/// How a design set was generated, which decides the interpolation basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DesignScheme {
    /// `{center} ∪ {center ± delta·e_i}`; diagonal quadratic basis.
    Coordinate,
    /// Arbitrary poised set with the full quadratic monomial basis.
    General,
}

/// An interpolation design: the trust-region center plus `p` more points
/// inside the closed ball of radius `delta`.
#[derive(Clone, Debug)]
pub struct DesignSet {
    pub center: DVector<f64>,
    pub points: Vec<DVector<f64>>,
    pub delta: f64,
    pub scheme: DesignScheme,
}

impl DesignSet {
    /// Number of interpolation conditions (center included).
    pub fn len(&self) -> usize {
        self.points.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Center first, then the remaining design points in order.
    pub fn all_points(&self) -> impl Iterator<Item = &DVector<f64>> {
        std::iter::once(&self.center).chain(self.points.iter())
    }

    /// Whether the points exactly match the coordinate pattern, so the
    /// closed-form interpolation and the analytic poisedness value apply.
    fn matches_coordinate_pattern(&self) -> bool {
        let d = self.center.len();
        if self.points.len() != 2 * d {
            return false;
        }
        for i in 0..d {
            for (slot, sign) in [(2 * i, 1.0), (2 * i + 1, -1.0)] {
                let expect_coord = self.delta * sign;
                let p = &self.points[slot];
                for c in 0..d {
                    let offset = p[c] - self.center[c];
                    let want = if c == i { expect_coord } else { 0.0 };
                    if offset != want {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// The coordinate design `{center} ∪ {center ± delta·e_i}` (2d+1 points).
pub fn coordinate_design(center: &DVector<f64>, delta: f64) -> DesignSet {
    assert!(delta > 0.0, "trust-region radius must be positive");
    let d = center.len();
    let mut points = Vec::with_capacity(2 * d);
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let mut p = center.clone();
            p[i] += sign * delta;
            points.push(p);
        }
    }
    DesignSet { center: center.clone(), points, delta, scheme: DesignScheme::Coordinate }
}

/// A design for full quadratic interpolation: the coordinate points plus
/// one diagonal point per coordinate pair, (d+1)(d+2)/2 points in total.
pub fn full_quadratic_design(center: &DVector<f64>, delta: f64) -> DesignSet {
    let mut design = coordinate_design(center, delta);
    let d = center.len();
    let scale = delta / 2f64.sqrt();
    for i in 0..d {
        for j in (i + 1)..d {
            let mut p = center.clone();
            p[i] += scale;
            p[j] += scale;
            design.points.push(p);
        }
    }
    design.scheme = DesignScheme::General;
    design
}

/// Quadratic model `M(center + s) = c + gᵀs + ½ sᵀHs`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalModel {
    pub c: f64,
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
}

impl LocalModel {
    /// Model value at displacement `s` from the center.
    pub fn value(&self, s: &DVector<f64>) -> f64 {
        self.c + self.g.dot(s) + 0.5 * (self.h.clone() * s).dot(s)
    }

    /// `M(0) − M(s)`, the model decrease achieved by step `s`.
    pub fn decrease(&self, s: &DVector<f64>) -> f64 {
        -(self.g.dot(s) + 0.5 * (self.h.clone() * s).dot(s))
    }

    pub fn grad_norm(&self) -> f64 {
        self.g.norm()
    }
}

/// Interpolates sample means over the design set.
///
/// The coordinate scheme yields the diagonal quadratic in closed form:
/// central differences for the gradient and second differences for the
/// Hessian diagonal, which reproduces all 2d+1 values exactly. General
/// designs solve the full quadratic monomial system. Hessian entries are
/// bounded by `kappa_h` (diagonal clipping for the coordinate scheme,
/// norm rescaling for general ones).
pub fn interpolate(
    design: &DesignSet,
    values: &[f64],
    kappa_h: f64,
) -> Result<LocalModel, ModelError> {
    if values.len() != design.len() {
        return Err(ModelError::WrongValueCount { expected: design.len(), got: values.len() });
    }
    match design.scheme {
        DesignScheme::Coordinate if design.matches_coordinate_pattern() => {
            let d = design.center.len();
            let delta = design.delta;
            let c = values[0];
            let mut g = DVector::zeros(d);
            let mut h = DMatrix::zeros(d, d);
            for i in 0..d {
                let plus = values[1 + 2 * i];
                let minus = values[2 + 2 * i];
                g[i] = (plus - minus) / (2.0 * delta);
                h[(i, i)] = ((plus + minus - 2.0 * c) / (delta * delta)).clamp(-kappa_h, kappa_h);
            }
            Ok(LocalModel { c, g, h })
        }
        _ => interpolate_general(design, values, kappa_h),
    }
}

/// Full quadratic interpolation by solving the monomial-basis system in
/// coordinates centered at the design center.
fn interpolate_general(
    design: &DesignSet,
    values: &[f64],
    kappa_h: f64,
) -> Result<LocalModel, ModelError> {
    let d = design.center.len();
    let q = full_basis_len(d);
    if design.len() != q {
        return Err(ModelError::WrongValueCount { expected: q, got: design.len() });
    }
    let mut m = DMatrix::zeros(q, q);
    for (r, p) in design.all_points().enumerate() {
        let s = p - &design.center;
        for (cidx, phi) in basis_row(&s).into_iter().enumerate() {
            m[(r, cidx)] = phi;
        }
    }
    let rhs = DVector::from_column_slice(values);
    let lu = m.lu();
    let alpha = lu.solve(&rhs).ok_or(ModelError::NonPoised)?;
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(ModelError::NonPoised);
    }
    let c = alpha[0];
    let g = DVector::from_fn(d, |i, _| alpha[1 + i]);
    let mut h = DMatrix::zeros(d, d);
    let mut idx = 1 + d;
    for i in 0..d {
        for j in i..d {
            if i == j {
                h[(i, i)] = 2.0 * alpha[idx];
            } else {
                h[(i, j)] = alpha[idx];
                h[(j, i)] = alpha[idx];
            }
            idx += 1;
        }
    }
    let norm = spectral_norm(&h);
    if norm > kappa_h {
        h *= kappa_h / norm;
    }
    Ok(LocalModel { c, g, h })
}

fn full_basis_len(d: usize) -> usize {
    (d + 1) * (d + 2) / 2
}

/// Monomials `[1, s_1..s_d, {s_i s_j}_{i<=j}]` at displacement `s`.
fn basis_row(s: &DVector<f64>) -> Vec<f64> {
    let d = s.len();
    let mut row = Vec::with_capacity(full_basis_len(d));
    row.push(1.0);
    for i in 0..d {
        row.push(s[i]);
    }
    for i in 0..d {
        for j in i..d {
            row.push(s[i] * s[j]);
        }
    }
    row
}

/// Poisedness measure of a design set.
#[derive(Clone, Copy, Debug)]
pub struct PoisednessReport {
    /// Maximum absolute Lagrange polynomial value over the ball.
    pub lambda: f64,
    /// Condition estimate of the interpolation matrix.
    pub conditioning: f64,
}

/// Poisedness of the design over its trust-region ball.
///
/// The exact coordinate pattern returns its analytic constant 1; other
/// sets bound the Lagrange polynomials by their maximum over a 1000-point
/// low-discrepancy (Halton) sample of the ball plus the design points.
pub fn poisedness(design: &DesignSet) -> Result<PoisednessReport, ModelError> {
    let d = design.center.len();
    let use_diag_basis = design.scheme == DesignScheme::Coordinate;
    let basis = |s: &DVector<f64>| -> Vec<f64> {
        if use_diag_basis {
            let mut row = Vec::with_capacity(2 * d + 1);
            row.push(1.0);
            for i in 0..d {
                row.push(s[i]);
            }
            for i in 0..d {
                row.push(s[i] * s[i]);
            }
            row
        } else {
            basis_row(s)
        }
    };
    let q = design.len();
    let expected = if use_diag_basis { 2 * d + 1 } else { full_basis_len(d) };
    if q != expected {
        return Err(ModelError::WrongValueCount { expected, got: q });
    }
    let mut m = DMatrix::zeros(q, q);
    for (r, p) in design.all_points().enumerate() {
        let s = p - &design.center;
        for (cidx, phi) in basis(&s).into_iter().enumerate() {
            m[(r, cidx)] = phi;
        }
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-12) {
        return Err(ModelError::NonPoised);
    }
    let conditioning = smax / smin;

    if design.scheme == DesignScheme::Coordinate && design.matches_coordinate_pattern() {
        return Ok(PoisednessReport { lambda: 1.0, conditioning });
    }

    // Lagrange coefficients: column i of M⁻¹ gives l_i.
    let lu = m.lu();
    let mut lambda: f64 = 0.0;
    let mut coeffs = Vec::with_capacity(q);
    for i in 0..q {
        let mut e = DVector::zeros(q);
        e[i] = 1.0;
        let alpha = lu.solve(&e).ok_or(ModelError::NonPoised)?;
        coeffs.push(alpha);
    }
    let mut eval_at = |s: &DVector<f64>| {
        let row = DVector::from_vec(basis(s));
        for alpha in &coeffs {
            lambda = lambda.max(alpha.dot(&row).abs());
        }
    };
    for p in design.all_points() {
        eval_at(&(p - &design.center));
    }
    for u in ball_sample(d, 1000) {
        eval_at(&(design.delta * u));
    }
    Ok(PoisednessReport { lambda, conditioning })
}

const HALTON_PRIMES: [u64; 50] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229,
];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 0.0;
    let mut denom = 1.0;
    while i > 0 {
        denom *= base as f64;
        inv += (i % base) as f64 / denom;
        i /= base;
    }
    inv
}

/// `n` low-discrepancy points in the closed unit ball: Halton coordinates
/// mapped through Box–Muller for direction and a radial power for volume.
fn ball_sample(d: usize, n: usize) -> Vec<DVector<f64>> {
    let pairs = (d + 1) / 2;
    assert!(2 * pairs + 1 <= HALTON_PRIMES.len(), "dimension too large for prime table");
    let mut out = Vec::with_capacity(n);
    for idx in 1..=n as u64 {
        let mut z = Vec::with_capacity(2 * pairs);
        for p in 0..pairs {
            let u1 = radical_inverse(idx, HALTON_PRIMES[2 * p]);
            let u2 = radical_inverse(idx, HALTON_PRIMES[2 * p + 1]);
            let r = (-2.0 * u1.max(1e-16).ln()).sqrt();
            z.push(r * (2.0 * std::f64::consts::PI * u2).cos());
            z.push(r * (2.0 * std::f64::consts::PI * u2).sin());
        }
        z.truncate(d);
        let dir = DVector::from_vec(z);
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        let radius = radical_inverse(idx, HALTON_PRIMES[2 * pairs]).powf(1.0 / d as f64);
        out.push(dir * (radius / norm));
    }
    out
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    if d == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(d, |i, _| 1.0 + i as f64 * 1e-3);
    v /= v.norm();
    let mut norm = 0.0;
    for _ in 0..200 {
        let av = a * &v;
        let next = av.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = av / next;
        if (next - norm).abs() <= 1e-12 * next.max(1.0) {
            return next;
        }
        norm = next;
    }
    norm
}

/// Safeguarded BFGS update of a symmetric matrix.
///
/// The update is skipped (input returned unchanged) when the curvature
/// `yᵀs` is not safely positive or when the updated spectral norm would
/// exceed `kappa_h`; the subtraction term is dropped when `Bs` vanishes,
/// which is its continuous limit.
pub fn bfgs_update(
    b: &DMatrix<f64>,
    s: &DVector<f64>,
    y: &DVector<f64>,
    kappa_h: f64,
) -> DMatrix<f64> {
    let ys = y.dot(s);
    if ys <= 1e-10 * y.norm() * s.norm() {
        return b.clone();
    }
    let bs = b * s;
    let sbs = s.dot(&bs);
    let mut updated = b.clone();
    if sbs > 1e-300 {
        updated -= &bs * bs.transpose() / sbs;
    }
    updated += y * y.transpose() / ys;
    // Exact symmetry despite floating-point drift.
    let updated = (&updated + updated.transpose()) * 0.5;
    if spectral_norm(&updated) > kappa_h {
        return b.clone();
    }
    updated
}

/// Fully-linear diagnostic: `‖∇M(center) − ∇f(center)‖ / delta`.
pub fn model_gradient_error(model: &LocalModel, true_grad: &DVector<f64>, delta: f64) -> f64 {
    (&model.g - true_grad).norm() / delta
}
