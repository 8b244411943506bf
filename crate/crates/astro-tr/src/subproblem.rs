//! Trust-region subproblem: minimize the local quadratic within the ball.
//!
//! The Cauchy step (exact minimizer along steepest descent inside the
//! ball) is always available as a fallback; the solver then minimizes the
//! model exactly over the two-dimensional subspace spanned by the
//! gradient and a curvature direction (the Newton direction when the
//! Hessian admits it). The subspace does not depend on the radius, so the
//! feasible sets nest across radii and the achieved decrease is monotone
//! in the radius; it contains the gradient direction, so the result never
//! does worse than the Cauchy step.

use nalgebra::{DMatrix, DVector};

use crate::model::LocalModel;

/// A step inside the trust region together with its achieved decrease and
/// the Cauchy-step reference decrease.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub step: DVector<f64>,
    pub model_decrease: f64,
    pub cauchy_decrease: f64,
}

/// Exact minimizer of the model along `-g` within radius `delta`.
///
/// With positive curvature along the gradient the step length is
/// `min(1, ‖g‖³/(delta·gᵀHg))·delta`; otherwise the boundary is optimal.
/// A zero gradient returns the zero step.
pub fn cauchy_step(g: &DVector<f64>, h: &DMatrix<f64>, delta: f64) -> DVector<f64> {
    assert!(delta > 0.0);
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return DVector::zeros(g.len());
    }
    let ghg = (h * g).dot(g);
    let tau = if ghg > 0.0 { (gnorm.powi(3) / (delta * ghg)).min(1.0) } else { 1.0 };
    g * (-tau * delta / gnorm)
}

/// Minimizes the model over span{g, curvature direction} ∩ ball, never
/// returning less decrease than the Cauchy step.
pub fn solve(model: &LocalModel, delta: f64, kappa_fcd: f64) -> StepResult {
    debug_assert!(kappa_fcd > 0.0 && kappa_fcd <= 1.0);
    let g = &model.g;
    let h = &model.h;
    let d = g.len();
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return StepResult {
            step: DVector::zeros(d),
            model_decrease: 0.0,
            cauchy_decrease: 0.0,
        };
    }

    let sc = cauchy_step(g, h, delta);
    let cauchy_decrease = model.decrease(&sc);
    let mut best_step = sc;
    let mut best_decrease = cauchy_decrease;

    // Second subspace direction: Newton direction when H is SPD on it,
    // else the curvature image of the gradient.
    let q1 = g / gnorm;
    let newton = h.clone().cholesky().map(|chol| chol.solve(g));
    let raw2 = match &newton {
        Some(hg) => hg.clone(),
        None => h * g,
    };
    let mut q2 = &raw2 - q1.dot(&raw2) * &q1;
    let q2_norm = q2.norm();
    if q2_norm > 1e-12 * raw2.norm().max(1.0) {
        q2 /= q2_norm;
        // Reduced two-dimensional problem.
        let gt = DVector::from_vec(vec![g.dot(&q1), 0.0]);
        let hq1 = h * &q1;
        let hq2 = h * &q2;
        let h11 = q1.dot(&hq1);
        let h12 = q1.dot(&hq2);
        let h22 = q2.dot(&hq2);

        let mut consider = |a: f64, b: f64| {
            let step = a * &q1 + b * &q2;
            let dec = model.decrease(&step);
            if dec > best_decrease && step.norm() <= delta * (1.0 + 1e-12) {
                best_decrease = dec;
                best_step = step;
            }
        };

        // Interior stationary point when the reduced Hessian is SPD.
        let det = h11 * h22 - h12 * h12;
        if h11 > 0.0 && det > 0.0 {
            let a = (-gt[0] * h22) / det;
            let b = (gt[0] * h12) / det;
            if (a * a + b * b).sqrt() <= delta {
                consider(a, b);
            }
        }

        // Boundary minimum: m(θ) on the circle of radius delta, scanned
        // then Newton-polished.
        let m_of = |theta: f64| {
            let (sin, cos) = theta.sin_cos();
            delta * gt[0] * cos
                + 0.5 * delta * delta * (h11 * cos * cos + 2.0 * h12 * sin * cos + h22 * sin * sin)
        };
        let mut best_theta = 0.0;
        let mut best_val = f64::INFINITY;
        let scan = 720;
        for i in 0..scan {
            let theta = i as f64 * 2.0 * std::f64::consts::PI / scan as f64;
            let v = m_of(theta);
            if v < best_val {
                best_val = v;
                best_theta = theta;
            }
        }
        let dm = |theta: f64| {
            let (sin, cos) = theta.sin_cos();
            let (sin2, cos2) = (2.0 * theta).sin_cos();
            -delta * gt[0] * sin + delta * delta * (0.5 * (h22 - h11) * sin2 + h12 * cos2)
        };
        let d2m = |theta: f64| {
            let (sin2, cos2) = (2.0 * theta).sin_cos();
            -delta * gt[0] * theta.cos()
                + delta * delta * ((h22 - h11) * cos2 - 2.0 * h12 * sin2)
        };
        let mut theta = best_theta;
        for _ in 0..8 {
            let second = d2m(theta);
            if second.abs() < 1e-14 {
                break;
            }
            theta -= dm(theta) / second;
        }
        if m_of(theta) <= best_val {
            best_theta = theta;
        }
        let (sin, cos) = best_theta.sin_cos();
        consider(delta * cos, delta * sin);
    }

    StepResult { step: best_step, model_decrease: best_decrease, cauchy_decrease }
}
