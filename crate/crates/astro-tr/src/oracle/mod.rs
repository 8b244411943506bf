//! Stochastic oracle abstraction and the synthetic problem library.
//!
//! A problem maps `(point, stream)` to one sampled observation of the
//! objective, and for first-order problems also one unbiased gradient
//! sample. All problems here are synthetic: the true objective, gradient,
//! and (where tractable) the pointwise noise variance are available for
//! diagnostics, so benchmark runs can measure real optimality gaps.
//!
//! The library spans the sample-path regularity regimes that determine how
//! much common random numbers help:
//!
//! * `quad-smooth`, `rosenbrock-smooth` — smooth per-scenario paths,
//!   `F(x,ξ) = f(x) + noise_scale·(lin_scale·a(ξ)ᵀx + b(ξ))`;
//! * `quad-lipschitz` — Lipschitz but kinked paths from an L1 distance
//!   field with random sign and anchor;
//! * `bm-field` — Brownian-motion noise along a fixed direction; paths are
//!   Hölder-½ (not Lipschitz) while variance and autocorrelation are
//!   Lipschitz in the displacement;
//! * `bus-schedule` — expected passenger waiting time under Poisson
//!   arrivals with one controllable departure; noise is intrinsic to the
//!   arrival process.

mod brownian;

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::RandomStream;
use brownian::BrownianField;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unknown problem '{0}'; expected one of {names}", names = PROBLEM_NAMES.join(", "))]
    UnknownProblem(String),
    #[error("problem '{name}' does not accept parameter '{key}'")]
    UnknownParameter { name: String, key: String },
    #[error("invalid problem definition: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: problem has dimension {expected}, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point contains a non-finite coordinate")]
    NonFinitePoint,
}

/// Names accepted by [`make_problem`].
pub const PROBLEM_NAMES: &[&str] =
    &["quad-smooth", "quad-lipschitz", "bm-field", "bus-schedule", "rosenbrock-smooth"];

/// Sample-path regularity class realized by a problem's noise construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularity {
    /// No structure assumed beyond finite variance.
    IndependentNoise,
    /// Hölder-continuous paths; variance and autocorrelation Lipschitz in
    /// the displacement, paths themselves not Lipschitz.
    HoelderPaths,
    /// Paths Lipschitz in the point with square-integrable random slope.
    LipschitzPaths,
    /// Paths differentiable with integrable gradient Lipschitz constant.
    SmoothPaths,
}

/// Declarative problem description; [`make_problem`] turns it into an oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub dimension: usize,
    pub noise_scale: f64,
    pub regularity: Regularity,
    /// Generator-specific parameters; missing keys take documented defaults.
    pub parameters: BTreeMap<String, f64>,
    pub x0: Vec<f64>,
}

impl ProblemSpec {
    /// Spec for `name` with library defaults (dimension, start point, noise).
    pub fn preset(name: &str) -> Result<Self, OracleError> {
        let dimension = match name {
            "bus-schedule" => 1,
            _ => 2,
        };
        Self::with_dimension(name, dimension)
    }

    /// Spec for `name` in the given dimension, defaults elsewhere.
    pub fn with_dimension(name: &str, dimension: usize) -> Result<Self, OracleError> {
        let regularity = match name {
            "quad-smooth" | "rosenbrock-smooth" => Regularity::SmoothPaths,
            "quad-lipschitz" => Regularity::LipschitzPaths,
            "bm-field" | "bus-schedule" => Regularity::HoelderPaths,
            _ => return Err(OracleError::UnknownProblem(name.to_string())),
        };
        let x0 = match name {
            "bus-schedule" => vec![5.0],
            "rosenbrock-smooth" => {
                (0..dimension).map(|i| if i % 2 == 0 { -1.2 } else { 1.0 }).collect()
            }
            _ => vec![1.0; dimension],
        };
        let noise_scale = match name {
            "bus-schedule" => 0.0,
            _ => 1.0,
        };
        Ok(ProblemSpec {
            name: name.to_string(),
            dimension,
            noise_scale,
            regularity,
            parameters: BTreeMap::new(),
            x0,
        })
    }

    pub fn x0_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.x0.clone())
    }
}

/// One oracle response: a sampled objective value, plus a gradient sample
/// when the oracle is first-order.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
}

/// Hölder-regime constants of the noise field at a point, for checking the
/// CRN variance bound `2 σ²(x) l_rho ‖s‖^alpha + 3 l_sigma ‖s‖`.
#[derive(Clone, Copy, Debug)]
pub struct HolderConstants {
    pub l_sigma: f64,
    pub l_rho: f64,
    pub alpha: f64,
}

/// A stochastic simulation oracle over `(point, stream)` pairs.
///
/// Evaluation is deterministic given the stream: the stream *is* the
/// scenario ξ, so re-evaluating any point under the same stream replays
/// the identical observation, which is exactly what CRN requires.
pub trait StochasticOracle: Send + Sync {
    fn spec(&self) -> &ProblemSpec;

    /// Whether gradient samples are produced.
    fn first_order(&self) -> bool;

    /// One observation of `F(x, ξ)` (and `G(x, ξ)` when first-order).
    fn evaluate(&self, x: &DVector<f64>, stream: &RandomStream)
        -> Result<Observation, OracleError>;

    /// The exact objective `f(x) = E[F(x, ·)]`.
    fn true_value(&self, x: &DVector<f64>) -> f64;

    /// The exact gradient `∇f(x)`.
    fn true_gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Pointwise noise variance `Var(F(x, ·))` where a closed form exists.
    fn variance_at(&self, x: &DVector<f64>) -> Option<f64>;

    /// Constants for the Hölder-regime variance-difference bound, when the
    /// generator can state them at `x`.
    fn holder_constants(&self, _x: &DVector<f64>) -> Option<HolderConstants> {
        None
    }

    /// `E[κ²]` for the noise-path Lipschitz slope κ(ξ), when the generator
    /// can state it. Tighter than a constant for the full path since the
    /// deterministic part drops out of variances of differences.
    fn lipschitz_sq_moment(&self) -> Option<f64> {
        None
    }

    fn dimension(&self) -> usize {
        self.spec().dimension
    }
}

fn check_point(spec: &ProblemSpec, x: &DVector<f64>) -> Result<(), OracleError> {
    if x.len() != spec.dimension {
        return Err(OracleError::DimensionMismatch { expected: spec.dimension, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(OracleError::NonFinitePoint);
    }
    Ok(())
}

fn param(spec: &ProblemSpec, key: &str, default: f64) -> f64 {
    spec.parameters.get(key).copied().unwrap_or(default)
}

fn validate_params(spec: &ProblemSpec, allowed: &[&str]) -> Result<(), OracleError> {
    for key in spec.parameters.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(OracleError::UnknownParameter {
                name: spec.name.clone(),
                key: key.clone(),
            });
        }
    }
    Ok(())
}

/// Builds the oracle described by `spec`.
///
/// The regularity tag is derived from the generator, not trusted from the
/// input; dimension and parameter names are validated here so the solvers
/// never see a malformed problem.
pub fn make_problem(mut spec: ProblemSpec) -> Result<Box<dyn StochasticOracle>, OracleError> {
    if spec.dimension == 0 {
        return Err(OracleError::InvalidSpec("dimension must be >= 1".into()));
    }
    if !(spec.noise_scale >= 0.0) {
        return Err(OracleError::InvalidSpec("noise_scale must be >= 0".into()));
    }
    if spec.x0.len() != spec.dimension {
        return Err(OracleError::InvalidSpec(format!(
            "x0 has {} coordinates but dimension is {}",
            spec.x0.len(),
            spec.dimension
        )));
    }
    match spec.name.as_str() {
        "quad-smooth" => {
            validate_params(&spec, &["lin_scale"])?;
            spec.regularity = Regularity::SmoothPaths;
            Ok(Box::new(SmoothNoise::new(spec, Objective::Quadratic)))
        }
        "rosenbrock-smooth" => {
            if spec.dimension < 2 {
                return Err(OracleError::InvalidSpec(
                    "rosenbrock-smooth needs dimension >= 2".into(),
                ));
            }
            validate_params(&spec, &["lin_scale"])?;
            spec.regularity = Regularity::SmoothPaths;
            Ok(Box::new(SmoothNoise::new(spec, Objective::Rosenbrock)))
        }
        "quad-lipschitz" => {
            validate_params(&spec, &["slope", "kink_box"])?;
            spec.regularity = Regularity::LipschitzPaths;
            Ok(Box::new(KinkField::new(spec)))
        }
        "bm-field" => {
            validate_params(&spec, &["t0"])?;
            spec.regularity = Regularity::HoelderPaths;
            Ok(Box::new(BrownianNoise::new(spec)))
        }
        "bus-schedule" => {
            if spec.dimension != 1 {
                return Err(OracleError::InvalidSpec("bus-schedule is one-dimensional".into()));
            }
            validate_params(&spec, &["rate", "horizon"])?;
            spec.regularity = Regularity::HoelderPaths;
            Ok(Box::new(BusSchedule::new(spec)))
        }
        other => Err(OracleError::UnknownProblem(other.to_string())),
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Quadratic,
    Rosenbrock,
}

impl Objective {
    fn value(self, x: &DVector<f64>) -> f64 {
        match self {
            Objective::Quadratic => 0.5 * x.norm_squared(),
            Objective::Rosenbrock => {
                let mut f = 0.0;
                for i in 0..x.len() - 1 {
                    f += 100.0 * (x[i + 1] - x[i] * x[i]).powi(2) + (1.0 - x[i]).powi(2);
                }
                f
            }
        }
    }

    fn gradient(self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Objective::Quadratic => x.clone(),
            Objective::Rosenbrock => {
                let d = x.len();
                let mut g = DVector::zeros(d);
                for i in 0..d - 1 {
                    let t = x[i + 1] - x[i] * x[i];
                    g[i] += -400.0 * x[i] * t - 2.0 * (1.0 - x[i]);
                    g[i + 1] += 200.0 * t;
                }
                g
            }
        }
    }
}

/// `F(x,ξ) = f(x) + noise_scale·(lin_scale·a(ξ)ᵀx + b(ξ))` with standard
/// normal `a(ξ), b(ξ)`; per-scenario paths are smooth, and the exact
/// per-scenario gradient `∇f(x) + noise_scale·lin_scale·a(ξ)` is returned.
struct SmoothNoise {
    spec: ProblemSpec,
    objective: Objective,
    lin_scale: f64,
}

impl SmoothNoise {
    fn new(spec: ProblemSpec, objective: Objective) -> Self {
        let lin_scale = param(&spec, "lin_scale", 0.5);
        SmoothNoise { spec, objective, lin_scale }
    }
}

impl StochasticOracle for SmoothNoise {
    fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    fn first_order(&self) -> bool {
        true
    }

    fn evaluate(
        &self,
        x: &DVector<f64>,
        stream: &RandomStream,
    ) -> Result<Observation, OracleError> {
        check_point(&self.spec, x)?;
        let mut rng = stream.rng();
        let d = self.spec.dimension;
        // Draw order is fixed (a first, then b) so the scenario does not
        // depend on the queried point.
        let a = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b: f64 = rng.sample(StandardNormal);
        let s = self.spec.noise_scale;
        let value = self.objective.value(x) + s * (self.lin_scale * a.dot(x) + b);
        let gradient = self.objective.gradient(x) + (s * self.lin_scale) * &a;
        Ok(Observation { value, gradient: Some(gradient) })
    }

    fn true_value(&self, x: &DVector<f64>) -> f64 {
        self.objective.value(x)
    }

    fn true_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.objective.gradient(x)
    }

    fn variance_at(&self, x: &DVector<f64>) -> Option<f64> {
        let s = self.spec.noise_scale;
        Some(s * s * (1.0 + self.lin_scale * self.lin_scale * x.norm_squared()))
    }

    fn lipschitz_sq_moment(&self) -> Option<f64> {
        // Noise-path slope is noise_scale·lin_scale·‖a‖; E‖a‖² = d.
        let c = self.spec.noise_scale * self.lin_scale;
        Some(c * c * self.spec.dimension as f64)
    }
}

/// `F(x,ξ) = ½‖x‖² + noise_scale·c(ξ)·‖x − m(ξ)‖₁` with `c(ξ) = ±slope`
/// (fair sign, independent of `m`) and `m(ξ)` uniform on a box. The sign
/// symmetry makes the noise zero-mean at every point while the paths keep
/// L1 kinks; slopes are bounded by `noise_scale·slope·√d`.
struct KinkField {
    spec: ProblemSpec,
    slope: f64,
    kink_box: f64,
}

impl KinkField {
    fn new(spec: ProblemSpec) -> Self {
        let slope = param(&spec, "slope", 1.0);
        let kink_box = param(&spec, "kink_box", 2.0);
        KinkField { spec, slope, kink_box }
    }

    /// Draws `(c, m)` for the scenario; fixed order, point-independent.
    fn scenario(&self, stream: &RandomStream) -> (f64, DVector<f64>) {
        let mut rng = stream.rng();
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let w = self.kink_box;
        let m = DVector::from_fn(self.spec.dimension, |_, _| rng.gen_range(-w..w));
        (sign * self.slope, m)
    }
}

impl StochasticOracle for KinkField {
    fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    fn first_order(&self) -> bool {
        false
    }

    fn evaluate(
        &self,
        x: &DVector<f64>,
        stream: &RandomStream,
    ) -> Result<Observation, OracleError> {
        check_point(&self.spec, x)?;
        let (c, m) = self.scenario(stream);
        let l1 = (x - &m).iter().map(|v| v.abs()).sum::<f64>();
        let value = 0.5 * x.norm_squared() + self.spec.noise_scale * c * l1;
        Ok(Observation { value, gradient: None })
    }

    fn true_value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.norm_squared()
    }

    fn true_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn variance_at(&self, x: &DVector<f64>) -> Option<f64> {
        // Var = (noise_scale·slope)²·E[(Σ|x_i − m_i|)²] since the sign is
        // fair and independent of m.
        let w = self.kink_box;
        let mut mean_sum = 0.0;
        let mut var_sum = 0.0;
        for &xi in x.iter() {
            let (e1, e2) = if xi.abs() <= w {
                ((xi * xi + w * w) / (2.0 * w), xi * xi + w * w / 3.0)
            } else {
                (xi.abs(), xi * xi + w * w / 3.0)
            };
            mean_sum += e1;
            var_sum += e2 - e1 * e1;
        }
        let second_moment = var_sum + mean_sum * mean_sum;
        let c = self.spec.noise_scale * self.slope;
        Some(c * c * second_moment)
    }

    fn lipschitz_sq_moment(&self) -> Option<f64> {
        // |Δnoise| <= noise_scale·slope·‖s‖₁ <= noise_scale·slope·√d·‖s‖₂.
        let c = self.spec.noise_scale * self.slope;
        Some(c * c * self.spec.dimension as f64)
    }
}

/// `F(x,ξ) = ½‖x‖² + noise_scale·B_ξ(t(x))`, `t(x) = wᵀx + t0` with
/// `w = 𝟙/√d`. Increments of the Brownian field give
/// `Var(F(x+s)−F(x)) = noise_scale²·|wᵀs|`: variance grows linearly in the
/// displacement under CRN, while the paths are Hölder-½ and not Lipschitz.
struct BrownianNoise {
    spec: ProblemSpec,
    t0: f64,
    field: BrownianField,
}

impl BrownianNoise {
    fn new(spec: ProblemSpec) -> Self {
        let t0 = param(&spec, "t0", 1.0);
        BrownianNoise { spec, t0, field: BrownianField::new() }
    }

    fn time_at(&self, x: &DVector<f64>) -> f64 {
        let d = self.spec.dimension as f64;
        x.iter().sum::<f64>() / d.sqrt() + self.t0
    }
}

impl StochasticOracle for BrownianNoise {
    fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    fn first_order(&self) -> bool {
        false
    }

    fn evaluate(
        &self,
        x: &DVector<f64>,
        stream: &RandomStream,
    ) -> Result<Observation, OracleError> {
        check_point(&self.spec, x)?;
        let noise = self.field.value(stream, self.time_at(x));
        Ok(Observation {
            value: 0.5 * x.norm_squared() + self.spec.noise_scale * noise,
            gradient: None,
        })
    }

    fn true_value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.norm_squared()
    }

    fn true_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn variance_at(&self, x: &DVector<f64>) -> Option<f64> {
        let s = self.spec.noise_scale;
        Some(s * s * self.time_at(x).abs())
    }

    fn holder_constants(&self, x: &DVector<f64>) -> Option<HolderConstants> {
        let t = self.time_at(x).abs();
        if t == 0.0 {
            return None;
        }
        let s = self.spec.noise_scale;
        // |σ²(x+s)−σ²(x)| = noise_scale²·|Δt| <= noise_scale²·‖s‖ since
        // ‖w‖ = 1; 1−ρ <= |Δt|/t for |Δt| < t.
        Some(HolderConstants { l_sigma: s * s, l_rho: 1.0 / t, alpha: 1.0 })
    }
}

/// Expected passenger waiting time for one controllable bus departure.
///
/// Passengers arrive by a Poisson process with the given `rate` on
/// `[0, horizon]`; a sweep bus always departs at the horizon, and each
/// passenger boards the first departure at or after their arrival. The
/// observation is total waiting time divided by the horizon. Noise is the
/// arrival process itself, so `noise_scale` is ignored. The exact
/// objective is `(x² + (horizon−x)²)·rate/(2·horizon)` for a departure
/// inside the window; the sign flip of a passenger's wait as the departure
/// crosses their arrival makes paths discontinuous in `x`, while the
/// variance stays Lipschitz — the same regime as the Brownian field.
struct BusSchedule {
    spec: ProblemSpec,
    rate: f64,
    horizon: f64,
}

impl BusSchedule {
    fn new(spec: ProblemSpec) -> Self {
        let rate = param(&spec, "rate", 1.0);
        let horizon = param(&spec, "horizon", 30.0);
        BusSchedule { spec, rate, horizon }
    }
}

impl StochasticOracle for BusSchedule {
    fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    fn first_order(&self) -> bool {
        false
    }

    fn evaluate(
        &self,
        x: &DVector<f64>,
        stream: &RandomStream,
    ) -> Result<Observation, OracleError> {
        check_point(&self.spec, x)?;
        let mut rng = stream.rng();
        let t_end = self.horizon;
        let bus = x[0];
        let n = rng.sample(Poisson::new(self.rate * t_end).expect("positive rate")) as u64;
        let mut total = 0.0;
        for _ in 0..n {
            let arrival = rng.gen_range(0.0..t_end);
            let departure = if arrival <= bus { bus.min(t_end) } else { t_end };
            total += departure - arrival;
        }
        Ok(Observation { value: total / t_end, gradient: None })
    }

    fn true_value(&self, x: &DVector<f64>) -> f64 {
        let t = self.horizon;
        let xc = x[0].clamp(0.0, t);
        self.rate * (xc * xc + (t - xc) * (t - xc)) / (2.0 * t)
    }

    fn true_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = self.horizon;
        let g = if x[0] <= 0.0 || x[0] >= t { 0.0 } else { self.rate * (2.0 * x[0] - t) / t };
        DVector::from_vec(vec![g])
    }

    fn variance_at(&self, x: &DVector<f64>) -> Option<f64> {
        // Compound-Poisson variance: rate·∫ wait(t)² dt over the window,
        // normalized by horizon².
        let t = self.horizon;
        let xc = x[0].clamp(0.0, t);
        let integral = if x[0] >= 0.0 && x[0] <= t {
            xc.powi(3) / 3.0 + (t - xc).powi(3) / 3.0
        } else {
            t.powi(3) / 3.0
        };
        Some(self.rate * integral / (t * t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stream(i: u64) -> RandomStream {
        RandomStream::derive(7, &[i])
    }

    #[test]
    fn zero_noise_quadratic_is_exact() {
        let mut spec = ProblemSpec::with_dimension("quad-smooth", 3).unwrap();
        spec.noise_scale = 0.0;
        let p = make_problem(spec).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let obs = p.evaluate(&x, &stream(0)).unwrap();
        assert_eq!(obs.value, 0.5 * x.norm_squared());
        assert_eq!(obs.gradient.unwrap(), x);
    }

    #[test]
    fn gradients_match_central_differences_at_zero_noise() {
        for name in ["quad-smooth", "rosenbrock-smooth"] {
            let mut spec = ProblemSpec::with_dimension(name, 4).unwrap();
            spec.noise_scale = 0.0;
            let p = make_problem(spec).unwrap();
            let check = stream(1);
            let mut rng = check.rng();
            for _ in 0..10 {
                let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.5..1.5));
                let g = p.true_gradient(&x);
                let h = 1e-5;
                for i in 0..4 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (p.true_value(&xp) - p.true_value(&xm)) / (2.0 * h);
                    let scale = 1.0 + g[i].abs();
                    assert!(
                        (fd - g[i]).abs() / scale <= 1e-6,
                        "{name}: coord {i}, fd {fd} vs analytic {}",
                        g[i]
                    );
                }
            }
        }
    }

    #[test]
    fn repeated_streams_replay_observations() {
        for name in PROBLEM_NAMES {
            let p = make_problem(ProblemSpec::preset(name).unwrap()).unwrap();
            let x = p.spec().x0_vector();
            let s = stream(3);
            let a = p.evaluate(&x, &s).unwrap();
            let b = p.evaluate(&x, &s).unwrap();
            assert_eq!(a, b, "{name} is not replayable");
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = make_problem(ProblemSpec::preset("quad-smooth").unwrap()).unwrap();
        let bad = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            p.evaluate(&bad, &stream(0)),
            Err(OracleError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn unknown_problem_and_parameter_are_rejected() {
        assert!(matches!(
            ProblemSpec::preset("quad-mystery"),
            Err(OracleError::UnknownProblem(_))
        ));
        let mut spec = ProblemSpec::preset("quad-smooth").unwrap();
        spec.parameters.insert("slope".into(), 1.0);
        assert!(matches!(make_problem(spec), Err(OracleError::UnknownParameter { .. })));
    }

    #[test]
    fn additive_noise_cancels_exactly_under_crn() {
        let mut spec = ProblemSpec::with_dimension("quad-smooth", 3).unwrap();
        spec.parameters.insert("lin_scale".into(), 0.0);
        spec.noise_scale = 2.0;
        let p = make_problem(spec).unwrap();
        let x1 = DVector::from_vec(vec![0.3, -0.8, 1.1]);
        let x2 = DVector::from_vec(vec![-0.4, 0.2, 0.9]);
        for i in 0..50 {
            let s = stream(i);
            let d = p.evaluate(&x1, &s).unwrap().value - p.evaluate(&x2, &s).unwrap().value;
            let truth = p.true_value(&x1) - p.true_value(&x2);
            assert!((d - truth).abs() <= 1e-12, "scenario {i}: {d} vs {truth}");
        }
    }

    #[test]
    fn sample_means_are_unbiased() {
        // 5 standard errors over n=1e5 independent scenarios, at 5 points
        // per problem.
        let n = 100_000u64;
        for name in PROBLEM_NAMES {
            let p = make_problem(ProblemSpec::preset(name).unwrap()).unwrap();
            let d = p.dimension();
            let points: Vec<DVector<f64>> = (0..5)
                .map(|i| {
                    let base = p.spec().x0_vector();
                    let mut pt = base;
                    for c in 0..d {
                        pt[c] += (i as f64 - 2.0) * 0.3 * ((c + 1) as f64).sqrt() / d as f64;
                    }
                    pt
                })
                .collect();
            for (pi, x) in points.iter().enumerate() {
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for j in 0..n {
                    let v = p.evaluate(x, &stream(j * 8 + pi as u64)).unwrap().value;
                    sum += v;
                    sumsq += v * v;
                }
                let mean = sum / n as f64;
                let var = (sumsq / n as f64 - mean * mean).max(0.0);
                let se = (var / n as f64).sqrt();
                let f = p.true_value(x);
                assert!(
                    (mean - f).abs() <= 5.0 * se.max(1e-12),
                    "{name} at point {pi}: mean {mean}, f {f}, se {se}"
                );
            }
        }
    }

    #[test]
    fn closed_form_variances_match_simulation() {
        let n = 40_000u64;
        for name in PROBLEM_NAMES {
            let mut spec = ProblemSpec::preset(name).unwrap();
            if *name == "bus-schedule" {
                spec.x0 = vec![12.0];
            }
            let p = make_problem(spec).unwrap();
            let x = p.spec().x0_vector();
            let sigma2 = match p.variance_at(&x) {
                Some(v) => v,
                None => continue,
            };
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for j in 0..n {
                let v = p.evaluate(&x, &stream(j)).unwrap().value;
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            assert!(
                (var / sigma2 - 1.0).abs() < 0.1,
                "{name}: simulated var {var} vs closed form {sigma2}"
            );
        }
    }

    #[test]
    fn variance_is_stable_under_doubling() {
        let n = 10_000u64;
        for name in PROBLEM_NAMES {
            let p = make_problem(ProblemSpec::preset(name).unwrap()).unwrap();
            let x = p.spec().x0_vector();
            let var_of = |count: u64| {
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for j in 0..count {
                    let v = p.evaluate(&x, &stream(j)).unwrap().value;
                    sum += v;
                    sumsq += v * v;
                }
                let mean = sum / count as f64;
                sumsq / count as f64 - mean * mean
            };
            let (v1, v2) = (var_of(n), var_of(2 * n));
            if v1 == 0.0 && v2 == 0.0 {
                continue;
            }
            let ratio = v2 / v1;
            assert!(
                (0.8..=1.25).contains(&ratio),
                "{name}: variance ratio {ratio} outside [0.8, 1.25]"
            );
        }
    }

    #[test]
    fn kink_field_respects_per_scenario_slope_bound() {
        let spec = ProblemSpec::with_dimension("quad-lipschitz", 3).unwrap();
        let noise_scale = spec.noise_scale;
        let slope = 1.0;
        let p = make_problem(spec).unwrap();
        let d = 3.0f64;
        let mut rng = stream(500).rng();
        for i in 0..1000 {
            let x1 = DVector::from_fn(3, |_, _| rng.gen_range(-3.0..3.0));
            let x2 = DVector::from_fn(3, |_, _| rng.gen_range(-3.0..3.0));
            let s = stream(i);
            let dv = p.evaluate(&x1, &s).unwrap().value - p.evaluate(&x2, &s).unwrap().value;
            // Quadratic part slope over the segment plus the kink slope.
            let kappa = x1.norm().max(x2.norm()) + noise_scale * slope * d.sqrt();
            let dist = (&x1 - &x2).norm();
            assert!(
                dv.abs() <= kappa * dist + 1e-9,
                "triple {i}: |ΔF| = {} > {}",
                dv.abs(),
                kappa * dist
            );
        }
    }

    #[test]
    fn brownian_field_orders_do_not_matter_through_the_oracle() {
        let p = make_problem(ProblemSpec::with_dimension("bm-field", 2).unwrap()).unwrap();
        let s = stream(9);
        let xs: Vec<DVector<f64>> = [0.7, -0.3, 0.1, 0.4]
            .iter()
            .map(|&v| DVector::from_vec(vec![v, -v]))
            .collect();
        let forward: Vec<f64> = xs.iter().map(|x| p.evaluate(x, &s).unwrap().value).collect();
        let p2 = make_problem(ProblemSpec::with_dimension("bm-field", 2).unwrap()).unwrap();
        for x in xs.iter().rev() {
            p2.evaluate(x, &s).unwrap();
        }
        let replay: Vec<f64> = xs.iter().map(|x| p2.evaluate(x, &s).unwrap().value).collect();
        assert_eq!(forward, replay);
    }

    #[test]
    fn brownian_increment_variance_scales_linearly() {
        let p = make_problem(ProblemSpec::with_dimension("bm-field", 2).unwrap()).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.1]);
        let dir = DVector::from_vec(vec![1.0, 0.0]);
        let mut logs: Vec<(f64, f64)> = Vec::new();
        for &h in &[0.2, 0.1, 0.05, 0.02] {
            let xp = &x + h * &dir;
            let n = 10_000u64;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for j in 0..n {
                let s = stream(j);
                let d = p.evaluate(&xp, &s).unwrap().value - p.evaluate(&x, &s).unwrap().value;
                sum += d;
                sumsq += d * d;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            logs.push((h.ln(), var.ln()));
        }
        let nl = logs.len() as f64;
        let mx = logs.iter().map(|p| p.0).sum::<f64>() / nl;
        let my = logs.iter().map(|p| p.1).sum::<f64>() / nl;
        let slope = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / logs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - 1.0).abs() <= 0.15, "log-log slope {slope}");
    }

    #[test]
    fn bus_waits_are_nonnegative_and_mean_matches() {
        let p = make_problem(ProblemSpec::preset("bus-schedule").unwrap()).unwrap();
        let x = DVector::from_vec(vec![10.0]);
        let n = 20_000u64;
        let mut sum = 0.0;
        for j in 0..n {
            let v = p.evaluate(&x, &stream(j)).unwrap().value;
            assert!(v >= 0.0, "negative waiting time {v}");
            sum += v;
        }
        let mean = sum / n as f64;
        let f = p.true_value(&x);
        let se = (p.variance_at(&x).unwrap() / n as f64).sqrt();
        assert!((mean - f).abs() <= 5.0 * se, "mean {mean} vs {f} (se {se})");
        // Analytic check of the closed form itself at an interior point.
        assert_relative_eq!(f, (100.0 + 400.0) / 60.0, epsilon = 1e-12);
    }

    #[test]
    fn holder_constants_bound_observed_difference_variance() {
        let p = make_problem(ProblemSpec::with_dimension("bm-field", 2).unwrap()).unwrap();
        let x = DVector::from_vec(vec![0.0, 0.0]);
        let hc = p.holder_constants(&x).unwrap();
        let sigma2 = p.variance_at(&x).unwrap();
        let dir = DVector::from_vec(vec![1.0, 0.0]);
        for &h in &[0.1, 0.02] {
            let xp = &x + h * &dir;
            let n = 10_000u64;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for j in 0..n {
                let s = stream(j);
                let d = p.evaluate(&xp, &s).unwrap().value - p.evaluate(&x, &s).unwrap().value;
                sum += d;
                sumsq += d * d;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            let bound = 2.0 * sigma2 * hc.l_rho * h.powf(hc.alpha) + 3.0 * hc.l_sigma * h;
            assert!(var <= bound, "h={h}: var {var} exceeds bound {bound}");
        }
    }
}
