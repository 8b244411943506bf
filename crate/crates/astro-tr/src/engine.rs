//! The adaptive-sampling trust-region outer loop.
//!
//! Each iteration runs four steps. Model update (MU) estimates the
//! objective — and for gradient oracles the gradient — at the incumbent,
//! or over a coordinate design for derivative-free runs, using the
//! configured adaptive sampling rule. Subproblem minimization (SM) finds
//! a candidate step inside the trust region. Candidate evaluation (CE)
//! estimates the objective at the candidate; under CRN the candidate
//! joins the iteration's shared sample group, and if its variance raises
//! the group maximum, every point is re-extended to the new common sample
//! size and the incumbent estimate is refreshed before the success ratio
//! is computed. Trust-region management (TM) accepts the candidate and
//! grows the radius when the success ratio clears the threshold and the
//! model gradient is large relative to the radius; otherwise the radius
//! shrinks.
//!
//! Every oracle call is billed to the run's work counter, including the
//! pilot estimate that calibrates `kappa_as` when it is not given.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    bfgs_update, coordinate_design, full_quadratic_design, interpolate, DesignSet, LocalModel,
    ModelError,
};
use crate::oracle::{Observation, OracleError, StochasticOracle};
use crate::sampling::{
    inflation, GroupSampler, InflationSchedule, RuleKind, SampleStats, SamplingRule, StreamContext,
};
use crate::stream::{RandomStream, StreamMode, StreamPolicy};
use crate::subproblem::solve;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which local model the derivative-free path builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelScheme {
    /// Diagonal quadratic over the coordinate design (2d+1 points).
    Diagonal,
    /// Full quadratic over (d+1)(d+2)/2 points.
    FullQuadratic,
}

/// Complete configuration of one optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub delta0: f64,
    pub delta_max: f64,
    /// Success-ratio acceptance threshold, in (0, 1).
    pub eta: f64,
    /// Radius expansion factor (> 1).
    pub gamma1: f64,
    /// Radius shrink factor, in (0, 1).
    pub gamma2: f64,
    /// Criticality scale: acceptance requires ‖∇M‖/Δ ≥ 1/mu.
    pub mu: f64,
    pub rule: RuleKind,
    pub sigma0: f64,
    /// `None` calibrates `kappa_as = max(|f̂(x0)|, 1e-3)/delta0²` from a
    /// 32-sample pilot, following the recommendation to scale it with the
    /// initial objective value.
    pub kappa_as: Option<f64>,
    pub n_min: u64,
    pub n_cap: u64,
    pub inflation: InflationSchedule,
    pub stream_policy: StreamPolicy,
    /// Maximum total oracle calls.
    pub budget: u64,
    pub max_iters: u64,
    /// Stop once the stopping gradient norm falls to this value.
    pub grad_tol: Option<f64>,
    /// Use the true gradient for the stopping test (synthetic problems);
    /// otherwise the model gradient is used.
    pub stop_on_true_gradient: bool,
    pub kappa_h: f64,
    pub kappa_fcd: f64,
    pub model_scheme: ModelScheme,
    pub master_seed: u64,
    pub replication: u64,
}

impl EngineConfig {
    /// Defaults for a rule, with the stream mode the rule is analyzed under.
    pub fn for_rule(rule: RuleKind) -> Self {
        EngineConfig {
            delta0: 1.0,
            delta_max: 1e3,
            eta: 0.1,
            gamma1: 1.5,
            gamma2: 0.75,
            mu: 100.0,
            rule,
            sigma0: 1.0,
            kappa_as: None,
            n_min: 2,
            n_cap: 1_000_000,
            inflation: InflationSchedule::default(),
            stream_policy: StreamPolicy { mode: rule.natural_stream_mode(), aggressive_reuse: false },
            budget: 1_000_000,
            max_iters: 100_000,
            grad_tol: None,
            stop_on_true_gradient: true,
            kappa_h: crate::model::DEFAULT_KAPPA_H,
            kappa_fcd: 1.0,
            model_scheme: ModelScheme::Diagonal,
            master_seed: 0,
            replication: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: &str| Err(EngineError::Config(msg.to_string()));
        if !(self.delta0 > 0.0) {
            return bad("delta0 must be > 0");
        }
        if !(self.delta_max > self.delta0) {
            return bad("delta_max must be > delta0");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must be in (0,1)");
        }
        if !(self.gamma1 > 1.0) {
            return bad("gamma1 must be > 1");
        }
        if !(self.gamma2 > 0.0 && self.gamma2 < 1.0) {
            return bad("gamma2 must be in (0,1)");
        }
        if !(self.mu > 0.0) {
            return bad("mu must be > 0");
        }
        if !(self.sigma0 > 0.0) {
            return bad("sigma0 must be > 0");
        }
        if let Some(k) = self.kappa_as {
            if !(k > 0.0) {
                return bad("kappa_as must be > 0");
            }
        }
        if self.n_min < 2 {
            return bad("n_min must be >= 2");
        }
        if self.n_cap < self.n_min {
            return bad("n_cap must be >= n_min");
        }
        if self.budget == 0 {
            return bad("budget must be >= 1");
        }
        if !(self.kappa_h > 0.0) {
            return bad("kappa_h must be > 0");
        }
        if !(self.kappa_fcd > 0.0 && self.kappa_fcd <= 1.0) {
            return bad("kappa_fcd must be in (0,1]");
        }
        self.inflation.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        if self.stream_policy.mode != self.rule.natural_stream_mode() {
            return bad(match self.rule.natural_stream_mode() {
                StreamMode::Crn => "rule uses common random numbers; stream mode must be crn",
                StreamMode::Independent => {
                    "rule is analyzed without CRN; stream mode must be independent"
                }
            });
        }
        if self.stream_policy.aggressive_reuse && self.stream_policy.mode != StreamMode::Crn {
            return bad("aggressive_reuse requires CRN streams");
        }
        Ok(())
    }
}

/// State of one iteration, as recorded in the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: u64,
    /// Incumbent at the start of the iteration.
    pub x_center: Vec<f64>,
    /// Trust-region radius during the iteration.
    pub delta: f64,
    /// Samples per evaluated point (center, design points, candidate).
    pub n_per_point: Vec<u64>,
    pub work_this_iter: u64,
    pub rho_hat: f64,
    pub success: bool,
    pub model_grad_norm: f64,
    pub true_grad_norm: Option<f64>,
    pub f_est_center: f64,
    pub f_true_center: Option<f64>,
    /// `|Ē_s − Ē_0|`: deviation of the estimated decrease from the true
    /// decrease, the balance diagnostic.
    pub balance_lhs: Option<f64>,
    /// Adaptive sampling hit a cap or the budget during this iteration.
    pub truncated: bool,
    /// Total oracle calls after this iteration (pilot included).
    pub cum_work: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Budget,
    GradTol,
    MaxIters,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Budget => "budget",
            Termination::GradTol => "grad_tol",
            Termination::MaxIters => "max_iters",
        })
    }
}

/// Full history of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: EngineConfig,
    pub problem: String,
    /// The sampling constant actually used (pilot-calibrated when the
    /// config left `kappa_as` unset).
    pub resolved_kappa_as: f64,
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    pub total_work: u64,
    pub final_x: Vec<f64>,
}

impl RunTrace {
    /// CSV export of the per-iteration records. Missing optional fields
    /// are emitted as empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "k,delta,rho,success,n_total,cum_work,model_grad_norm,true_grad_norm,f_true,f_est,balance_lhs\n",
        );
        for r in &self.records {
            let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.k,
                r.delta,
                r.rho_hat,
                r.success,
                r.work_this_iter,
                r.cum_work,
                r.model_grad_norm,
                opt(&r.true_grad_norm),
                opt(&r.f_true_center),
                r.f_est_center,
                opt(&r.balance_lhs),
            ));
        }
        out
    }
}

/// `ρ̂ = (F̄_s − F̄_0)/(M_s − M_0)`.
///
/// A degenerate denominator (stationary model) returns `-inf`, which the
/// trust-region test treats as an unsuccessful iteration.
pub fn success_ratio(fbar_s: f64, fbar_0: f64, m_s: f64, m_0: f64) -> f64 {
    let denom = m_s - m_0;
    if denom.abs() <= 1e-14 * (1.0 + m_0.abs()) {
        return f64::NEG_INFINITY;
    }
    (fbar_s - fbar_0) / denom
}

/// Trust-region management: accept and expand when the success ratio
/// clears `eta` and the model gradient is large relative to the radius;
/// otherwise reject and shrink.
pub fn tr_update(
    rho: f64,
    model_grad_norm: f64,
    delta: f64,
    cfg: &EngineConfig,
) -> (bool, f64) {
    debug_assert!(delta > 0.0);
    if rho > cfg.eta && model_grad_norm / delta >= 1.0 / cfg.mu {
        (true, (cfg.gamma1 * delta).min(cfg.delta_max))
    } else {
        (false, cfg.gamma2 * delta)
    }
}

/// Oracle wrapper that counts every call, so traces can certify that no
/// call goes unbilled.
struct CountingOracle<'a> {
    inner: &'a dyn StochasticOracle,
    calls: AtomicU64,
}

impl<'a> CountingOracle<'a> {
    fn new(inner: &'a dyn StochasticOracle) -> Self {
        CountingOracle { inner, calls: AtomicU64::new(0) }
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl StochasticOracle for CountingOracle<'_> {
    fn spec(&self) -> &crate::oracle::ProblemSpec {
        self.inner.spec()
    }

    fn first_order(&self) -> bool {
        self.inner.first_order()
    }

    fn evaluate(
        &self,
        x: &DVector<f64>,
        stream: &RandomStream,
    ) -> Result<Observation, OracleError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(x, stream)
    }

    fn true_value(&self, x: &DVector<f64>) -> f64 {
        self.inner.true_value(x)
    }

    fn true_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.true_gradient(x)
    }

    fn variance_at(&self, x: &DVector<f64>) -> Option<f64> {
        self.inner.variance_at(x)
    }
}

/// Sample statistics carried across iterations under aggressive stream
/// reuse: the incumbent keeps its draws, which remain valid because the
/// sample streams do not change between iterations.
struct Carry {
    x: DVector<f64>,
    stats: SampleStats,
    n: u64,
}

struct EngineState {
    x: DVector<f64>,
    delta: f64,
    bfgs: DMatrix<f64>,
    /// Gradient estimate at the incumbent of the previous accepted
    /// iteration, for the quasi-Newton update at the next model build.
    prev_grad: Option<(DVector<f64>, DVector<f64>)>, // (x_prev, grad_prev)
    pending_bfgs: bool,
    carry: Option<Carry>,
}

/// Runs the trust-region loop on `oracle` under `cfg`.
///
/// The trace is a pure function of `(problem, cfg)`: identical inputs
/// reproduce identical traces bit for bit.
pub fn run(oracle: &dyn StochasticOracle, cfg: &EngineConfig) -> Result<RunTrace, EngineError> {
    cfg.validate()?;
    if cfg.rule.oracle_order() == 1 && !oracle.first_order() {
        return Err(EngineError::Config(format!(
            "rule {} needs gradient samples but problem '{}' is zeroth-order",
            cfg.rule,
            oracle.spec().name
        )));
    }
    let counting = CountingOracle::new(oracle);
    let root = RandomStream::root(cfg.master_seed).child(cfg.replication);

    // Pilot calibration of kappa_as from 32 objective samples at x0.
    let x0 = oracle.spec().x0_vector();
    let kappa_as = match cfg.kappa_as {
        Some(k) => k,
        None => {
            let pilot_base = root.child(0);
            let mut stats = SampleStats::new();
            for j in 0..32u64 {
                let obs = counting.evaluate(&x0, &pilot_base.child(j))?;
                stats.update(&Observation { value: obs.value, gradient: None });
            }
            stats.mean().abs().max(1e-3) / (cfg.delta0 * cfg.delta0)
        }
    };
    let rule = SamplingRule {
        kind: cfg.rule,
        sigma0: cfg.sigma0,
        kappa_as,
        n_min: cfg.n_min,
        n_cap: cfg.n_cap,
    };
    rule.validate().map_err(|e| EngineError::Config(e.to_string()))?;

    let mut state = EngineState {
        x: x0,
        delta: cfg.delta0,
        bfgs: DMatrix::zeros(oracle.dimension(), oracle.dimension()),
        prev_grad: None,
        pending_bfgs: false,
        carry: None,
    };
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut termination = Termination::MaxIters;

    for k in 0..cfg.max_iters {
        if counting.calls() >= cfg.budget {
            termination = Termination::Budget;
            break;
        }
        let outcome = iterate(&counting, cfg, &rule, &root, k, &mut state)?;
        match outcome {
            IterationOutcome::Completed(record) => {
                let hit_tol = match (cfg.grad_tol, cfg.stop_on_true_gradient) {
                    (Some(tol), true) => record.true_grad_norm.is_some_and(|g| g <= tol),
                    (Some(tol), false) => record.model_grad_norm <= tol,
                    (None, _) => false,
                };
                let exhausted = record.truncated && counting.calls() >= cfg.budget;
                records.push(record);
                if hit_tol {
                    termination = Termination::GradTol;
                    break;
                }
                if exhausted {
                    termination = Termination::Budget;
                    break;
                }
            }
            IterationOutcome::OutOfBudget => {
                termination = Termination::Budget;
                break;
            }
        }
    }

    Ok(RunTrace {
        config: cfg.clone(),
        problem: oracle.spec().name.clone(),
        resolved_kappa_as: kappa_as,
        total_work: counting.calls(),
        final_x: state.x.iter().copied().collect(),
        records,
        termination,
    })
}

enum IterationOutcome {
    Completed(IterationRecord),
    /// The remaining budget could not even cover the minimum sample sizes;
    /// no record is produced.
    OutOfBudget,
}

/// Ids of evaluated points within an iteration: the center is 0, design
/// points follow, and the candidate takes the next id. Under CRN the id
/// does not enter the stream address; under independent streams it does.
fn iterate(
    oracle: &CountingOracle<'_>,
    cfg: &EngineConfig,
    rule: &SamplingRule,
    root: &RandomStream,
    k: u64,
    state: &mut EngineState,
) -> Result<IterationOutcome, EngineError> {
    let lambda_k = inflation(k, &cfg.inflation);
    let phase = if cfg.stream_policy.aggressive_reuse { 1 } else { 1 + k };
    let ctx = StreamContext::new(cfg.stream_policy, root.child(phase));
    let derivative_free = cfg.rule.oracle_order() == 0;
    let grouped = cfg.rule.crn_grouped();
    let work_before = oracle.calls();
    let mut budget_left = Some(cfg.budget.saturating_sub(work_before));

    // ---- MU: estimate at the design and build the local model ----
    let design: Option<DesignSet> = if derivative_free {
        Some(match cfg.model_scheme {
            ModelScheme::Diagonal => coordinate_design(&state.x, state.delta),
            ModelScheme::FullQuadratic => full_quadratic_design(&state.x, state.delta),
        })
    } else {
        None
    };
    let mu_points: Vec<DVector<f64>> = match &design {
        Some(d) => d.all_points().cloned().collect(),
        None => vec![state.x.clone()],
    };
    let candidate_id = mu_points.len() as u64;

    let mut truncated = false;
    let mut n_per_point: Vec<u64>;
    let mut mu_means: Vec<f64>;
    let center_grad: Option<DVector<f64>>;
    let fbar_0_mu: f64;

    // The group sampler persists through CE for the CRN rules so the
    // candidate can join the shared sample size.
    let mut group: Option<GroupSampler<'_>> = if grouped {
        let mut sampler = GroupSampler::new(rule, state.delta, lambda_k, &ctx);
        let carry = state.carry.take();
        for (i, p) in mu_points.iter().enumerate() {
            let seeded = match (&carry, i) {
                (Some(c), 0) if c.x == *p => true,
                _ => false,
            };
            if seeded {
                let c = carry.as_ref().unwrap();
                sampler.push_seeded_point(i as u64, p.clone(), c.stats.clone(), c.n);
            } else {
                sampler.push_point(i as u64, p.clone());
            }
        }
        sampler.run(oracle.as_dyn(), &mut budget_left)?;
        Some(sampler)
    } else {
        None
    };

    match &group {
        Some(sampler) => {
            truncated |= sampler.truncated();
            mu_means = sampler.stats().iter().map(|s| s.mean()).collect();
            center_grad = sampler.stats()[0].grad_mean().cloned();
            n_per_point = sampler.stats().iter().map(|s| s.count()).collect();
        }
        None => {
            // Per-point adaptive sampling with independent streams.
            mu_means = Vec::with_capacity(mu_points.len());
            n_per_point = Vec::with_capacity(mu_points.len() + 1);
            let mut grad = None;
            for (i, p) in mu_points.iter().enumerate() {
                let mut sampler = GroupSampler::new(rule, state.delta, lambda_k, &ctx);
                sampler.push_point(i as u64, p.clone());
                sampler.run(oracle.as_dyn(), &mut budget_left)?;
                let out = sampler.finish();
                truncated |= out.truncated;
                if out.budget_exhausted && out.n_per_point[0] < rule.n_min {
                    return Ok(IterationOutcome::OutOfBudget);
                }
                if i == 0 {
                    grad = out.stats[0].grad_mean().cloned();
                }
                mu_means.push(out.stats[0].mean());
                n_per_point.push(out.n_per_point[0]);
            }
            center_grad = grad;
        }
    }
    if let Some(sampler) = &group {
        if sampler.budget_exhausted() && sampler.stats()[0].count() < rule.n_min {
            return Ok(IterationOutcome::OutOfBudget);
        }
    }
    fbar_0_mu = mu_means[0];

    // Quasi-Newton Hessian refresh for the gradient path: uses the step
    // and gradient change realized by the previous accepted iteration.
    if !derivative_free {
        let grad_now = center_grad
            .clone()
            .expect("first-order oracle returned no gradient samples");
        if state.pending_bfgs {
            if let Some((x_prev, g_prev)) = &state.prev_grad {
                let s = &state.x - x_prev;
                let y = &grad_now - g_prev;
                state.bfgs = bfgs_update(&state.bfgs, &s, &y, cfg.kappa_h);
            }
        }
        state.prev_grad = Some((state.x.clone(), grad_now));
        state.pending_bfgs = false;
    }

    let model: LocalModel = if derivative_free {
        interpolate(design.as_ref().unwrap(), &mu_means, cfg.kappa_h)?
    } else {
        LocalModel {
            c: fbar_0_mu,
            g: center_grad.clone().unwrap(),
            h: state.bfgs.clone(),
        }
    };

    // ---- SM: candidate step inside the trust region ----
    let step = solve(&model, state.delta, cfg.kappa_fcd);
    let x_candidate = &state.x + &step.step;
    let m_0 = model.c;
    let m_s = model.value(&step.step);

    // ---- CE: estimate at the candidate ----
    let fbar_s: f64;
    let fbar_0: f64;
    let candidate_stats: Option<SampleStats>;
    match group.as_mut() {
        Some(sampler) => {
            // The candidate joins the iteration's shared scenario
            // sequence; if its variance estimate raises the group
            // maximum, everyone is extended to the new common size and
            // the incumbent estimate is refreshed at that size.
            sampler.push_point(candidate_id, x_candidate.clone());
            sampler.extend_group(oracle.as_dyn(), &mut budget_left)?;
            truncated |= sampler.truncated();
            let stats = sampler.stats();
            fbar_0 = stats[0].mean();
            fbar_s = stats.last().unwrap().mean();
            candidate_stats = Some(stats.last().unwrap().clone());
            n_per_point = stats.iter().map(|s| s.count()).collect();
        }
        None => {
            let mut sampler = GroupSampler::new(rule, state.delta, lambda_k, &ctx);
            sampler.push_point(candidate_id, x_candidate.clone());
            sampler.run(oracle.as_dyn(), &mut budget_left)?;
            let out = sampler.finish();
            truncated |= out.truncated;
            fbar_0 = fbar_0_mu;
            fbar_s = out.stats[0].mean();
            n_per_point.push(out.n_per_point[0]);
            candidate_stats = Some(out.stats.into_iter().next().unwrap());
        }
    }

    let rho = success_ratio(fbar_s, fbar_0, m_s, m_0);

    // ---- TM: accept/reject and radius update ----
    let (accept, new_delta) = tr_update(rho, model.grad_norm(), state.delta, cfg);

    let f_true_center = oracle.true_value(&state.x);
    let f_true_candidate = oracle.true_value(&x_candidate);
    let true_grad_norm = oracle.true_gradient(&state.x).norm();
    let balance = ((fbar_s - f_true_candidate) - (fbar_0 - f_true_center)).abs();

    let record = IterationRecord {
        k,
        x_center: state.x.iter().copied().collect(),
        delta: state.delta,
        n_per_point,
        work_this_iter: oracle.calls() - work_before,
        rho_hat: rho,
        success: accept,
        model_grad_norm: model.grad_norm(),
        true_grad_norm: Some(true_grad_norm),
        f_est_center: fbar_0,
        f_true_center: Some(f_true_center),
        balance_lhs: Some(balance),
        truncated,
        cum_work: oracle.calls(),
    };

    // Carry retained samples into the next iteration when streams repeat.
    state.carry = if cfg.stream_policy.aggressive_reuse {
        if accept {
            candidate_stats.map(|stats| Carry { n: stats.count(), x: x_candidate.clone(), stats })
        } else if grouped {
            group.map(|sampler| {
                let stats = sampler.stats()[0].clone();
                Carry { n: stats.count(), x: state.x.clone(), stats }
            })
        } else {
            None
        }
    } else {
        None
    };

    if accept {
        state.x = x_candidate;
        state.pending_bfgs = !derivative_free;
    }
    state.delta = new_delta;

    Ok(IterationOutcome::Completed(record))
}

impl<'a> CountingOracle<'a> {
    fn as_dyn(&self) -> &dyn StochasticOracle {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{make_problem, ProblemSpec};
    use approx::assert_relative_eq;

    #[test]
    fn success_ratio_examples() {
        assert_eq!(success_ratio(-1.0, 0.0, -1.0, 0.0), 1.0);
        assert_eq!(success_ratio(0.0, 0.0, -1.0, 0.0), 0.0);
        assert_eq!(success_ratio(1.0, 0.0, 0.0, 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn tr_update_branches() {
        let cfg = EngineConfig::for_rule(RuleKind::C1);
        // eta = 0.1, gamma1 = 1.5, gamma2 = 0.75, mu = 100.
        let (accept, d) = tr_update(0.5, 1.0, 0.1, &cfg);
        assert!(accept);
        assert_relative_eq!(d, 0.15, epsilon = 1e-15);

        let (accept, d) = tr_update(0.5, 0.001, 0.1, &cfg); // criticality fails
        assert!(!accept);
        assert_relative_eq!(d, 0.075, epsilon = 1e-15);

        let (accept, _) = tr_update(f64::NEG_INFINITY, 1.0, 0.1, &cfg);
        assert!(!accept);

        // Expansion is capped at delta_max.
        let (_, d) = tr_update(0.9, 1e6, 900.0, &cfg);
        assert_relative_eq!(d, 1e3, epsilon = 1e-12);
    }

    fn quad_cfg(rule: RuleKind, seed: u64) -> EngineConfig {
        let mut cfg = EngineConfig::for_rule(rule);
        cfg.master_seed = seed;
        cfg.kappa_as = Some(1.0);
        cfg.budget = 200_000;
        cfg.max_iters = 400;
        cfg
    }

    #[test]
    fn first_iteration_on_noiseless_quadratic_succeeds() {
        // Hand-simulated: B0 = 0 so the model is linear with g = x0 =
        // (1, 0); the step reaches the boundary at (-1, 0), the candidate
        // is the origin, the predicted decrease is 1 and the realized
        // decrease is 0.5, so rho = 0.5 > eta and the iteration succeeds.
        let mut spec = ProblemSpec::with_dimension("quad-smooth", 2).unwrap();
        spec.noise_scale = 0.0;
        spec.x0 = vec![1.0, 0.0];
        let p = make_problem(spec).unwrap();
        let mut cfg = quad_cfg(RuleKind::C1, 5);
        cfg.max_iters = 1;
        let trace = run(p.as_ref(), &cfg).unwrap();
        let r = &trace.records[0];
        assert!(r.success);
        assert_relative_eq!(r.rho_hat, 0.5, epsilon = 1e-12);
        assert_eq!(trace.final_x, vec![0.0, 0.0]);
        assert!(p.true_value(&DVector::from_vec(trace.final_x.clone())) < 0.5);
    }

    #[test]
    fn traces_are_bit_identical_across_reruns() {
        let p = make_problem(ProblemSpec::with_dimension("quad-smooth", 3).unwrap()).unwrap();
        let mut cfg = quad_cfg(RuleKind::B1, 17);
        cfg.max_iters = 60;
        let t1 = run(p.as_ref(), &cfg).unwrap();
        let t2 = run(p.as_ref(), &cfg).unwrap();
        assert_eq!(t1.records, t2.records);
        assert_eq!(t1.total_work, t2.total_work);
        assert_eq!(t1.final_x, t2.final_x);
    }

    #[test]
    fn radius_updates_follow_the_dichotomy() {
        let p = make_problem(ProblemSpec::with_dimension("quad-smooth", 2).unwrap()).unwrap();
        let mut cfg = quad_cfg(RuleKind::B0, 23);
        cfg.max_iters = 120;
        let trace = run(p.as_ref(), &cfg).unwrap();
        assert!(trace.records.len() > 10);
        for w in trace.records.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let expect = if a.success {
                (cfg.gamma1 * a.delta).min(cfg.delta_max)
            } else {
                cfg.gamma2 * a.delta
            };
            assert_eq!(b.delta, expect, "iteration {}", a.k);
        }
    }

    #[test]
    fn successful_iterations_decrease_the_estimate() {
        let p = make_problem(ProblemSpec::with_dimension("quad-smooth", 2).unwrap()).unwrap();
        let mut cfg = quad_cfg(RuleKind::A0, 29);
        cfg.max_iters = 80;
        let trace = run(p.as_ref(), &cfg).unwrap();
        let successes = trace.records.iter().filter(|r| r.success).count();
        assert!(successes > 0, "no successful iterations to check");
        for r in trace.records.iter().filter(|r| r.success) {
            assert!(r.rho_hat > cfg.eta);
        }
    }

    #[test]
    fn work_accounting_is_exact() {
        let p = make_problem(ProblemSpec::with_dimension("quad-smooth", 2).unwrap()).unwrap();
        let mut cfg = quad_cfg(RuleKind::C0, 31);
        cfg.kappa_as = None; // exercise the pilot
        cfg.max_iters = 40;
        let trace = run(p.as_ref(), &cfg).unwrap();
        let per_iter: u64 = trace.records.iter().map(|r| r.work_this_iter).sum();
        assert_eq!(per_iter + 32, trace.total_work); // pilot = 32 calls
        assert_eq!(trace.records.last().unwrap().cum_work, trace.total_work);
        let mut prev = 0;
        for r in &trace.records {
            assert!(r.cum_work > prev);
            prev = r.cum_work;
        }
        // n_per_point sums to the iteration work for grouped rules.
        for r in &trace.records {
            assert_eq!(r.n_per_point.iter().sum::<u64>(), r.work_this_iter);
        }
    }

    #[test]
    fn crn_cancels_additive_noise_in_the_numerator() {
        let mut spec = ProblemSpec::with_dimension("quad-smooth", 2).unwrap();
        spec.parameters.insert("lin_scale".into(), 0.0);
        spec.noise_scale = 1.0;
        let p = make_problem(spec).unwrap();
        let mut cfg = quad_cfg(RuleKind::C1, 37);
        cfg.max_iters = 200;
        cfg.budget = 10_000_000;
        let trace = run(p.as_ref(), &cfg).unwrap();
        assert_eq!(trace.records.len(), 200);
        for r in &trace.records {
            assert!(
                r.balance_lhs.unwrap() <= 1e-10,
                "iteration {}: balance {}",
                r.k,
                r.balance_lhs.unwrap()
            );
        }
    }

    #[test]
    fn crn_run_matches_noiseless_run_on_additive_noise() {
        let mut noisy = ProblemSpec::with_dimension("quad-smooth", 2).unwrap();
        noisy.parameters.insert("lin_scale".into(), 0.0);
        noisy.noise_scale = 0.8;
        let mut clean = noisy.clone();
        clean.noise_scale = 0.0;
        let cfg = {
            let mut c = quad_cfg(RuleKind::B0, 41);
            c.max_iters = 50;
            c
        };
        let tn = run(make_problem(noisy).unwrap().as_ref(), &cfg).unwrap();
        let tc = run(make_problem(clean).unwrap().as_ref(), &cfg).unwrap();
        assert_eq!(tn.records.len(), tc.records.len());
        for (a, b) in tn.records.iter().zip(&tc.records) {
            assert_eq!(a.success, b.success, "iteration {}", a.k);
            for (xa, xb) in a.x_center.iter().zip(&b.x_center) {
                assert!((xa - xb).abs() <= 1e-9);
            }
        }
    }

    /// Linear objective with no noise, implemented directly against the
    /// oracle trait: the interpolated model has gradient (1, 0) at every
    /// center, so iterations succeed until the radius cap takes over.
    struct LinearProblem {
        spec: ProblemSpec,
    }

    impl StochasticOracle for LinearProblem {
        fn spec(&self) -> &ProblemSpec {
            &self.spec
        }
        fn first_order(&self) -> bool {
            false
        }
        fn evaluate(
            &self,
            x: &DVector<f64>,
            _stream: &RandomStream,
        ) -> Result<Observation, OracleError> {
            Ok(Observation { value: x[0], gradient: None })
        }
        fn true_value(&self, x: &DVector<f64>) -> f64 {
            x[0]
        }
        fn true_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            let mut g = DVector::zeros(x.len());
            g[0] = 1.0;
            g
        }
        fn variance_at(&self, _x: &DVector<f64>) -> Option<f64> {
            Some(0.0)
        }
    }

    #[test]
    fn noiseless_linear_objective_keeps_succeeding() {
        let mut spec = ProblemSpec::with_dimension("quad-smooth", 2).unwrap();
        spec.name = "linear-test".into();
        let p = LinearProblem { spec };
        let mut cfg = quad_cfg(RuleKind::B0, 43);
        cfg.max_iters = 40;
        cfg.delta_max = 100.0;
        let trace = run(&p, &cfg).unwrap();
        for r in &trace.records {
            assert!(r.success, "iteration {} failed on a linear objective", r.k);
            assert_relative_eq!(r.model_grad_norm, 1.0, epsilon = 1e-9);
        }
        // Radius is capped at delta_max.
        assert!(trace.records.iter().all(|r| r.delta <= 100.0));
        assert!(trace.records.last().unwrap().delta == 100.0);
    }

    #[test]
    fn budget_exhaustion_terminates_with_reason() {
        let p = make_problem(ProblemSpec::with_dimension("quad-smooth", 2).unwrap()).unwrap();
        let mut cfg = quad_cfg(RuleKind::A0, 47);
        cfg.budget = 500;
        let trace = run(p.as_ref(), &cfg).unwrap();
        assert_eq!(trace.termination, Termination::Budget);
        assert!(trace.total_work <= 500 + 32);
    }

    #[test]
    fn grad_tol_stops_early_and_is_recorded() {
        let mut spec = ProblemSpec::with_dimension("quad-smooth", 2).unwrap();
        spec.noise_scale = 0.0;
        let p = make_problem(spec).unwrap();
        let mut cfg = quad_cfg(RuleKind::C1, 53);
        cfg.grad_tol = Some(1e-3);
        cfg.max_iters = 10_000;
        let trace = run(p.as_ref(), &cfg).unwrap();
        assert_eq!(trace.termination, Termination::GradTol);
        let last = trace.records.last().unwrap();
        assert!(last.true_grad_norm.unwrap() <= 1e-3);
        // Earlier records must all be above the tolerance.
        for r in &trace.records[..trace.records.len() - 1] {
            assert!(r.true_grad_norm.unwrap() > 1e-3);
        }
    }

    #[test]
    fn delta_squared_partial_sums_flatten() {
        let p = make_problem(ProblemSpec::with_dimension("quad-smooth", 2).unwrap()).unwrap();
        let mut cfg = quad_cfg(RuleKind::C1, 59);
        cfg.max_iters = 10_000;
        cfg.budget = 10_000_000;
        let trace = run(p.as_ref(), &cfg).unwrap();
        assert!(trace.records.len() == 10_000);
        let sums: Vec<f64> = trace
            .records
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r.delta * r.delta;
                Some(*acc)
            })
            .collect();
        let total = *sums.last().unwrap();
        let at_90 = sums[(sums.len() as f64 * 0.9) as usize - 1];
        assert!(
            (total - at_90) / total < 0.01,
            "last 10% of iterations added {:.3}% of the radius mass",
            100.0 * (total - at_90) / total
        );
    }

    #[test]
    fn mismatched_rule_order_is_rejected() {
        let p = make_problem(ProblemSpec::preset("bm-field").unwrap()).unwrap();
        let cfg = quad_cfg(RuleKind::A1, 61);
        assert!(matches!(run(p.as_ref(), &cfg), Err(EngineError::Config(_))));
    }

    #[test]
    fn csv_export_has_pinned_header_and_empty_optionals() {
        let p = make_problem(ProblemSpec::with_dimension("quad-smooth", 2).unwrap()).unwrap();
        let mut cfg = quad_cfg(RuleKind::C1, 67);
        cfg.max_iters = 3;
        let mut trace = run(p.as_ref(), &cfg).unwrap();
        trace.records[1].true_grad_norm = None;
        trace.records[1].balance_lhs = None;
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,delta,rho,success,n_total,cum_work,model_grad_norm,true_grad_norm,f_true,f_est,balance_lhs"
        );
        let row1: Vec<&str> = lines.nth(1).unwrap().split(',').collect();
        assert_eq!(row1.len(), 11);
        assert_eq!(row1[7], "");
        assert_eq!(row1[10], "");
    }

    #[test]
    fn aggressive_reuse_retains_and_extends_incumbent_samples() {
        let mut spec = ProblemSpec::with_dimension("quad-smooth", 2).unwrap();
        spec.noise_scale = 1.0;
        let p = make_problem(spec).unwrap();
        let mut cfg = quad_cfg(RuleKind::C1, 71);
        cfg.stream_policy.aggressive_reuse = true;
        cfg.max_iters = 30;
        let reuse = run(p.as_ref(), &cfg).unwrap();
        cfg.stream_policy.aggressive_reuse = false;
        let fresh = run(p.as_ref(), &cfg).unwrap();
        // Same iteration count, strictly less sampling work under reuse.
        assert_eq!(reuse.records.len(), fresh.records.len());
        assert!(
            reuse.total_work < fresh.total_work,
            "reuse {} !< fresh {}",
            reuse.total_work,
            fresh.total_work
        );
        // Determinism still holds.
        cfg.stream_policy.aggressive_reuse = true;
        let reuse2 = run(p.as_ref(), &cfg).unwrap();
        assert_eq!(reuse.records, reuse2.records);
    }

    #[test]
    fn invalid_configs_are_named() {
        let mut cfg = EngineConfig::for_rule(RuleKind::C1);
        cfg.gamma2 = 1.2;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("gamma2 must be in (0,1)"));
    }
}
