//! Streaming sample statistics and the adaptive sample-size rules.
//!
//! Six stopping rules decide how many oracle calls each evaluated point
//! receives in one iteration. They share one template: keep sampling until
//!
//! ```text
//! (sigma0 ∨ sigma_hat) / sqrt(n)  <=  kappa_as · delta^p / sqrt(lambda_k)
//! ```
//!
//! and differ in the radius power `p`, in which standard-deviation
//! estimate feeds `sigma_hat`, and in whether the points of an iteration
//! share one sample size:
//!
//! | rule | oracle order | p   | sigma_hat            | shared n |
//! |------|--------------|-----|----------------------|----------|
//! | A0   | zeroth       | 2   | value, per point     | no       |
//! | B0   | zeroth       | 3/2 | max value over group | yes      |
//! | C0   | zeroth       | 1   | max value over group | yes      |
//! | A1   | first        | 2   | value ∨ gradient     | no       |
//! | B1   | first        | 1   | max gradient (0, s)  | yes      |
//! | C1   | first        | 0   | none (sigma0 only)   | yes      |
//!
//! The grouped rules are the CRN rules: all of an iteration's points are
//! sampled together under identical stream sequences, and the group stops
//! on the maximum standard-deviation estimate. C1 has the closed form
//! `n = ceil(sigma0² · lambda_k / kappa_as²)`, independent of the data.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{Observation, OracleError, StochasticOracle};
use crate::stream::{RandomStream, StreamMode, StreamPolicy};

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("sampling rule is invalid: {0}")]
    Invalid(String),
}

/// The six adaptive sampling rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleKind {
    A0,
    B0,
    C0,
    A1,
    B1,
    C1,
}

/// Which standard-deviation estimate drives the stopping test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaSource {
    Value,
    Gradient,
    ValueOrGradient,
    /// No feedback; the sample size is fixed by `sigma0` alone.
    None,
}

impl RuleKind {
    pub const ALL: [RuleKind; 6] =
        [RuleKind::A0, RuleKind::B0, RuleKind::C0, RuleKind::A1, RuleKind::B1, RuleKind::C1];

    /// Power of the trust-region radius in the stopping threshold.
    pub fn delta_exponent(self) -> f64 {
        match self {
            RuleKind::A0 | RuleKind::A1 => 2.0,
            RuleKind::B0 => 1.5,
            RuleKind::C0 | RuleKind::B1 => 1.0,
            RuleKind::C1 => 0.0,
        }
    }

    /// 0 for the derivative-free rules, 1 for the gradient rules.
    pub fn oracle_order(self) -> u8 {
        match self {
            RuleKind::A0 | RuleKind::B0 | RuleKind::C0 => 0,
            _ => 1,
        }
    }

    /// Whether the iteration's points share one sample size (CRN rules).
    pub fn crn_grouped(self) -> bool {
        !matches!(self, RuleKind::A0 | RuleKind::A1)
    }

    /// Stream policy matching the rule's analysis setting.
    pub fn natural_stream_mode(self) -> StreamMode {
        if self.crn_grouped() {
            StreamMode::Crn
        } else {
            StreamMode::Independent
        }
    }

    pub fn sigma_source(self) -> SigmaSource {
        match self {
            RuleKind::A0 | RuleKind::B0 | RuleKind::C0 => SigmaSource::Value,
            RuleKind::A1 => SigmaSource::ValueOrGradient,
            RuleKind::B1 => SigmaSource::Gradient,
            RuleKind::C1 => SigmaSource::None,
        }
    }

    pub fn parse(s: &str) -> Result<Self, RuleError> {
        match s.trim().to_ascii_uppercase().replace('-', "").as_str() {
            "A0" => Ok(RuleKind::A0),
            "B0" => Ok(RuleKind::B0),
            "C0" => Ok(RuleKind::C0),
            "A1" => Ok(RuleKind::A1),
            "B1" => Ok(RuleKind::B1),
            "C1" => Ok(RuleKind::C1),
            other => Err(RuleError::Invalid(format!(
                "unknown rule '{other}'; expected one of A0, B0, C0, A1, B1, C1"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::A0 => "A0",
            RuleKind::B0 => "B0",
            RuleKind::C0 => "C0",
            RuleKind::A1 => "A1",
            RuleKind::B1 => "B1",
            RuleKind::C1 => "C1",
        }
    }
}

impl std::fmt::Display for RuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully parameterized sampling rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRule {
    pub kind: RuleKind,
    /// Floor for the standard-deviation estimate; must be positive.
    pub sigma0: f64,
    /// Scale between statistical error and the radius power.
    pub kappa_as: f64,
    /// Smallest sample size ever returned (variance needs two samples).
    pub n_min: u64,
    /// Hard cap; hitting it flags the result as truncated.
    pub n_cap: u64,
}

impl SamplingRule {
    pub fn new(kind: RuleKind, sigma0: f64, kappa_as: f64) -> Result<Self, RuleError> {
        let rule = SamplingRule { kind, sigma0, kappa_as, n_min: 2, n_cap: 1_000_000 };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        if !(self.sigma0 > 0.0) {
            return Err(RuleError::Invalid("sigma0 must be > 0".into()));
        }
        if !(self.kappa_as > 0.0) {
            return Err(RuleError::Invalid("kappa_as must be > 0".into()));
        }
        if self.n_min < 2 {
            return Err(RuleError::Invalid("n_min must be >= 2".into()));
        }
        if self.n_cap < self.n_min {
            return Err(RuleError::Invalid("n_cap must be >= n_min".into()));
        }
        Ok(())
    }

    /// The deterministic sample size of the C1 rule.
    pub fn fixed_sample_size(&self, lambda_k: f64) -> u64 {
        let raw = (self.sigma0 * self.sigma0 * lambda_k / (self.kappa_as * self.kappa_as)).ceil();
        (raw as u64).max(self.n_min)
    }
}

/// Inflation sequence `lambda_k = lambda0 · (ln max(k,2))^(1+eps_lambda)`.
///
/// The clamp at k = 2 keeps the factor positive and constant over the
/// first iterations, where the raw formula would degenerate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflationSchedule {
    pub lambda0: f64,
    pub eps_lambda: f64,
}

impl Default for InflationSchedule {
    fn default() -> Self {
        InflationSchedule { lambda0: 2.0, eps_lambda: 0.5 }
    }
}

impl InflationSchedule {
    pub fn validate(&self) -> Result<(), RuleError> {
        if !(self.lambda0 >= 2.0) {
            return Err(RuleError::Invalid("lambda0 must be >= 2".into()));
        }
        if !(self.eps_lambda > 0.0 && self.eps_lambda < 1.0) {
            return Err(RuleError::Invalid("eps_lambda must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `lambda_k` under the schedule.
pub fn inflation(k: u64, sched: &InflationSchedule) -> f64 {
    let base = (k.max(2) as f64).ln();
    sched.lambda0 * base.powf(1.0 + sched.eps_lambda)
}

/// Whether `n` samples satisfy the rule's stopping inequality.
///
/// `sigma_hat` is whatever estimate the rule prescribes (already maximized
/// over the group for CRN rules); C1 ignores it.
pub fn stop_condition(rule: &SamplingRule, n: u64, sigma_hat: f64, delta: f64, lambda_k: f64) -> bool {
    debug_assert!(n >= 1 && delta > 0.0 && lambda_k > 0.0);
    let sigma = match rule.kind.sigma_source() {
        SigmaSource::None => rule.sigma0,
        _ => rule.sigma0.max(sigma_hat),
    };
    sigma / (n as f64).sqrt()
        <= rule.kappa_as * delta.powf(rule.kind.delta_exponent()) / lambda_k.sqrt()
}

/// Streaming count/mean/variance accumulator for scalar observations and,
/// when present, gradient samples (covariance trace).
///
/// Variances use divisor `n`, not `n − 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleStats {
    n: u64,
    mean: f64,
    m2: f64,
    grad_mean: Option<DVector<f64>>,
    grad_m2_trace: Option<f64>,
}

impl SampleStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Welford single-pass update with one observation.
    pub fn update(&mut self, obs: &Observation) {
        self.n += 1;
        let delta = obs.value - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (obs.value - self.mean);
        match (&mut self.grad_mean, &obs.gradient) {
            (Some(gm), Some(g)) => {
                let before = g - &*gm;
                *gm += &before / self.n as f64;
                let after = g - &*gm;
                *self.grad_m2_trace.as_mut().unwrap() += before.dot(&after);
            }
            (None, Some(g)) => {
                assert!(self.n == 1, "gradient appeared after scalar-only updates");
                self.grad_mean = Some(g.clone());
                self.grad_m2_trace = Some(0.0);
            }
            (None, None) => {}
            (Some(_), None) => panic!("gradient missing after gradient updates"),
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `m2 / n`; zero before any data.
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().max(0.0).sqrt()
    }

    pub fn grad_mean(&self) -> Option<&DVector<f64>> {
        self.grad_mean.as_ref()
    }

    /// Trace of the sample covariance of the gradient (divisor `n`).
    pub fn grad_variance(&self) -> f64 {
        match self.grad_m2_trace {
            Some(t) if self.n > 0 => t / self.n as f64,
            _ => 0.0,
        }
    }

    pub fn grad_std(&self) -> f64 {
        self.grad_variance().max(0.0).sqrt()
    }

    fn sigma_for(&self, source: SigmaSource) -> f64 {
        match source {
            SigmaSource::Value => self.std(),
            SigmaSource::Gradient => self.grad_std(),
            SigmaSource::ValueOrGradient => self.std().max(self.grad_std()),
            SigmaSource::None => 0.0,
        }
    }
}

/// Assigns a stream to every `(point, sample)` slot of one iteration.
///
/// Under CRN the point identity is ignored, so every point sees the same
/// ordered scenario sequence; otherwise each point gets its own branch.
#[derive(Clone, Debug)]
pub struct StreamContext {
    policy: StreamPolicy,
    base: RandomStream,
}

impl StreamContext {
    pub fn new(policy: StreamPolicy, base: RandomStream) -> Self {
        StreamContext { policy, base }
    }

    pub fn policy(&self) -> StreamPolicy {
        self.policy
    }

    pub fn stream_for(&self, point_id: u64, sample_index: u64) -> RandomStream {
        match self.policy.mode {
            StreamMode::Crn => self.base.child(sample_index),
            StreamMode::Independent => self.base.child(point_id).child(sample_index),
        }
    }
}

/// One stopping-test evaluation, kept for the minimality diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct StopCheck {
    pub n: u64,
    pub sigma_hat: f64,
    pub stopped: bool,
}

/// Result of adaptively sampling a group of points.
#[derive(Clone, Debug)]
pub struct AdaptiveSample {
    pub stats: Vec<SampleStats>,
    pub n_per_point: Vec<u64>,
    /// Total oracle calls made by this sampling pass.
    pub total_work: u64,
    /// Sample growth hit `n_cap` (or the external draw budget) before the
    /// stopping rule was satisfied.
    pub truncated: bool,
    /// The external draw budget ran out mid-pass.
    pub budget_exhausted: bool,
    pub checks: Vec<StopCheck>,
}

/// Sequential sampler for one iteration's point group.
///
/// Growth is one sample at a time up to 100, then geometric ×1.1 batches,
/// so the returned size overshoots the minimal size by at most 10%; every
/// stopping test is recorded. Points may start pre-seeded (stream reuse
/// across iterations), in which case newcomers first catch up to the
/// common sample count under the shared scenario sequence.
pub struct GroupSampler<'a> {
    rule: &'a SamplingRule,
    delta: f64,
    lambda_k: f64,
    ctx: &'a StreamContext,
    ids: Vec<u64>,
    points: Vec<DVector<f64>>,
    stats: Vec<SampleStats>,
    counts: Vec<u64>,
    work: u64,
    truncated: bool,
    budget_exhausted: bool,
    checks: Vec<StopCheck>,
}

impl<'a> GroupSampler<'a> {
    pub fn new(
        rule: &'a SamplingRule,
        delta: f64,
        lambda_k: f64,
        ctx: &'a StreamContext,
    ) -> Self {
        GroupSampler {
            rule,
            delta,
            lambda_k,
            ctx,
            ids: Vec::new(),
            points: Vec::new(),
            stats: Vec::new(),
            counts: Vec::new(),
            work: 0,
            truncated: false,
            budget_exhausted: false,
            checks: Vec::new(),
        }
    }

    /// Adds a point with no prior samples.
    pub fn push_point(&mut self, id: u64, x: DVector<f64>) {
        self.ids.push(id);
        self.points.push(x);
        self.stats.push(SampleStats::new());
        self.counts.push(0);
    }

    /// Adds a point that already carries `n` samples drawn under this
    /// context's streams 0..n (aggressive stream reuse).
    pub fn push_seeded_point(&mut self, id: u64, x: DVector<f64>, stats: SampleStats, n: u64) {
        debug_assert_eq!(stats.count(), n);
        self.ids.push(id);
        self.points.push(x);
        self.stats.push(stats);
        self.counts.push(n);
    }

    fn group_n(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    fn group_sigma(&self) -> f64 {
        let source = self.rule.kind.sigma_source();
        self.stats.iter().map(|s| s.sigma_for(source)).fold(0.0, f64::max)
    }

    /// Brings every point up to `target` samples. Returns false when the
    /// draw budget is exhausted before reaching it.
    fn extend_to(
        &mut self,
        target: u64,
        oracle: &dyn StochasticOracle,
        budget: &mut Option<u64>,
    ) -> Result<bool, OracleError> {
        // Affordable target under the remaining budget, keeping counts even.
        let mut goal = target;
        if let Some(rem) = budget {
            let needed: u64 = self.counts.iter().map(|&c| target.saturating_sub(c)).sum();
            if needed > *rem {
                // Largest even goal we can afford.
                let mut lo = self.counts.iter().copied().min().unwrap_or(0);
                let hi = target;
                let cost = |g: u64, counts: &[u64]| -> u64 {
                    counts.iter().map(|&c| g.saturating_sub(c)).sum()
                };
                let mut best = lo;
                let mut hi_b = hi;
                while lo <= hi_b {
                    let mid = lo + (hi_b - lo) / 2;
                    if cost(mid, &self.counts) <= *rem {
                        best = mid;
                        lo = mid + 1;
                    } else {
                        if mid == 0 {
                            break;
                        }
                        hi_b = mid - 1;
                    }
                }
                goal = best;
                self.budget_exhausted = true;
                self.truncated = true;
            }
        }
        for p in 0..self.points.len() {
            while self.counts[p] < goal {
                let stream = self.ctx.stream_for(self.ids[p], self.counts[p]);
                let obs = oracle.evaluate(&self.points[p], &stream)?;
                let obs = if self.rule.kind.oracle_order() == 0 {
                    Observation { value: obs.value, gradient: None }
                } else {
                    obs
                };
                self.stats[p].update(&obs);
                self.counts[p] += 1;
                self.work += 1;
                if let Some(rem) = budget {
                    *rem -= 1;
                }
            }
        }
        Ok(goal == target)
    }

    fn next_check(&self, n: u64) -> u64 {
        if n < 100 {
            n + 1
        } else {
            ((n as f64 * 1.1).ceil() as u64).max(n + 1)
        }
    }

    /// Samples until the stopping rule holds (or a cap/budget interferes).
    pub fn run(
        &mut self,
        oracle: &dyn StochasticOracle,
        budget: &mut Option<u64>,
    ) -> Result<(), OracleError> {
        assert!(!self.points.is_empty(), "sampler needs at least one point");
        if self.ctx.policy.mode == StreamMode::Independent {
            assert_eq!(
                self.points.len(),
                1,
                "independent mode samples exactly one point per call"
            );
        }
        if self.rule.kind.sigma_source() == SigmaSource::None {
            // Closed form: no variance feedback. Still extend to at least
            // the current group count so pre-seeded points stay even.
            let target = self.rule.fixed_sample_size(self.lambda_k).max(self.group_n());
            let reached = self.extend_to(target, oracle, budget)?;
            let n = self.group_n();
            self.checks.push(StopCheck { n, sigma_hat: 0.0, stopped: reached });
            return Ok(());
        }
        // Catch newcomers up to any pre-seeded count, then to n_min.
        let mut n = self.group_n().max(self.rule.n_min);
        loop {
            if !self.extend_to(n, oracle, budget)? {
                return Ok(());
            }
            let sigma = self.group_sigma();
            let stopped = stop_condition(self.rule, n, sigma, self.delta, self.lambda_k);
            self.checks.push(StopCheck { n, sigma_hat: sigma, stopped });
            if stopped {
                return Ok(());
            }
            if n >= self.rule.n_cap {
                self.truncated = true;
                return Ok(());
            }
            n = self.next_check(n).min(self.rule.n_cap);
        }
    }

    /// Re-runs the stopping loop after new points joined an already
    /// stopped group: newcomers catch up to the common count under the
    /// shared streams, and if they raise the group estimate the whole
    /// group is extended to a new common size.
    pub fn extend_group(
        &mut self,
        oracle: &dyn StochasticOracle,
        budget: &mut Option<u64>,
    ) -> Result<(), OracleError> {
        self.run(oracle, budget)
    }

    pub fn work(&self) -> u64 {
        self.work
    }

    pub fn stats(&self) -> &[SampleStats] {
        &self.stats
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn budget_exhausted(&self) -> bool {
        self.budget_exhausted
    }

    pub fn finish(self) -> AdaptiveSample {
        AdaptiveSample {
            n_per_point: self.counts,
            stats: self.stats,
            total_work: self.work,
            truncated: self.truncated,
            budget_exhausted: self.budget_exhausted,
            checks: self.checks,
        }
    }
}

/// Adaptively samples `points` (ids 0, 1, …) and returns the per-point
/// statistics plus total work. Under an independent-streams context this
/// is one point per call; under CRN the whole group shares one sample
/// size driven by the maximum standard-deviation estimate.
pub fn sample_adaptively(
    points: &[DVector<f64>],
    rule: &SamplingRule,
    delta: f64,
    lambda_k: f64,
    ctx: &StreamContext,
    oracle: &dyn StochasticOracle,
) -> Result<AdaptiveSample, OracleError> {
    let mut sampler = GroupSampler::new(rule, delta, lambda_k, ctx);
    for (i, x) in points.iter().enumerate() {
        sampler.push_point(i as u64, x.clone());
    }
    let mut budget = None;
    sampler.run(oracle, &mut budget)?;
    Ok(sampler.finish())
}
