//! Job-indexed trajectory generation for the lag policy.
//!
//! With room for one waiting job behind the one in service, the next job is
//! called `lag` after the waiting job enters service, so its wait is
//! `max(S_prev − lag − D, 0)` and the time since the previous arrival is
//! `W_prev + lag + D`. That recursion is exact for this topology; no event
//! calendar is needed.

use std::fmt;

use crate::distributions::DistributionSpec;
use crate::error::{Error, Result};
use crate::reward::RewardFn;
use crate::rng::{substream, Purpose, SimRng};
use crate::scalar::{pos, Real};
use crate::stats::{Estimate, RatioAccumulator};

/// Jobs dropped from stationary estimates by default.
pub const DEFAULT_BURN_IN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServerState {
    Idle,
    Busy,
}

impl ServerState {
    pub fn as_str(&self) -> &'static str {
        match self {
            ServerState::Idle => "idle",
            ServerState::Busy => "busy",
        }
    }
}

impl fmt::Display for ServerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JobRecord<T> {
    /// 1-based.
    pub index: usize,
    pub service: T,
    pub delay: T,
    pub wait: T,
    pub sojourn: T,
    /// Time since the previous arrival; for job 1, time since the first call.
    pub iat: T,
    /// Lag in force when this job was called.
    pub lag: T,
    pub arrival: T,
    pub state: ServerState,
}

/// State observed by an arriving job: busy iff it has to wait.
pub fn server_state_at_arrival<T: Real>(job: &JobRecord<T>) -> ServerState {
    state_for_wait(job.wait)
}

pub(crate) fn state_for_wait<T: Real>(wait: T) -> ServerState {
    if wait > T::zero() {
        ServerState::Busy
    } else {
        ServerState::Idle
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment<T> {
    pub jobs: usize,
    pub service_mean: T,
    pub delay_mean: T,
}

/// Per-job mean service and delay times.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSchedule<T> {
    Stationary {
        service_mean: T,
        delay_mean: T,
    },
    /// Linear ramp across the first `over` jobs, constant afterwards.
    GradualLinear {
        service: (T, T),
        delay: (T, T),
        over: usize,
    },
    AbruptPiecewise(Vec<Segment<T>>),
}

impl<T: Real> ParamSchedule<T> {
    /// Stationary schedule at the laws' own means.
    pub fn stationary_of(service: &DistributionSpec<T>, delay: &DistributionSpec<T>) -> Self {
        ParamSchedule::Stationary {
            service_mean: service.mean(),
            delay_mean: delay.mean(),
        }
    }

    pub fn is_stationary(&self) -> bool {
        matches!(self, ParamSchedule::Stationary { .. })
    }

    /// Checks the schedule covers `n` jobs with positive means.
    pub fn validate(&self, n: usize) -> Result<()> {
        let positive = |x: T| x.is_finite() && x > T::zero();
        match self {
            ParamSchedule::Stationary { service_mean, delay_mean } => {
                if !(positive(*service_mean) && positive(*delay_mean)) {
                    return Err(Error::InvalidSchedule("means must be positive".into()));
                }
            }
            ParamSchedule::GradualLinear { service, delay, over } => {
                if ![service.0, service.1, delay.0, delay.1].into_iter().all(positive) {
                    return Err(Error::InvalidSchedule("means must be positive".into()));
                }
                if *over == 0 {
                    return Err(Error::InvalidSchedule("ramp length must be positive".into()));
                }
            }
            ParamSchedule::AbruptPiecewise(segments) => {
                if segments
                    .iter()
                    .any(|s| s.jobs == 0 || !positive(s.service_mean) || !positive(s.delay_mean))
                {
                    return Err(Error::InvalidSchedule(
                        "segments need positive lengths and means".into(),
                    ));
                }
                let total: usize = segments.iter().map(|s| s.jobs).sum();
                if total < n {
                    return Err(Error::InvalidSchedule(format!(
                        "segments cover {total} jobs, run needs {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(service mean, delay mean)` for the 0-based job position `j`.
    pub fn means_at(&self, j: usize) -> Result<(T, T)> {
        match self {
            ParamSchedule::Stationary { service_mean, delay_mean } => Ok((*service_mean, *delay_mean)),
            ParamSchedule::GradualLinear { service, delay, over } => {
                let frac = if *over <= 1 {
                    T::one()
                } else {
                    T::lit((j.min(over - 1)) as f64 / (over - 1) as f64)
                };
                Ok((
                    service.0 + (service.1 - service.0) * frac,
                    delay.0 + (delay.1 - delay.0) * frac,
                ))
            }
            ParamSchedule::AbruptPiecewise(segments) => {
                let mut start = 0;
                for s in segments {
                    if j < start + s.jobs {
                        return Ok((s.service_mean, s.delay_mean));
                    }
                    start += s.jobs;
                }
                Err(Error::InvalidSchedule(format!("no segment covers job {}", j + 1)))
            }
        }
    }

    /// 0-based index of the segment containing job position `j` (always 0
    /// for non-piecewise schedules).
    pub fn segment_of(&self, j: usize) -> usize {
        match self {
            ParamSchedule::AbruptPiecewise(segments) => {
                let mut start = 0;
                for (i, s) in segments.iter().enumerate() {
                    if j < start + s.jobs {
                        return i;
                    }
                    start += s.jobs;
                }
                segments.len()
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub jobs: Vec<JobRecord<T>>,
    pub seed: u64,
    pub lag_policy: String,
}

/// Service and delay draws for consecutive jobs.
///
/// Each quantity has its own substream keyed by the seed, so runs that share
/// a seed see identical `(S, D)` sequences whatever lag they apply.
pub struct JobSource<T: Real> {
    service: DistributionSpec<T>,
    delay: DistributionSpec<T>,
    schedule: ParamSchedule<T>,
    service_rng: SimRng,
    delay_rng: SimRng,
    cached: Option<((T, T), DistributionSpec<T>, DistributionSpec<T>)>,
    position: usize,
}

pub(crate) fn rescale<T: Real>(law: &DistributionSpec<T>, target: T) -> Result<DistributionSpec<T>> {
    if law.mean() == target {
        Ok(*law)
    } else {
        law.with_mean(target)
    }
}

impl<T: Real> JobSource<T> {
    pub fn new(
        service: DistributionSpec<T>,
        delay: DistributionSpec<T>,
        schedule: ParamSchedule<T>,
        seed: u64,
    ) -> Self {
        JobSource {
            service,
            delay,
            schedule,
            service_rng: substream(seed, Purpose::Service, &[]),
            delay_rng: substream(seed, Purpose::Delay, &[]),
            cached: None,
            position: 0,
        }
    }

    /// Laws in force for the 0-based job position `j`.
    pub fn laws_at(&mut self, j: usize) -> Result<(DistributionSpec<T>, DistributionSpec<T>)> {
        let means = self.schedule.means_at(j)?;
        match &self.cached {
            Some((m, s, d)) if *m == means => Ok((*s, *d)),
            _ => {
                let s = rescale(&self.service, means.0)?;
                let d = rescale(&self.delay, means.1)?;
                self.cached = Some((means, s, d));
                Ok((s, d))
            }
        }
    }

    /// `(service, delay)` of the next job.
    pub fn next_pair(&mut self) -> Result<(T, T)> {
        let (s, d) = self.laws_at(self.position)?;
        self.position += 1;
        Ok((s.sample(&mut self.service_rng), d.sample(&mut self.delay_rng)))
    }
}

/// The wait / inter-arrival recursion.
#[derive(Debug, Clone, Default)]
pub struct Recursion<T> {
    prev: Option<(T, T)>,
    arrival: T,
    index: usize,
}

impl<T: Real> Recursion<T> {
    pub fn new() -> Self {
        Recursion {
            prev: None,
            arrival: T::zero(),
            index: 0,
        }
    }

    /// Admits the next job, called `lag` after its predecessor entered service.
    pub fn step(&mut self, lag: T, service: T, delay: T) -> JobRecord<T> {
        self.index += 1;
        let (wait, iat) = match self.prev {
            None => (T::zero(), delay),
            Some((prev_service, prev_wait)) => (pos(prev_service - lag - delay), prev_wait + lag + delay),
        };
        self.arrival = self.arrival + iat;
        self.prev = Some((service, wait));
        JobRecord {
            index: self.index,
            service,
            delay,
            wait,
            sojourn: wait + service,
            iat,
            lag,
            arrival: self.arrival,
            state: state_for_wait(wait),
        }
    }
}

/// Simulates `n` jobs under a fixed lag.
pub fn run_fixed_lag<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    lag: T,
    n: usize,
    schedule: &ParamSchedule<T>,
    seed: u64,
) -> Result<Trajectory<T>> {
    if n < 2 {
        return Err(Error::invalid("n", "at least two jobs are required"));
    }
    if !(lag >= T::zero() && lag.is_finite()) {
        return Err(Error::invalid("lag", format!("must be finite and >= 0, got {lag}")));
    }
    schedule.validate(n)?;
    let mut source = JobSource::new(*service, *delay, schedule.clone(), seed);
    let mut rec = Recursion::new();
    let mut jobs = Vec::with_capacity(n);
    for _ in 0..n {
        let (s, d) = source.next_pair()?;
        jobs.push(rec.step(lag, s, d));
    }
    Ok(Trajectory {
        jobs,
        seed,
        lag_policy: format!("fixed lag {lag}"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    All,
    /// Everything after the first `k` jobs.
    SkipFirst(usize),
    LastK(usize),
    /// One estimate per window position of the given width.
    Sliding(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardReport<T> {
    Point(Estimate<T>),
    /// `series[i]` covers jobs `i .. i + width` (0-based).
    Series(Vec<T>),
}

impl<T: Real> RewardReport<T> {
    pub fn point(&self) -> Option<Estimate<T>> {
        match self {
            RewardReport::Point(e) => Some(*e),
            RewardReport::Series(_) => None,
        }
    }

    pub fn series(&self) -> Option<&[T]> {
        match self {
            RewardReport::Series(s) => Some(s),
            RewardReport::Point(_) => None,
        }
    }
}

/// `Σ f(T_j) / Σ IAT_j` over a slice of jobs.
pub fn ratio_estimate<T: Real, F: RewardFn<T> + ?Sized>(jobs: &[JobRecord<T>], f: &F) -> Estimate<T> {
    let mut acc = RatioAccumulator::new(jobs.len());
    for j in jobs {
        acc.push(f.eval(j.sojourn), j.iat);
    }
    acc.finish()
}

/// Sliding-window reward over any `(f(T), IAT)` sequence via prefix sums.
pub fn sliding_ratio<T: Real>(values: &[(T, T)], width: usize) -> Vec<T> {
    if width == 0 || width > values.len() {
        return Vec::new();
    }
    let mut num = T::zero();
    let mut den = T::zero();
    let mut out = Vec::with_capacity(values.len() - width + 1);
    for (i, &(a, b)) in values.iter().enumerate() {
        num = num + a;
        den = den + b;
        if i >= width {
            let (a0, b0) = values[i - width];
            num = num - a0;
            den = den - b0;
        }
        if i + 1 >= width {
            out.push(num / den);
        }
    }
    out
}

/// Per-unit-time reward estimate over the selected jobs.
pub fn estimate_reward<T: Real, F: RewardFn<T> + ?Sized>(
    traj: &Trajectory<T>,
    f: &F,
    window: Window,
) -> Result<RewardReport<T>> {
    let n = traj.jobs.len();
    let empty = |requested| Error::EmptyWindow {
        requested,
        available: n,
    };
    match window {
        Window::All if n > 0 => Ok(RewardReport::Point(ratio_estimate(&traj.jobs, f))),
        Window::SkipFirst(k) if k < n => Ok(RewardReport::Point(ratio_estimate(&traj.jobs[k..], f))),
        Window::LastK(k) if k > 0 && k <= n => Ok(RewardReport::Point(ratio_estimate(&traj.jobs[n - k..], f))),
        Window::Sliding(w) if w > 0 && w <= n => {
            let pairs: Vec<(T, T)> = traj.jobs.iter().map(|j| (f.eval(j.sojourn), j.iat)).collect();
            Ok(RewardReport::Series(sliding_ratio(&pairs, w)))
        }
        Window::All => Err(empty(0)),
        Window::SkipFirst(k) => Err(empty(n.saturating_sub(k))),
        Window::LastK(k) | Window::Sliding(k) => Err(empty(k)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{expected_wait, EvalMethod};
    use crate::reward::RewardSpec;
    use proptest::prelude::*;

    fn det(v: f64) -> DistributionSpec<f64> {
        DistributionSpec::deterministic(v).unwrap()
    }

    fn exp(m: f64) -> DistributionSpec<f64> {
        DistributionSpec::exponential(m).unwrap()
    }

    fn stationary(s: &DistributionSpec<f64>, d: &DistributionSpec<f64>) -> ParamSchedule<f64> {
        ParamSchedule::stationary_of(s, d)
    }

    #[test]
    fn deterministic_trace_by_hand() {
        let (s, d) = (det(1.0), det(0.5));
        let t = run_fixed_lag(&s, &d, 0.0, 3, &stationary(&s, &d), 1).unwrap();
        let w: Vec<f64> = t.jobs.iter().map(|j| j.wait).collect();
        let soj: Vec<f64> = t.jobs.iter().map(|j| j.sojourn).collect();
        assert_eq!(w, vec![0.0, 0.5, 0.5]);
        assert_eq!(soj, vec![1.0, 1.5, 1.5]);
        assert_eq!(t.jobs[1].iat, 0.5);
        assert_eq!(t.jobs[2].iat, 1.0);
        let states: Vec<ServerState> = t.jobs.iter().map(server_state_at_arrival).collect();
        assert_eq!(states, vec![ServerState::Idle, ServerState::Busy, ServerState::Busy]);
    }

    #[test]
    fn large_lag_never_waits() {
        let (s, d) = (det(1.0), det(0.5));
        let t = run_fixed_lag(&s, &d, 10.0, 3, &stationary(&s, &d), 1).unwrap();
        assert!(t.jobs.iter().all(|j| j.wait == 0.0 && j.state == ServerState::Idle));
    }

    #[test]
    fn state_follows_wait() {
        let mut j = Recursion::<f64>::new().step(0.0, 1.0, 0.1);
        j.wait = 0.5;
        assert_eq!(server_state_at_arrival(&j), ServerState::Busy);
        j.wait = 0.0;
        assert_eq!(server_state_at_arrival(&j), ServerState::Idle);
    }

    #[test]
    fn steady_state_window_on_deterministic_trace() {
        let (s, d) = (det(1.0), det(0.5));
        let t = run_fixed_lag(&s, &d, 0.0, 3, &stationary(&s, &d), 1).unwrap();
        let f = RewardSpec::exponential(1.0).unwrap();
        let g = estimate_reward(&t, &f, Window::LastK(1)).unwrap().point().unwrap();
        assert!((g.value - (-1.5f64).exp()).abs() < 1e-15);
        assert!((g.value - 0.2231).abs() < 1e-4);
    }

    #[test]
    fn vanishing_kappa_gives_throughput() {
        let (s, d) = (exp(1.0), exp(0.33));
        let t = run_fixed_lag(&s, &d, 0.2, 10_000, &stationary(&s, &d), 5).unwrap();
        let f = RewardSpec::exponential(1e-9).unwrap();
        let g = estimate_reward(&t, &f, Window::All).unwrap().point().unwrap();
        let elapsed = t.jobs.last().unwrap().arrival;
        assert!((g.value - t.jobs.len() as f64 / elapsed).abs() < 1e-6);
    }

    #[test]
    fn window_errors() {
        let (s, d) = (det(1.0), det(0.5));
        let t = run_fixed_lag(&s, &d, 0.0, 3, &stationary(&s, &d), 1).unwrap();
        let f = RewardSpec::exponential(1.0).unwrap();
        assert!(matches!(estimate_reward(&t, &f, Window::LastK(4)), Err(Error::EmptyWindow { .. })));
        assert!(matches!(estimate_reward(&t, &f, Window::LastK(0)), Err(Error::EmptyWindow { .. })));
        assert!(matches!(estimate_reward(&t, &f, Window::SkipFirst(3)), Err(Error::EmptyWindow { .. })));
        assert!(matches!(estimate_reward(&t, &f, Window::Sliding(9)), Err(Error::EmptyWindow { .. })));
    }

    #[test]
    fn sliding_matches_direct_windows() {
        let (s, d) = (exp(1.0), exp(0.33));
        let t = run_fixed_lag(&s, &d, 0.1, 500, &stationary(&s, &d), 2).unwrap();
        let f = RewardSpec::exponential(1.0).unwrap();
        let series = estimate_reward(&t, &f, Window::Sliding(100)).unwrap();
        let series = series.series().unwrap();
        assert_eq!(series.len(), 401);
        for i in [0, 17, 400] {
            let direct = ratio_estimate(&t.jobs[i..i + 100], &f).value;
            assert!((series[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_short_runs_and_bad_schedules() {
        let (s, d) = (exp(1.0), exp(0.33));
        assert!(run_fixed_lag(&s, &d, 0.0, 1, &stationary(&s, &d), 1).is_err());
        assert!(run_fixed_lag(&s, &d, -1.0, 10, &stationary(&s, &d), 1).is_err());
        let short = ParamSchedule::AbruptPiecewise(vec![Segment {
            jobs: 5,
            service_mean: 1.0,
            delay_mean: 0.3,
        }]);
        assert!(matches!(run_fixed_lag(&s, &d, 0.0, 10, &short, 1), Err(Error::InvalidSchedule(_))));
    }

    #[test]
    fn schedules_set_per_job_means() {
        let sched = ParamSchedule::AbruptPiecewise(vec![
            Segment { jobs: 2, service_mean: 1.0, delay_mean: 0.33 },
            Segment { jobs: 3, service_mean: 0.5, delay_mean: 0.1667 },
        ]);
        assert_eq!(sched.means_at(1).unwrap(), (1.0, 0.33));
        assert_eq!(sched.means_at(2).unwrap(), (0.5, 0.1667));
        assert_eq!(sched.segment_of(4), 1);
        let ramp = ParamSchedule::<f64>::GradualLinear { service: (1.0, 0.5), delay: (0.4, 0.2), over: 11 };
        let (a, b) = ramp.means_at(5).unwrap();
        assert!((a - 0.75).abs() < 1e-15 && (b - 0.3).abs() < 1e-15);
        assert_eq!(ramp.means_at(100).unwrap(), (0.5, 0.2));

        let s = DistributionSpec::deterministic(1.0).unwrap();
        let d = DistributionSpec::deterministic(0.33).unwrap();
        let t = run_fixed_lag(&s, &d, 0.0, 5, &sched, 3).unwrap();
        assert_eq!(t.jobs[1].service, 1.0);
        assert_eq!(t.jobs[2].service, 0.5);
        assert_eq!(t.jobs[4].delay, 0.1667);
    }

    #[test]
    fn identical_seed_identical_trajectory() {
        let (s, d) = (exp(1.0), DistributionSpec::uniform(0.0, 0.66).unwrap());
        let a = run_fixed_lag(&s, &d, 0.3, 1000, &stationary(&s, &d), 77).unwrap();
        let b = run_fixed_lag(&s, &d, 0.3, 1000, &stationary(&s, &d), 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn throughput_identity() {
        let (s, d) = (exp(1.0), exp(0.33));
        let t = run_fixed_lag(&s, &d, 0.25, 100_000, &stationary(&s, &d), 8).unwrap();
        let sum: f64 = t.jobs[1..].iter().map(|j| j.iat).sum();
        let span = t.jobs.last().unwrap().arrival - t.jobs[0].arrival;
        assert!((sum - span).abs() <= 1e-12 * span);
    }

    #[test]
    fn exponential_pair_mean_wait() {
        let (s, d) = (exp(1.0), exp(0.33));
        let t = run_fixed_lag(&s, &d, 0.0, 1_000_000, &stationary(&s, &d), 4).unwrap();
        let mean_w: f64 = t.jobs.iter().map(|j| j.wait).sum::<f64>() / t.jobs.len() as f64;
        let exact = expected_wait(&s, &d, 0.0, EvalMethod::ClosedForm).unwrap().value;
        assert!((mean_w - exact).abs() < 0.01 * exact, "{mean_w} vs {exact}");
        assert!((exact - 0.7519).abs() < 1e-4);
    }

    #[test]
    fn stationary_halves_agree() {
        let (s, d) = (exp(1.0), exp(0.33));
        let t = run_fixed_lag(&s, &d, 0.0, 1_000_000, &stationary(&s, &d), 12).unwrap();
        let body = &t.jobs[DEFAULT_BURN_IN..];
        let (a, b) = body.split_at(body.len() / 2);
        let ea = crate::stats::mean_se(a.iter().map(|j| j.wait));
        let eb = crate::stats::mean_se(b.iter().map(|j| j.wait));
        // Lag-one dependence inflates the naive i.i.d. error only mildly.
        let pooled = (ea.std_error.powi(2) + eb.std_error.powi(2)).sqrt();
        assert!((ea.value - eb.value).abs() < 3.0 * pooled, "{:?} {:?}", ea, eb);
    }

    #[test]
    fn lag_beyond_service_support() {
        let s = DistributionSpec::uniform(0.0, 1.0).unwrap();
        let d = exp(0.5);
        let f = RewardSpec::exponential(1.0).unwrap();
        let t = run_fixed_lag(&s, &d, 1.0, 200_000, &stationary(&s, &d), 6).unwrap();
        assert!(t.jobs.iter().all(|j| j.wait == 0.0));
        let g = estimate_reward(&t, &f, Window::All).unwrap().point().unwrap();
        let expect = s.mgf(-1.0).unwrap() / (1.0 + 0.5);
        assert!((g.value - expect).abs() < 3.0 * g.std_error, "{g:?} {expect}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn waits_shrink_as_lag_grows(seed in 0u64..1000, lag in 0.0f64..2.0, extra in 0.0f64..2.0) {
            let (s, d) = (exp(1.0), DistributionSpec::uniform(0.0, 0.8).unwrap());
            let sched = stationary(&s, &d);
            let a = run_fixed_lag(&s, &d, lag, 300, &sched, seed).unwrap();
            let b = run_fixed_lag(&s, &d, lag + extra, 300, &sched, seed).unwrap();
            for (x, y) in a.jobs.iter().zip(&b.jobs) {
                prop_assert_eq!(x.service, y.service);
                prop_assert_eq!(x.delay, y.delay);
                prop_assert!(y.wait <= x.wait);
            }
        }

        #[test]
        fn record_invariants(seed in 0u64..1000, lag in 0.0f64..1.5) {
            let (s, d) = (DistributionSpec::truncated_normal(1.0, 0.5, 0.0, 2.0).unwrap(), exp(0.4));
            let t = run_fixed_lag(&s, &d, lag, 200, &stationary(&s, &d), seed).unwrap();
            prop_assert_eq!(t.jobs[0].wait, 0.0);
            for (k, w) in t.jobs.windows(2).enumerate() {
                let (p, j) = (w[0], w[1]);
                prop_assert_eq!(j.index, k + 2);
                prop_assert_eq!(j.wait, (p.service - lag - j.delay).max(0.0));
                prop_assert_eq!(j.sojourn, j.wait + j.service);
                prop_assert_eq!(j.iat, p.wait + lag + j.delay);
                prop_assert_eq!(j.state == ServerState::Busy, j.wait > 0.0);
            }
        }
    }
}
