//! Online learning of the lag with a Gamma posterior on its rate.
//!
//! Each job draws `θ̂ ~ Gamma(α, β)` and uses the lag `1/θ̂`. When the
//! server is found in the same state at two consecutive arrivals the
//! posterior absorbs the lag: idle pairs push the rate up (shorter lags)
//! faster than busy pairs do.

use rand::Rng;
use rand_distr::{Distribution as _, Gamma};
use serde::Serialize;

use crate::distributions::DistributionSpec;
use crate::error::{Error, Result};
use crate::output::{fmt_num, json_num, json_text, Table};
use crate::reward::RewardFn;
use crate::rng::{substream, Purpose};
use crate::scalar::Real;
use crate::simulator::{sliding_ratio, JobSource, ParamSchedule, Recursion, RewardReport, ServerState, Trajectory};
use crate::stats::RatioAccumulator;

pub const DEFAULT_LAST_K: usize = 5000;
pub const DEFAULT_SLIDING: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PosteriorState<T> {
    /// Shape.
    pub alpha: T,
    /// Rate.
    pub beta: T,
    pub updates_applied: u64,
}

impl<T: Real> PosteriorState<T> {
    pub fn prior(cfg: &BayesConfig<T>) -> Self {
        PosteriorState {
            alpha: cfg.alpha0,
            beta: cfg.beta0,
            updates_applied: 0,
        }
    }

    /// Posterior mean of the rate `θ`.
    pub fn mean_rate(&self) -> T {
        self.alpha / self.beta
    }

    /// `β/α`, the lag at the posterior mean rate.
    pub fn mean_lag(&self) -> T {
        self.beta / self.alpha
    }

    pub fn to_json(&self) -> String {
        json_text(&serde_json::json!({
            "alpha": json_num(self.alpha),
            "beta": json_num(self.beta),
            "updates_applied": self.updates_applied,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesConfig<T> {
    pub alpha0: T,
    pub beta0: T,
    pub eps_idle: T,
    pub eps_busy: T,
}

impl<T: Real> Default for BayesConfig<T> {
    fn default() -> Self {
        BayesConfig {
            alpha0: T::one(),
            beta0: T::one(),
            eps_idle: T::lit(3.0),
            eps_busy: T::one(),
        }
    }
}

impl<T: Real> BayesConfig<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v, strict) in [
            ("alpha0", self.alpha0, true),
            ("beta0", self.beta0, true),
            ("eps_idle", self.eps_idle, false),
            ("eps_busy", self.eps_busy, false),
        ] {
            let ok = v.is_finite() && if strict { v > T::zero() } else { v >= T::zero() };
            if !ok {
                return Err(Error::invalid(name, format!("must be {} 0, got {v}", if strict { ">" } else { ">=" })));
            }
        }
        Ok(())
    }
}

/// `1/θ̂` for `θ̂ ~ Gamma(shape α, rate β)`.
pub fn draw_lag<T: Real, R: Rng + ?Sized>(post: &PosteriorState<T>, rng: &mut R) -> T {
    let gamma = Gamma::new(post.alpha.f64(), 1.0 / post.beta.f64()).expect("valid posterior");
    let theta: f64 = gamma.sample(rng);
    T::lit(1.0 / theta.max(1e-300))
}

/// Applies one observation. `prev` is `None` for the first job.
pub fn update<T: Real>(
    post: &PosteriorState<T>,
    lag: T,
    now: ServerState,
    prev: Option<ServerState>,
    cfg: &BayesConfig<T>,
) -> PosteriorState<T> {
    let eps = |s| match s {
        ServerState::Idle => cfg.eps_idle,
        ServerState::Busy => cfg.eps_busy,
    };
    let increment = match prev {
        None => Some(eps(now)),
        Some(p) if p == now => Some(eps(now)),
        Some(_) => None,
    };
    match increment {
        Some(e) => PosteriorState {
            alpha: post.alpha + e,
            beta: post.beta + lag,
            updates_applied: post.updates_applied + 1,
        },
        None => *post,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reporting {
    /// Single estimate over the final `k` jobs.
    LastK(usize),
    /// Trailing-window series of the given width.
    Sliding(usize),
}

impl Reporting {
    pub fn width(&self) -> usize {
        match *self {
            Reporting::LastK(k) | Reporting::Sliding(k) => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow<T> {
    pub index: usize,
    pub lag_drawn: T,
    /// Posterior after this job's update.
    pub alpha: T,
    pub beta: T,
    pub state: ServerState,
    /// Reward over the trailing reporting window ending at this job, once
    /// that many jobs exist.
    pub reward_window: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveRun<T> {
    pub trajectory: Trajectory<T>,
    pub posterior: PosteriorState<T>,
    pub reward: RewardReport<T>,
    pub log: Vec<LogRow<T>>,
}

impl<T: Real> AdaptiveRun<T> {
    pub fn log_table(&self) -> Table {
        let mut t = Table::new(&["index", "lag_drawn", "alpha", "beta", "state", "reward_window"]);
        for r in &self.log {
            t.push(vec![
                r.index.to_string(),
                fmt_num(r.lag_drawn),
                fmt_num(r.alpha),
                fmt_num(r.beta),
                r.state.as_str().to_string(),
                r.reward_window.map(fmt_num).unwrap_or_default(),
            ]);
        }
        t
    }
}

/// Runs the learning loop for `n` jobs.
pub fn run_adaptive<T: Real, F: RewardFn<T> + ?Sized>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    schedule: &ParamSchedule<T>,
    f: &F,
    n: usize,
    cfg: &BayesConfig<T>,
    seed: u64,
    reporting: Reporting,
) -> Result<AdaptiveRun<T>> {
    cfg.validate()?;
    let width = reporting.width();
    if width == 0 || n < width {
        return Err(Error::invalid("n", format!("must be >= the reporting window ({width})")));
    }
    schedule.validate(n)?;
    let mut source = JobSource::new(*service, *delay, schedule.clone(), seed);
    let mut lag_rng = substream(seed, Purpose::Lag, &[]);
    let mut rec = Recursion::new();
    let mut post = PosteriorState::prior(cfg);
    let mut prev: Option<ServerState> = None;
    let mut jobs = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut log = Vec::with_capacity(n);
    let (mut num, mut den) = (T::zero(), T::zero());
    for i in 0..n {
        let lag = draw_lag(&post, &mut lag_rng);
        let (s, d) = source.next_pair()?;
        let job = rec.step(lag, s, d);
        post = update(&post, lag, job.state, prev, cfg);
        prev = Some(job.state);
        let pair = (f.eval(job.sojourn), job.iat);
        num = num + pair.0;
        den = den + pair.1;
        if i >= width {
            let (a, b) = pairs[i - width];
            num = num - a;
            den = den - b;
        }
        pairs.push(pair);
        log.push(LogRow {
            index: job.index,
            lag_drawn: lag,
            alpha: post.alpha,
            beta: post.beta,
            state: job.state,
            reward_window: (i + 1 >= width).then(|| num / den),
        });
        jobs.push(job);
    }
    let reward = match reporting {
        Reporting::LastK(k) => {
            let mut acc = RatioAccumulator::new(k);
            for &(a, b) in &pairs[n - k..] {
                acc.push(a, b);
            }
            RewardReport::Point(acc.finish())
        }
        Reporting::Sliding(w) => RewardReport::Series(sliding_ratio(&pairs, w)),
    };
    Ok(AdaptiveRun {
        trajectory: Trajectory {
            jobs,
            seed,
            lag_policy: "bayes".into(),
        },
        posterior: post,
        reward,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardSpec;
    use crate::rng::SimRng;
    use rand::SeedableRng;

    fn post(alpha: f64, beta: f64) -> PosteriorState<f64> {
        PosteriorState {
            alpha,
            beta,
            updates_applied: 0,
        }
    }

    #[test]
    fn update_branches() {
        let cfg = BayesConfig::default();
        use ServerState::*;
        let p = update(&post(1.0, 1.0), 0.5, Idle, Some(Idle), &cfg);
        assert_eq!((p.alpha, p.beta, p.updates_applied), (4.0, 1.5, 1));
        let p = update(&post(1.0, 1.0), 0.5, Busy, Some(Busy), &cfg);
        assert_eq!((p.alpha, p.beta), (2.0, 1.5));
        assert_eq!(update(&post(5.0, 2.0), 0.7, Busy, Some(Idle), &cfg), post(5.0, 2.0));
        assert_eq!(update(&post(5.0, 2.0), 0.7, Idle, Some(Busy), &cfg), post(5.0, 2.0));
        let p = update(&post(1.0, 1.0), 0.25, Idle, None, &cfg);
        assert_eq!((p.alpha, p.beta), (4.0, 1.25));
        let p = update(&post(1.0, 1.0), 0.25, Busy, None, &cfg);
        assert_eq!((p.alpha, p.beta), (2.0, 1.25));
    }

    #[test]
    fn conjugate_sums() {
        let cfg = BayesConfig::default();
        let xs = [0.3, 1.7, 0.05, 2.5, 0.9];
        for (state, eps) in [(ServerState::Idle, 3.0), (ServerState::Busy, 1.0)] {
            let mut p = PosteriorState::prior(&cfg);
            for &x in &xs {
                p = update(&p, x, state, Some(state), &cfg);
            }
            assert_eq!(p.beta, 1.0 + xs.iter().sum::<f64>());
            assert_eq!(p.alpha, 1.0 + eps * xs.len() as f64);
            assert_eq!(p.updates_applied, xs.len() as u64);
        }
    }

    #[test]
    fn idle_runs_shorten_lag_faster() {
        let cfg = BayesConfig::default();
        let (mut idle, mut busy) = (PosteriorState::prior(&cfg), PosteriorState::prior(&cfg));
        for _ in 0..50 {
            idle = update(&idle, 1.0, ServerState::Idle, Some(ServerState::Idle), &cfg);
            busy = update(&busy, 1.0, ServerState::Busy, Some(ServerState::Busy), &cfg);
        }
        assert!(idle.mean_rate() > busy.mean_rate());
        assert!(idle.mean_lag() < busy.mean_lag());
    }

    #[test]
    fn draws_concentrate() {
        let mut rng = SimRng::seed_from_u64(1);
        let p = post(1e6, 1e6);
        let m = (0..10_000).map(|_| draw_lag(&p, &mut rng)).sum::<f64>() / 1e4;
        assert!((0.99..=1.01).contains(&m), "{m}");
        let p = post(1.0, 1.0);
        assert!((0..10_000).all(|_| draw_lag(&p, &mut rng) > 0.0));
        let a: Vec<f64> = (0..5).map(|_| draw_lag(&p, &mut SimRng::seed_from_u64(9))).collect();
        assert!(a.iter().all(|&x| x == a[0]));
    }

    fn exp(m: f64) -> DistributionSpec<f64> {
        DistributionSpec::exponential(m).unwrap()
    }

    #[test]
    fn adaptive_run_is_reproducible_and_consistent() {
        let (s, d) = (exp(1.0), exp(0.33));
        let f = RewardSpec::exponential(1.0).unwrap();
        let sched = ParamSchedule::stationary_of(&s, &d);
        let cfg = BayesConfig::default();
        let a = run_adaptive(&s, &d, &sched, &f, 6000, &cfg, 4, Reporting::LastK(5000)).unwrap();
        let b = run_adaptive(&s, &d, &sched, &f, 6000, &cfg, 4, Reporting::LastK(5000)).unwrap();
        assert_eq!(a, b);
        let last = a.log.last().unwrap();
        assert!((last.reward_window.unwrap() - a.reward.point().unwrap().value).abs() < 1e-9);
        assert!(a.log[4998].reward_window.is_none());
        assert_eq!(a.posterior.alpha, last.alpha);
        // Replaying the logged lags and states through `update` reproduces the posterior.
        let mut p = PosteriorState::prior(&cfg);
        let mut prev = None;
        for (r, j) in a.log.iter().zip(&a.trajectory.jobs) {
            assert_eq!(r.lag_drawn, j.lag);
            p = update(&p, r.lag_drawn, j.state, prev, &cfg);
            prev = Some(j.state);
        }
        assert_eq!(p, a.posterior);
        assert!(run_adaptive(&s, &d, &sched, &f, 100, &cfg, 4, Reporting::LastK(5000)).is_err());
    }

    #[test]
    fn zero_increments_freeze_alpha() {
        let (s, d) = (exp(1.0), exp(0.33));
        let f = RewardSpec::exponential(1.0).unwrap();
        let cfg = BayesConfig {
            eps_idle: 0.0,
            eps_busy: 0.0,
            ..BayesConfig::default()
        };
        let r = run_adaptive(&s, &d, &ParamSchedule::stationary_of(&s, &d), &f, 2000, &cfg, 1, Reporting::Sliding(500))
            .unwrap();
        assert_eq!(r.posterior.alpha, 1.0);
        assert!(r.log.iter().all(|row| row.alpha == 1.0));
        assert_eq!(r.reward.series().unwrap().len(), 1501);
    }
}
