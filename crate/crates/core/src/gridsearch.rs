//! Benchmark optimiser: sweep a lag grid and keep the best reward.

use rayon::prelude::*;
use serde::Serialize;

use crate::analytics::{surrogate_reward, RewardModel};
use crate::distributions::{DistributionSpec, NUMERIC_TOL};
use crate::error::{Error, Result};
use crate::output::{fmt_num, Table};
use crate::reward::{RewardFn, RewardSpec};
use crate::scalar::Real;
use crate::simulator::{JobSource, ParamSchedule, Recursion, DEFAULT_BURN_IN};
use crate::stats::{Estimate, RatioAccumulator};

pub const DEFAULT_GRID_POINTS: usize = 61;
pub const MIN_SIMULATED_JOBS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Simulated `Ĝ` with common random numbers across lags.
    Simulated,
    /// `G` from closed forms or numeric integration.
    Exact,
    /// The Jensen surrogate; exponential rewards only.
    Surrogate,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Simulated => "simulated",
            Objective::Exact => "exact",
            Objective::Surrogate => "surrogate",
        }
    }
}

/// Evenly spaced lags `lag_min, lag_min + step, …` up to `lag_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LagGrid<T> {
    pub lag_min: T,
    pub lag_max: T,
    pub step: T,
}

impl<T: Real> LagGrid<T> {
    pub fn new(lag_min: T, lag_max: T, step: T) -> Result<Self> {
        if !(lag_min >= T::zero() && lag_min < lag_max && lag_max.is_finite()) {
            return Err(Error::invalid("lag_min", "need 0 <= lag_min < lag_max"));
        }
        if !(step > T::zero()) {
            return Err(Error::invalid("step", "must be > 0"));
        }
        Ok(LagGrid { lag_min, lag_max, step })
    }

    /// `[0, 3·E[S]]` with 61 points.
    pub fn default_for(service: &DistributionSpec<T>) -> Self {
        let hi = T::lit(3.0) * service.mean();
        LagGrid {
            lag_min: T::zero(),
            lag_max: hi,
            step: hi / T::lit((DEFAULT_GRID_POINTS - 1) as f64),
        }
    }

    /// Lags are computed as `lag_min + i·step` so that no rounding drift
    /// accumulates; the endpoint is kept when it is within `1e-9` steps.
    pub fn lags(&self) -> Vec<T> {
        let span = ((self.lag_max - self.lag_min) / self.step).f64();
        let count = (span + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.lag_min + T::lit(i as f64) * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint<T> {
    pub lag: T,
    pub reward: T,
    pub std_error: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult<T> {
    pub points: Vec<GridPoint<T>>,
    /// `Δ_sim`: smallest lag attaining the maximum.
    pub best_lag: T,
    /// `G_sim`.
    pub best_reward: T,
}

impl<T: Real> GridResult<T> {
    pub fn from_points(points: Vec<GridPoint<T>>) -> Result<Self> {
        let mut best: Option<GridPoint<T>> = None;
        for p in &points {
            if p.reward.is_finite() && best.map_or(true, |b| p.reward > b.reward) {
                best = Some(*p);
            }
        }
        let best = best.ok_or_else(|| Error::invalid("grid", "no finite reward on the grid"))?;
        Ok(GridResult {
            best_lag: best.lag,
            best_reward: best.reward,
            points,
        })
    }

    pub fn to_table(&self, objective: Objective) -> Table {
        let mut t = Table::new(&["lag", "reward", "std_error"]);
        for p in &self.points {
            t.push(vec![fmt_num(p.lag), fmt_num(p.reward), fmt_num(p.std_error)]);
        }
        t.footer.push(format!(
            "objective={} best_lag={} best_reward={}",
            objective.as_str(),
            fmt_num(self.best_lag),
            fmt_num(self.best_reward)
        ));
        t
    }
}

/// Grid search over `grid` for the selected objective.
///
/// The simulated objective draws `n` `(S, D)` pairs once from the seed's
/// service and delay substreams and replays them at every lag, skipping the
/// first 1000 jobs.
pub fn optimize<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    f: &RewardSpec<T>,
    grid: &LagGrid<T>,
    n: usize,
    seed: u64,
    objective: Objective,
) -> Result<GridResult<T>> {
    let lags = grid.lags();
    let points: Vec<GridPoint<T>> = match objective {
        Objective::Simulated => {
            let pairs = draw_pairs(service, delay, n, seed)?;
            lags.par_iter()
                .map(|&lag| {
                    let e = replay(&pairs, lag, f, DEFAULT_BURN_IN);
                    GridPoint {
                        lag,
                        reward: e.value,
                        std_error: e.std_error,
                    }
                })
                .collect()
        }
        Objective::Exact => {
            let model = RewardModel::new(service, delay, f, T::lit(NUMERIC_TOL))?;
            lags.par_iter()
                .map(|&lag| Ok(GridPoint::exact(lag, model.exact(lag)?)))
                .collect::<Result<_>>()?
        }
        Objective::Surrogate => {
            let kappa = match f {
                RewardSpec::Exponential { kappa } => *kappa,
                _ => return Err(Error::invalid("reward", "the surrogate objective needs an exponential reward")),
            };
            lags.par_iter()
                .map(|&lag| Ok(GridPoint::exact(lag, surrogate_reward(service, delay, kappa, lag)?)))
                .collect::<Result<_>>()?
        }
    };
    GridResult::from_points(points)
}

impl<T: Real> GridPoint<T> {
    fn exact(lag: T, reward: T) -> Self {
        GridPoint {
            lag,
            reward,
            std_error: T::zero(),
        }
    }
}

/// The first `n` `(service, delay)` draws of a stationary run with `seed`.
pub fn draw_pairs<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    n: usize,
    seed: u64,
) -> Result<Vec<(T, T)>> {
    if n < MIN_SIMULATED_JOBS {
        return Err(Error::invalid("n", format!("simulated objective needs n >= {MIN_SIMULATED_JOBS}")));
    }
    let mut source = JobSource::new(*service, *delay, ParamSchedule::stationary_of(service, delay), seed);
    (0..n).map(|_| source.next_pair()).collect()
}

/// `Ĝ` from replaying fixed draws at one lag.
pub fn replay<T: Real, F: RewardFn<T> + ?Sized>(pairs: &[(T, T)], lag: T, f: &F, burn_in: usize) -> Estimate<T> {
    let mut rec = Recursion::new();
    let mut acc = RatioAccumulator::new(pairs.len().saturating_sub(burn_in));
    for (i, &(s, d)) in pairs.iter().enumerate() {
        let job = rec.step(lag, s, d);
        if i >= burn_in {
            acc.push(f.eval(job.sojourn), job.iat);
        }
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{reward_exact, EvalMethod};
    use crate::simulator::{estimate_reward, run_fixed_lag, Window};

    fn exp(m: f64) -> DistributionSpec<f64> {
        DistributionSpec::exponential(m).unwrap()
    }

    fn det(v: f64) -> DistributionSpec<f64> {
        DistributionSpec::deterministic(v).unwrap()
    }

    #[test]
    fn grid_lags() {
        let g = LagGrid::new(0.0, 2.0, 0.05).unwrap();
        let l = g.lags();
        assert_eq!(l.len(), 41);
        assert_eq!(l[40], 2.0);
        let d = LagGrid::default_for(&exp(1.0));
        assert_eq!(d.lags().len(), 61);
        assert!((d.lags()[60] - 3.0).abs() < 1e-12);
        assert!(LagGrid::new(1.0, 1.0, 0.1).is_err());
        assert!(LagGrid::new(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn surrogate_peak_at_zero_when_mgf_product_large() {
        let f = RewardSpec::exponential(1.0).unwrap();
        let g = LagGrid::new(0.0, 2.0, 0.05).unwrap();
        let r = optimize(&exp(1.0), &exp(0.6), &f, &g, 0, 0, Objective::Surrogate).unwrap();
        assert_eq!(r.best_lag, 0.0);
        let direct: Vec<f64> = g.lags().iter().map(|&l| surrogate_reward(&exp(1.0), &exp(0.6), 1.0, l).unwrap()).collect();
        for (p, v) in r.points.iter().zip(&direct) {
            assert_eq!(p.reward, *v);
        }
    }

    #[test]
    fn deterministic_exact_peak() {
        let f = RewardSpec::exponential(1.0).unwrap();
        let g = LagGrid::new(0.0, 2.0, 0.01).unwrap();
        let r = optimize(&det(1.0), &det(0.5), &f, &g, 0, 0, Objective::Exact).unwrap();
        assert!((r.best_lag - 0.5).abs() < 1e-12);
        assert!((r.best_reward - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn surrogate_requires_exponential_reward() {
        let f = RewardSpec::polynomial(1.0).unwrap();
        let g = LagGrid::new(0.0, 1.0, 0.5).unwrap();
        assert!(optimize(&exp(1.0), &exp(0.3), &f, &g, 0, 0, Objective::Surrogate).is_err());
        let f = RewardSpec::exponential(4.0).unwrap();
        assert!(matches!(
            optimize(&exp(1.0), &exp(0.3), &f, &g, 0, 0, Objective::Surrogate),
            Err(Error::DivergentMgf { .. })
        ));
    }

    #[test]
    fn ties_go_to_smallest_lag() {
        let pts = [0.0, 0.5, 1.0]
            .iter()
            .map(|&lag| GridPoint { lag, reward: if lag > 0.2 { 2.0 } else { 1.0 }, std_error: 0.0 })
            .collect();
        let r = GridResult::from_points(pts).unwrap();
        assert_eq!(r.best_lag, 0.5);
        assert_eq!(r.best_reward, 2.0);
    }

    #[test]
    fn replay_matches_simulator_and_shares_draws() {
        let (s, d) = (exp(1.0), exp(0.33));
        let f = RewardSpec::exponential(1.0).unwrap();
        let sched = ParamSchedule::stationary_of(&s, &d);
        let g = LagGrid::new(0.0, 0.5, 0.25).unwrap();
        let r = optimize(&s, &d, &f, &g, 20_000, 7, Objective::Simulated).unwrap();
        let mut prev: Option<Vec<(f64, f64)>> = None;
        for p in &r.points {
            let t = run_fixed_lag(&s, &d, p.lag, 20_000, &sched, 7).unwrap();
            let e = estimate_reward(&t, &f, Window::SkipFirst(DEFAULT_BURN_IN)).unwrap().point().unwrap();
            assert_eq!(e.value, p.reward);
            assert_eq!(e.std_error, p.std_error);
            let draws: Vec<(f64, f64)> = t.jobs.iter().map(|j| (j.service, j.delay)).collect();
            if let Some(prev) = &prev {
                assert_eq!(prev, &draws);
            }
            prev = Some(draws);
        }
        let again = optimize(&s, &d, &f, &g, 20_000, 7, Objective::Simulated).unwrap();
        assert_eq!(r, again);
        assert!(optimize(&s, &d, &f, &g, 9_999, 7, Objective::Simulated).is_err());
    }

    #[test]
    fn simulated_best_near_exact_best() {
        let (s, d) = (exp(1.0), exp(0.33));
        let f = RewardSpec::exponential(1.0).unwrap();
        let g = LagGrid::new(0.0, 1.0, 0.1).unwrap();
        let sim = optimize(&s, &d, &f, &g, 1_000_000, 3, Objective::Simulated).unwrap();
        let ex = optimize(&s, &d, &f, &g, 0, 0, Objective::Exact).unwrap();
        let se = sim.points.iter().find(|p| p.lag == sim.best_lag).unwrap().std_error;
        assert!((sim.best_reward - ex.best_reward).abs() <= 3.0 * se, "{} {} {se}", sim.best_reward, ex.best_reward);
        for (a, b) in sim.points.iter().zip(&ex.points) {
            assert!((a.reward - b.reward).abs() <= 3.0 * a.std_error, "lag {}: {} {}", a.lag, a.reward, b.reward);
            let cf = reward_exact(&s, &d, &f, b.lag, EvalMethod::ClosedForm).unwrap().value;
            assert_eq!(cf, b.reward);
        }
    }
}
