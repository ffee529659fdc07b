//! Experiment definitions: the benchmark case matrix, kappa sweeps and
//! mean-shift runs.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::analytics::surrogate_reward;
use crate::bayes::{run_adaptive, BayesConfig, Reporting, DEFAULT_LAST_K, DEFAULT_SLIDING};
use crate::distributions::DistributionSpec;
use crate::error::{Error, Result};
use crate::gridsearch::{optimize, LagGrid, Objective};
use crate::output::{fmt_num, fmt_opt, Table};
use crate::reward::RewardSpec;
use crate::scalar::Real;
use crate::simulator::{rescale, ParamSchedule, Segment};

pub const DEFAULT_JOBS: usize = 50_000;
/// Jobs per lag for the simulated grid search behind `G_sim`.
pub const DEFAULT_GRID_JOBS: usize = 200_000;
/// Jobs excluded from the windowed reward after each abrupt change.
pub const DEFAULT_SHIFT_BURN_IN: usize = 2000;
pub const DEFAULT_SEGMENT_JOBS: usize = 10_000;
pub const KAPPA_SWEEP: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grid,
    Bayes,
    Exact,
    Surrogate,
    Conditions,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "grid" => Method::Grid,
            "bayes" => Method::Bayes,
            "exact" => Method::Exact,
            "surrogate" => Method::Surrogate,
            "conditions" => Method::Conditions,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec<T> {
    pub id: String,
    pub service: DistributionSpec<T>,
    pub delay: DistributionSpec<T>,
    pub reward: RewardSpec<T>,
    pub methods: Vec<Method>,
    pub schedule: ParamSchedule<T>,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub reporting: Reporting,
    pub bayes: BayesConfig<T>,
    /// Lag grid for grid searches; `None` uses `[0, 3·E[S]]`.
    pub grid: Option<LagGrid<T>>,
    pub grid_jobs: usize,
}

impl<T: Real> ExperimentSpec<T> {
    pub fn new(id: impl Into<String>, service: DistributionSpec<T>, delay: DistributionSpec<T>, reward: RewardSpec<T>) -> Self {
        ExperimentSpec {
            id: id.into(),
            schedule: ParamSchedule::stationary_of(&service, &delay),
            service,
            delay,
            reward,
            methods: vec![Method::Grid, Method::Bayes, Method::Surrogate],
            n: DEFAULT_JOBS,
            seeds: vec![0],
            reporting: Reporting::LastK(DEFAULT_LAST_K),
            bayes: BayesConfig::default(),
            grid: None,
            grid_jobs: DEFAULT_GRID_JOBS,
        }
    }

    pub fn has(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }

    pub fn lag_grid(&self) -> LagGrid<T> {
        self.grid.unwrap_or_else(|| LagGrid::default_for(&self.service))
    }

    /// The surrogate needs an exponential reward, closed-form MGFs and a
    /// finite `M_D(κ)`.
    pub fn surrogate_available(&self) -> bool {
        match self.reward {
            RewardSpec::Exponential { kappa } => {
                self.service.has_closed_form_mgf()
                    && self.delay.has_closed_form_mgf()
                    && self.delay.mgf(kappa).is_ok()
            }
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("id", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds", "at least one seed is required"));
        }
        if self.has(Method::Bayes) && self.n < self.reporting.width() {
            return Err(Error::invalid("n", "must be >= the reporting window"));
        }
        self.bayes.validate()?;
        self.schedule.validate(self.n)?;
        if self.has(Method::Surrogate) && self.schedule.is_stationary() && !self.surrogate_available() {
            if let RewardSpec::Exponential { kappa } = self.reward {
                self.delay.mgf(kappa)?;
            }
        }
        Ok(())
    }
}

/// Law of one benchmark column given its time parameter `t`.
///
/// Exponential laws have mean `t`, uniform laws are `Uniform(0, t)` and
/// truncated normals are `N(t, (t/2)²)` restricted to `[0, 2t]`.
pub fn case_law<T: Real>(kind: &str, t: T) -> Result<DistributionSpec<T>> {
    match kind {
        "exponential" => DistributionSpec::exponential(t),
        "uniform" => DistributionSpec::uniform(T::zero(), t),
        "truncnorm" => DistributionSpec::truncated_normal(t, t / T::lit(2.0), T::zero(), t + t),
        _ => Err(Error::invalid("kind", format!("unknown family {kind}"))),
    }
}

/// Service/delay families of cases A to F.
pub const CASES: [(&str, &str, &str); 6] = [
    ("A", "exponential", "exponential"),
    ("B", "exponential", "uniform"),
    ("C", "uniform", "uniform"),
    ("D", "uniform", "exponential"),
    ("E", "exponential", "truncnorm"),
    ("F", "truncnorm", "truncnorm"),
];

/// `(t_s, t_d)` rows of every case.
pub const CASE_TIMES: [(f64, f64); 2] = [(1.0, 0.33), (0.5, 0.1667)];

/// The twelve benchmark experiments (`A1`, `A2`, …, `F2`).
pub fn benchmark_cases<T: Real>(kappa: T, seeds: &[u64]) -> Result<Vec<ExperimentSpec<T>>> {
    let reward = RewardSpec::exponential(kappa)?;
    let mut out = Vec::new();
    for (name, sk, dk) in CASES {
        for (row, (ts, td)) in CASE_TIMES.iter().enumerate() {
            let mut spec = ExperimentSpec::new(
                format!("{name}{}", row + 1),
                case_law(sk, T::lit(*ts))?,
                case_law(dk, T::lit(*td))?,
                reward,
            );
            spec.seeds = seeds.to_vec();
            out.push(spec);
        }
    }
    Ok(out)
}

/// Copies of `specs` for each `κ`, ids suffixed with `@κ`.
pub fn kappa_sweep<T: Real>(specs: &[ExperimentSpec<T>], kappas: &[T]) -> Result<Vec<ExperimentSpec<T>>> {
    let mut out = Vec::new();
    for &k in kappas {
        for s in specs {
            let mut c = s.clone();
            c.reward = RewardSpec::exponential(k)?;
            c.id = format!("{}@{}", s.id, fmt_num(k));
            out.push(c);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow<T> {
    pub case: String,
    pub seed: u64,
    /// `None` for polynomial rewards.
    pub kappa: Option<T>,
    /// Grid maximum of the surrogate.
    pub g_sur: Option<T>,
    /// Grid maximum of the simulated reward.
    pub g_sim: Option<T>,
    /// Reward of the learned policy over the reporting window.
    pub g_be: Option<T>,
    /// Surrogate at the posterior lag `β/α`.
    pub g_tb: Option<T>,
    /// Lag maximising the surrogate on the grid.
    pub sur_lag: Option<T>,
    pub bayes_lag: Option<T>,
}

fn run_row<T: Real>(spec: &ExperimentSpec<T>, seed: u64) -> Result<SuiteRow<T>> {
    let grid = spec.lag_grid();
    let kappa = match spec.reward {
        RewardSpec::Exponential { kappa } => Some(kappa),
        _ => None,
    };
    let mut row = SuiteRow {
        case: spec.id.clone(),
        seed,
        kappa,
        g_sur: None,
        g_sim: None,
        g_be: None,
        g_tb: None,
        sur_lag: None,
        bayes_lag: None,
    };
    let surrogate = spec.has(Method::Surrogate) && spec.surrogate_available();
    if surrogate {
        let r = optimize(&spec.service, &spec.delay, &spec.reward, &grid, 0, seed, Objective::Surrogate)?;
        row.g_sur = Some(r.best_reward);
        row.sur_lag = Some(r.best_lag);
    }
    if spec.has(Method::Grid) {
        let r = optimize(&spec.service, &spec.delay, &spec.reward, &grid, spec.grid_jobs, seed, Objective::Simulated)?;
        row.g_sim = Some(r.best_reward);
    }
    if spec.has(Method::Bayes) {
        let run = run_adaptive(
            &spec.service,
            &spec.delay,
            &spec.schedule,
            &spec.reward,
            spec.n,
            &spec.bayes,
            seed,
            spec.reporting,
        )?;
        row.g_be = match &run.reward {
            crate::simulator::RewardReport::Point(e) => Some(e.value),
            crate::simulator::RewardReport::Series(s) => s.last().copied(),
        };
        let lag = run.posterior.mean_lag();
        row.bayes_lag = Some(lag);
        if let (true, Some(k)) = (surrogate, kappa) {
            row.g_tb = Some(surrogate_reward(&spec.service, &spec.delay, k, lag)?);
        }
    }
    Ok(row)
}

/// One row per `(experiment, seed)`, in input order.
pub fn run_suite<T: Real>(specs: &[ExperimentSpec<T>]) -> Result<Vec<SuiteRow<T>>> {
    let mut ids = std::collections::HashSet::new();
    for s in specs {
        s.validate()?;
        if !ids.insert(s.id.as_str()) {
            return Err(Error::invalid("id", format!("duplicate experiment id {}", s.id)));
        }
    }
    let jobs: Vec<(&ExperimentSpec<T>, u64)> = specs
        .iter()
        .flat_map(|s| s.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    jobs.into_par_iter().map(|(s, seed)| run_row(s, seed)).collect()
}

pub fn suite_table<T: Real>(rows: &[SuiteRow<T>]) -> Table {
    let mut t = Table::new(&["case", "seed", "kappa", "G_sur", "G_sim", "G_be", "G_tb"]);
    for r in rows {
        t.push(vec![
            r.case.clone(),
            r.seed.to_string(),
            fmt_opt(r.kappa),
            fmt_opt(r.g_sur),
            fmt_opt(r.g_sim),
            fmt_opt(r.g_be),
            fmt_opt(r.g_tb),
        ]);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Gradual,
    Abrupt,
}

/// Schedule moving the means from `from` to `to`.
///
/// `Abrupt` alternates between the two every `segment` jobs; `Gradual`
/// ramps linearly over all `n` jobs.
pub fn shift_schedule<T: Real>(kind: ShiftKind, from: (T, T), to: (T, T), n: usize, segment: usize) -> Result<ParamSchedule<T>> {
    match kind {
        ShiftKind::Gradual => Ok(ParamSchedule::GradualLinear {
            service: (from.0, to.0),
            delay: (from.1, to.1),
            over: n,
        }),
        ShiftKind::Abrupt => {
            if segment == 0 {
                return Err(Error::invalid("segment", "must be positive"));
            }
            let count = n.div_ceil(segment);
            Ok(ParamSchedule::AbruptPiecewise(
                (0..count)
                    .map(|i| {
                        let (s, d) = if i % 2 == 0 { from } else { to };
                        Segment {
                            jobs: segment,
                            service_mean: s,
                            delay_mean: d,
                        }
                    })
                    .collect(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftPoint<T> {
    /// 1-based index of the last job in the window.
    pub index: usize,
    pub g_be: T,
    /// Exact grid optimum at this job's means.
    pub g_ref: T,
    pub service_mean: T,
    pub delay_mean: T,
    /// Within the burn-in after a change point.
    pub transient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftOptions {
    pub width: usize,
    pub burn_in: usize,
    /// Emit one point every `stride` jobs.
    pub stride: usize,
}

impl Default for ShiftOptions {
    fn default() -> Self {
        ShiftOptions {
            width: DEFAULT_SLIDING,
            burn_in: DEFAULT_SHIFT_BURN_IN,
            stride: 100,
        }
    }
}

/// Learned-policy reward along `base.schedule` next to the best fixed-lag
/// reward for the parameters in force.
pub fn mean_shift_run<T: Real>(base: &ExperimentSpec<T>, seed: u64, opts: ShiftOptions) -> Result<Vec<ShiftPoint<T>>> {
    base.validate()?;
    if opts.stride == 0 {
        return Err(Error::invalid("stride", "must be positive"));
    }
    let run = run_adaptive(
        &base.service,
        &base.delay,
        &base.schedule,
        &base.reward,
        base.n,
        &base.bayes,
        seed,
        Reporting::Sliding(opts.width),
    )?;
    let series = run.reward.series().unwrap_or(&[]);
    // series[i] ends at job position i + width − 1.
    let positions: Vec<usize> = (opts.width - 1..base.n).step_by(opts.stride).collect();
    let means: Vec<(T, T)> = positions
        .iter()
        .map(|&j| base.schedule.means_at(j))
        .collect::<Result<_>>()?;
    let mut unique: Vec<(T, T)> = Vec::new();
    for m in &means {
        if !unique.contains(m) {
            unique.push(*m);
        }
    }
    let refs: Vec<T> = unique
        .par_iter()
        .map(|&(ts, td)| {
            let s = rescale(&base.service, ts)?;
            let d = rescale(&base.delay, td)?;
            let grid = base.grid.unwrap_or_else(|| LagGrid::default_for(&s));
            Ok(optimize(&s, &d, &base.reward, &grid, 0, seed, Objective::Exact)?.best_reward)
        })
        .collect::<Result<_>>()?;
    let lookup: HashMap<(u64, u64), T> = unique
        .iter()
        .zip(&refs)
        .map(|(m, r)| ((m.0.f64().to_bits(), m.1.f64().to_bits()), *r))
        .collect();
    let change_points = change_points(&base.schedule);
    Ok(positions
        .iter()
        .zip(&means)
        .map(|(&j, m)| {
            let window_start = j + 1 - opts.width;
            let transient = j < opts.burn_in
                || change_points
                    .iter()
                    .any(|&c| c > 0 && j >= c && j < c + opts.burn_in || (window_start < c && c <= j));
            ShiftPoint {
                index: j + 1,
                g_be: series[window_start],
                g_ref: lookup[&(m.0.f64().to_bits(), m.1.f64().to_bits())],
                service_mean: m.0,
                delay_mean: m.1,
                transient,
            }
        })
        .collect())
}

/// 0-based positions where an abrupt schedule changes segment.
fn change_points<T: Real>(schedule: &ParamSchedule<T>) -> Vec<usize> {
    match schedule {
        ParamSchedule::AbruptPiecewise(segs) => segs
            .iter()
            .scan(0, |start, s| {
                let c = *start;
                *start += s.jobs;
                Some(c)
            })
            .skip(1)
            .collect(),
        _ => Vec::new(),
    }
}

pub fn shift_table<T: Real>(points: &[ShiftPoint<T>]) -> Table {
    let mut t = Table::new(&["index", "G_be_window", "G_ref", "t_s", "t_d", "transient"]);
    for p in points {
        t.push(vec![
            p.index.to_string(),
            fmt_num(p.g_be),
            fmt_num(p.g_ref),
            fmt_num(p.service_mean),
            fmt_num(p.delay_mean),
            (p.transient as u8).to_string(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_matrix() {
        let cases = benchmark_cases(1.0f64, &[0]).unwrap();
        assert_eq!(cases.len(), 12);
        assert_eq!(cases[0].id, "A1");
        assert_eq!(cases[11].id, "F2");
        assert!(cases[4].surrogate_available());
        assert!(!cases[8].surrogate_available());
        assert!(!cases[10].surrogate_available());
        assert_eq!(cases[5].service, DistributionSpec::uniform(0.0, 0.5).unwrap());
        let f = case_law("truncnorm", 1.0f64).unwrap();
        assert!((f.mean() - 1.0).abs() < 1e-12);
        assert!(case_law::<f64>("gamma", 1.0).is_err());
        let sweep = kappa_sweep(&cases[..2], &[0.5, 2.0]).unwrap();
        assert_eq!(sweep.len(), 4);
        assert_eq!(sweep[3].id, "A2@2");
    }

    fn quick(spec: &mut ExperimentSpec<f64>) {
        spec.n = 10_000;
        spec.grid_jobs = 20_000;
        spec.reporting = Reporting::LastK(5000);
        spec.grid = Some(LagGrid::new(0.0, 1.0, 0.1).unwrap());
    }

    #[test]
    fn suite_rows_and_dashes() {
        let mut cases = benchmark_cases(1.0f64, &[3]).unwrap();
        cases.iter_mut().for_each(quick);
        let picks = vec![cases[0].clone(), cases[11].clone()];
        let rows = run_suite(&picks).unwrap();
        assert_eq!(rows.len(), 2);
        let a = &rows[0];
        let direct = surrogate_reward(&picks[0].service, &picks[0].delay, 1.0, a.sur_lag.unwrap()).unwrap();
        assert!((a.g_sur.unwrap() - direct).abs() < 1e-9);
        assert!(a.g_tb.unwrap() <= a.g_sur.unwrap());
        assert!(a.g_be.unwrap() <= a.g_sur.unwrap());
        let f = &rows[1];
        assert!(f.g_sur.is_none() && f.g_tb.is_none());
        assert!(f.g_sim.is_some() && f.g_be.is_some());
        let csv = suite_table(&rows).to_csv();
        assert!(csv.starts_with("case,seed,kappa,G_sur,G_sim,G_be,G_tb\n"));
        assert!(csv.lines().nth(2).unwrap().starts_with("F2,3,1,,"));
        assert_eq!(run_suite(&picks).unwrap(), rows);
        let dup = vec![cases[0].clone(), cases[0].clone()];
        assert!(run_suite(&dup).is_err());
    }

    #[test]
    fn abrupt_schedule_layout() {
        let s = shift_schedule(ShiftKind::Abrupt, (1.0f64, 0.33), (0.5, 0.1667), 25_000, 10_000).unwrap();
        assert_eq!(s.means_at(9_999).unwrap(), (1.0, 0.33));
        assert_eq!(s.means_at(10_000).unwrap(), (0.5, 0.1667));
        assert_eq!(s.means_at(24_999).unwrap(), (1.0, 0.33));
        assert_eq!(change_points(&s), vec![10_000, 20_000]);
        let g = shift_schedule(ShiftKind::Gradual, (1.0f64, 0.33), (0.5, 0.1667), 100, 0).unwrap();
        assert_eq!(g.means_at(99).unwrap(), (0.5, 0.1667));
    }

    #[test]
    fn stationary_shift_has_constant_reference() {
        let s = DistributionSpec::exponential(1.0f64).unwrap();
        let d = DistributionSpec::exponential(0.33).unwrap();
        let mut spec = ExperimentSpec::new("st", s, d, RewardSpec::exponential(1.0).unwrap());
        spec.n = 6000;
        let pts = mean_shift_run(&spec, 1, ShiftOptions { width: 1000, burn_in: 500, stride: 250 }).unwrap();
        assert_eq!(pts[0].index, 1000);
        assert!(pts.iter().all(|p| p.g_ref == pts[0].g_ref && !p.transient));
        assert_eq!(pts.len(), 21);
    }

    #[test]
    fn abrupt_points_flag_transients() {
        let s = DistributionSpec::exponential(1.0f64).unwrap();
        let d = DistributionSpec::exponential(0.33).unwrap();
        let mut spec = ExperimentSpec::new("ab", s, d, RewardSpec::exponential(1.0).unwrap());
        spec.n = 20_000;
        spec.schedule = shift_schedule(ShiftKind::Abrupt, (1.0, 0.33), (0.5, 0.1667), 20_000, 10_000).unwrap();
        let pts = mean_shift_run(&spec, 2, ShiftOptions::default()).unwrap();
        let refs: Vec<f64> = pts.iter().map(|p| p.g_ref).collect();
        assert!(refs[0] < *refs.last().unwrap());
        for p in &pts {
            let in_change = p.index > 10_000 && p.index <= 12_000;
            if in_change {
                assert!(p.transient);
            }
            if p.index > 12_000 || (p.index > 2_000 && p.index <= 10_000) {
                assert!(!p.transient, "{}", p.index);
            }
        }
    }
}
