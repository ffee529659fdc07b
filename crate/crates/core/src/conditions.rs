//! Sufficient conditions for the no-lag policy to maximise the reward.
//!
//! Every check returns a [`ConditionReport`] with both sides of its
//! inequality and a three-valued verdict. A condition that fails says
//! nothing about the optimum; only `Holds` carries information.

use rayon::prelude::*;
use serde::Serialize;

use crate::analytics::{delta_star, expected_wait_auto};
use crate::distributions::{prob_diff_exceeds, DistributionSpec};
use crate::error::{Error, Result};
use crate::reward::{RewardFn, RewardSpec};
use crate::scalar::Real;

/// Relative slack when comparing the two sides, so that parameter points
/// lying exactly on a boundary are not split by rounding.
pub const VERDICT_RTOL: f64 = 1e-12;
/// Slack for the monotonicity probe of `Δ²·P(S − D > Δ)`.
pub const ASSUMPTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionId {
    Thm1General,
    Cor1Exponential,
    Cor2Polynomial,
    Thm2Cond1,
    Thm2Cond2,
}

impl ConditionId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionId::Thm1General => "thm1_general",
            ConditionId::Cor1Exponential => "cor1_exponential",
            ConditionId::Cor2Polynomial => "cor2_polynomial",
            ConditionId::Thm2Cond1 => "thm2_cond1",
            ConditionId::Thm2Cond2 => "thm2_cond2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    Indeterminate,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Holds => "holds",
            Verdict::Fails => "fails",
            Verdict::Indeterminate => "indeterminate",
        }
    }
}

/// Direction of the inequality `lhs ⋄ rhs` that makes the condition hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Le,
    Lt,
    Ge,
}

impl Relation {
    fn verdict<T: Real>(self, lhs: T, rhs: T) -> Verdict {
        if !lhs.is_finite() || rhs.is_nan() {
            return Verdict::Indeterminate;
        }
        let slack = T::lit(VERDICT_RTOL) * lhs.abs().max(if rhs.is_finite() { rhs.abs() } else { T::zero() });
        let ok = match self {
            Relation::Le => lhs <= rhs + slack,
            Relation::Lt => lhs < rhs,
            Relation::Ge => lhs >= rhs - slack,
        };
        if ok {
            Verdict::Holds
        } else {
            Verdict::Fails
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport<T> {
    pub condition: ConditionId,
    pub lhs: T,
    /// `+∞` when `P(S − D > 0) = 0`.
    pub rhs: T,
    pub relation: Relation,
    pub verdict: Verdict,
    /// Outcome of [`verify_assumption`] for the tail-bound checks; `None`
    /// where the proof does not rely on it.
    pub assumption_checked: Option<bool>,
    pub notes: String,
}

impl<T: Real> ConditionReport<T> {
    fn evaluated(condition: ConditionId, lhs: T, rhs: T, relation: Relation) -> Self {
        ConditionReport {
            condition,
            lhs,
            rhs,
            relation,
            verdict: relation.verdict(lhs, rhs),
            assumption_checked: None,
            notes: String::new(),
        }
    }

    fn indeterminate(condition: ConditionId, relation: Relation, why: &Error) -> Self {
        ConditionReport {
            condition,
            lhs: T::nan(),
            rhs: T::nan(),
            relation,
            verdict: Verdict::Indeterminate,
            assumption_checked: None,
            notes: why.to_string(),
        }
    }

    pub fn holds(&self) -> bool {
        self.verdict == Verdict::Holds
    }
}

/// `1/√p − √p`, with `+∞` at `p = 0`.
fn tail_rhs<T: Real>(p: T) -> T {
    if p <= T::zero() {
        T::infinity()
    } else {
        T::one() / p.sqrt() - p.sqrt()
    }
}

fn first_theorem_report<T: Real>(
    id: ConditionId,
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    lhs: Result<T>,
) -> ConditionReport<T> {
    let p = prob_diff_exceeds(service, delay, T::zero());
    let mut report = match lhs {
        Ok(lhs) => ConditionReport::evaluated(id, lhs, tail_rhs(p), Relation::Le),
        Err(e) => ConditionReport::indeterminate(id, Relation::Le, &e),
    };
    if p <= T::zero() {
        report.notes.push_str("P(S - D > 0) = 0; rhs unbounded");
    }
    report.assumption_checked = verify_assumption(service, delay, &default_probe_grid())
        .ok()
        .map(|a| a.holds);
    report
}

/// `E[g(S + S')]` for two independent copies of the service time.
fn pair_expectation<T: Real, G: Fn(T) -> T>(service: &DistributionSpec<T>, g: G) -> Result<T> {
    let mut err = None;
    let v = service.expect(
        |x| match service.expect(|y| g(x + y), &[]) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                T::zero()
            }
        },
        &[],
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// General condition for any non-increasing convex reward:
/// `E[D + S + 1]·√E[f′(S)²] / E[f(S + S₋₁)] ≤ 1/√p − √p`, `p = P(S₋₁ − D > 0)`.
pub fn check_general<T: Real, F: RewardFn<T> + ?Sized>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    f: &F,
) -> ConditionReport<T> {
    let lhs = (|| {
        let scale = delay.mean() + service.mean() + T::one();
        let slope2 = service.expect(
            |x| {
                let d = f.deriv(x);
                d * d
            },
            &[],
        )?;
        let pair = pair_expectation(service, |x| f.eval(x))?;
        Ok(scale * slope2.sqrt() / pair)
    })();
    first_theorem_report(ConditionId::Thm1General, service, delay, lhs)
}

/// Specialisation to `exp(−κT)`:
/// `κ·E[D + S + 1]·√M_S(−2κ) / M_S(−κ)² ≤ 1/√p − √p`.
pub fn check_exponential<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    kappa: T,
) -> ConditionReport<T> {
    let lhs = (|| {
        if !(kappa > T::zero()) {
            return Err(Error::invalid("kappa", "must be > 0"));
        }
        let m1 = service.mgf(-kappa)?;
        let m2 = service.mgf(-(kappa + kappa))?;
        Ok(kappa * (delay.mean() + service.mean() + T::one()) * m2.sqrt() / (m1 * m1))
    })();
    first_theorem_report(ConditionId::Cor1Exponential, service, delay, lhs)
}

/// Specialisation to `(T + 1)^(−γ)`:
/// `γ·E[D + S + 1]·√E[(S + 1)^(−2γ−2)] / E[(S + S₋₁ + 1)^(−γ)] ≤ 1/√p − √p`.
pub fn check_polynomial<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    gamma: T,
) -> ConditionReport<T> {
    let lhs = (|| {
        if !(gamma > T::zero()) {
            return Err(Error::invalid("gamma", "must be > 0"));
        }
        let two = T::lit(2.0);
        let neg = service.expect(|x| (x + T::one()).powf(-two * gamma - two), &[])?;
        let pair = pair_expectation(service, |x| (x + T::one()).powf(-gamma))?;
        Ok(gamma * (delay.mean() + service.mean() + T::one()) * neg.sqrt() / pair)
    })();
    first_theorem_report(ConditionId::Cor2Polynomial, service, delay, lhs)
}

/// Runs the tail-bound check matching the reward.
pub fn check_reward<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    f: &RewardSpec<T>,
) -> ConditionReport<T> {
    match *f {
        RewardSpec::Exponential { kappa } => check_exponential(service, delay, kappa),
        RewardSpec::Polynomial { gamma } => check_polynomial(service, delay, gamma),
    }
}

/// Both surrogate conditions:
/// (1) `M_S(−κ)·M_D(κ) ≥ 1`;
/// (2) `Δ* + E[D] + E[W]|_{Δ=0} < P(D > S)/κ`.
pub fn check_surrogate<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    kappa: T,
) -> (ConditionReport<T>, ConditionReport<T>) {
    let product = (|| {
        if !(kappa > T::zero()) {
            return Err(Error::invalid("kappa", "must be > 0"));
        }
        Ok(service.mgf(-kappa)? * delay.mgf(kappa)?)
    })();
    let product = match product {
        Ok(p) => p,
        Err(e) => {
            return (
                ConditionReport::indeterminate(ConditionId::Thm2Cond1, Relation::Ge, &e),
                ConditionReport::indeterminate(ConditionId::Thm2Cond2, Relation::Lt, &e),
            )
        }
    };
    let cond1 = ConditionReport::evaluated(ConditionId::Thm2Cond1, product, T::one(), Relation::Ge);

    let cond2 = (|| {
        let ds = delta_star(service, delay, kappa)?;
        let ew0 = expected_wait_auto(service, delay, T::zero())?;
        Ok(ds + delay.mean() + ew0)
    })();
    let cond2 = match cond2 {
        Ok(lhs) => {
            let p_not_exceed = T::one() - prob_diff_exceeds(service, delay, T::zero());
            let mut r = ConditionReport::evaluated(ConditionId::Thm2Cond2, lhs, p_not_exceed / kappa, Relation::Lt);
            if let (DistributionSpec::Deterministic { value: a }, DistributionSpec::Deterministic { value: b }) =
                (*service, *delay)
            {
                if a == b {
                    r.notes.push_str("S = D with probability one; ties counted into P(D >= S)");
                }
            }
            r
        }
        Err(e) => ConditionReport::indeterminate(ConditionId::Thm2Cond2, Relation::Lt, &e),
    };
    (cond1, cond2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck<T> {
    /// `Δ²·P(S − D > Δ)` is non-increasing across the probe grid.
    pub holds: bool,
    /// Largest increase between adjacent probes: `(Δ_a, Δ_b, increase)`.
    pub worst_violation: Option<(T, T, T)>,
    /// `max Δ²·P(S − D > Δ) ≤ P(S − D > 0)` over the grid, which is the
    /// inequality the monotonicity assumption is used to obtain.
    pub bound_holds: bool,
}

/// 64 log-spaced points in `(1, 20]`.
pub fn default_probe_grid<T: Real>() -> Vec<T> {
    (1..=64).map(|i| T::lit(20f64.powf(i as f64 / 64.0))).collect()
}

/// Probes `Δ²·P(S₋₁ − D > Δ)` for monotone decrease on `probe_grid ⊂ [1, ∞)`.
pub fn verify_assumption<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    probe_grid: &[T],
) -> Result<AssumptionCheck<T>> {
    if probe_grid.len() < 20 {
        return Err(Error::invalid("probe_grid", "needs at least 20 points"));
    }
    if probe_grid.iter().any(|&x| !(x >= T::one()) || !x.is_finite()) {
        return Err(Error::invalid("probe_grid", "points must lie in [1, inf)"));
    }
    if probe_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("probe_grid", "points must be strictly increasing"));
    }
    let values: Vec<T> = probe_grid
        .iter()
        .map(|&x| x * x * prob_diff_exceeds(service, delay, x))
        .collect();
    let tol = T::lit(ASSUMPTION_TOL);
    let mut worst: Option<(T, T, T)> = None;
    for (i, w) in values.windows(2).enumerate() {
        let rise = w[1] - w[0];
        if rise > tol && worst.map_or(true, |(_, _, r)| rise > r) {
            worst = Some((probe_grid[i], probe_grid[i + 1], rise));
        }
    }
    let peak = values.iter().copied().fold(T::zero(), T::max);
    let p0 = prob_diff_exceeds(service, delay, T::zero());
    Ok(AssumptionCheck {
        holds: worst.is_none(),
        worst_violation: worst,
        bound_holds: peak <= p0 + tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Exponential service and delay.
    ExpExp,
    /// `Uniform(0, 2·mean)` service and delay.
    UnifUnif,
}

impl Family {
    pub fn laws<T: Real>(&self, ts: T, td: T) -> Result<(DistributionSpec<T>, DistributionSpec<T>)> {
        match self {
            Family::ExpExp => Ok((DistributionSpec::exponential(ts)?, DistributionSpec::exponential(td)?)),
            Family::UnifUnif => Ok((
                DistributionSpec::uniform_with_mean(ts)?,
                DistributionSpec::uniform_with_mean(td)?,
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    Thm2Cond1,
    Cor1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionCell<T> {
    pub t_s: T,
    pub t_d: T,
    pub verdict: Verdict,
}

/// Classifies every `(t_s, t_d)` cell; service means vary slowest.
pub fn region_scan<T: Real>(
    ts_grid: &[T],
    td_grid: &[T],
    kappa: T,
    family: Family,
    mode: ScanMode,
) -> Result<Vec<RegionCell<T>>> {
    if ts_grid.iter().chain(td_grid).any(|&x| !(x > T::zero())) {
        return Err(Error::invalid("grid", "means must be positive"));
    }
    let cells: Vec<(T, T)> = ts_grid
        .iter()
        .flat_map(|&ts| td_grid.iter().map(move |&td| (ts, td)))
        .collect();
    cells
        .into_par_iter()
        .map(|(ts, td)| {
            let (s, d) = family.laws(ts, td)?;
            let verdict = match mode {
                ScanMode::Thm2Cond1 => check_surrogate(&s, &d, kappa).0.verdict,
                ScanMode::Cor1 => check_exponential(&s, &d, kappa).verdict,
            };
            Ok(RegionCell { t_s: ts, t_d: td, verdict })
        })
        .collect()
}
