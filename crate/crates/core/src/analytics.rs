//! Analytic and semi-analytic evaluation of the waiting time, the long-run
//! reward `G = E[f(W + S)] / (Δ + E[D] + E[W])`, its exponential surrogate
//! and the surrogate's saturation lag.
//!
//! This module is the oracle the simulator is checked against, so none of
//! it draws on the job recursion.

use std::cell::Cell;

use rayon::prelude::*;

use crate::distributions::{prob_diff_exceeds, DistributionSpec, NUMERIC_TOL};
use crate::error::{Error, Result};
use crate::quadrature::integrate_split;
use crate::reward::RewardFn;
use crate::rng::{substream, Purpose};
use crate::scalar::{pos, Real};
use crate::stats::{mean_se, Estimate};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMethod<T> {
    ClosedForm,
    NumericIntegration { tol: T },
    MonteCarlo { n: usize, seed: u64 },
}

impl<T: Real> EvalMethod<T> {
    pub fn numeric() -> Self {
        EvalMethod::NumericIntegration {
            tol: T::lit(NUMERIC_TOL),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EvalMethod::NumericIntegration { tol } if !(tol > T::zero()) => {
                Err(Error::invalid("tol", "must be > 0"))
            }
            EvalMethod::MonteCarlo { n, .. } if n < 10_000 => Err(Error::invalid("n", "must be >= 10000")),
            _ => Ok(()),
        }
    }
}

/// Records the first error raised inside a quadrature closure.
struct ErrorSlot(Cell<Option<Error>>);

impl ErrorSlot {
    fn new() -> Self {
        ErrorSlot(Cell::new(None))
    }

    fn take<T: Real>(&self, r: Result<T>) -> T {
        match r {
            Ok(v) => v,
            Err(e) => {
                let prev = self.0.take();
                self.0.set(Some(prev.unwrap_or(e)));
                T::zero()
            }
        }
    }

    fn check(self) -> Result<()> {
        match self.0.into_inner() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

fn exp_rates<T: Real>(s: &DistributionSpec<T>, d: &DistributionSpec<T>) -> Option<(T, T)> {
    match (*s, *d) {
        (DistributionSpec::Exponential { mean: ms }, DistributionSpec::Exponential { mean: md }) => {
            Some((T::one() / ms, T::one() / md))
        }
        _ => None,
    }
}

fn point_masses<T: Real>(s: &DistributionSpec<T>, d: &DistributionSpec<T>) -> Option<(T, T)> {
    match (*s, *d) {
        (DistributionSpec::Deterministic { value: vs }, DistributionSpec::Deterministic { value: vd }) => {
            Some((vs, vd))
        }
        _ => None,
    }
}

fn check_lag<T: Real>(lag: T) -> Result<()> {
    if lag >= T::zero() && lag.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("lag", format!("must be finite and >= 0, got {lag}")))
    }
}

/// `E[max(S − D − lag, 0)]`.
pub fn expected_wait<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    lag: T,
    method: EvalMethod<T>,
) -> Result<Estimate<T>> {
    check_lag(lag)?;
    method.validate()?;
    match method {
        EvalMethod::ClosedForm => {
            if let Some((ls, ld)) = exp_rates(service, delay) {
                Ok(Estimate::exact(ld / (ls + ld) * (-ls * lag).exp() / ls))
            } else if let Some((vs, vd)) = point_masses(service, delay) {
                Ok(Estimate::exact(pos(vs - lag - vd)))
            } else {
                Err(Error::ClosedFormUnavailable(format!("E[W] for {service} / {delay}")))
            }
        }
        EvalMethod::NumericIntegration { tol } => expected_wait_numeric(service, delay, lag, tol).map(Estimate::exact),
        EvalMethod::MonteCarlo { n, seed } => {
            let mut rs = substream(seed, Purpose::MonteCarlo, &[1]);
            let mut rd = substream(seed, Purpose::MonteCarlo, &[2]);
            Ok(mean_se((0..n).map(|_| pos(service.sample(&mut rs) - lag - delay.sample(&mut rd)))))
        }
    }
}

fn expected_wait_numeric<T: Real>(s: &DistributionSpec<T>, d: &DistributionSpec<T>, lag: T, tol: T) -> Result<T> {
    if let DistributionSpec::Deterministic { value } = *d {
        return s.stop_loss(value + lag);
    }
    let (slo, shi) = s.support();
    let slot = ErrorSlot::new();
    let v = d.expect_tol(&mut |y| slot.take(s.stop_loss(y + lag)), &[slo - lag, shi - lag], tol)?;
    slot.check()?;
    Ok(v)
}

/// Closed form when available, numeric integration otherwise.
pub fn expected_wait_auto<T: Real>(s: &DistributionSpec<T>, d: &DistributionSpec<T>, lag: T) -> Result<T> {
    match expected_wait(s, d, lag, EvalMethod::ClosedForm) {
        Ok(e) => Ok(e.value),
        Err(Error::ClosedFormUnavailable(_)) => expected_wait(s, d, lag, EvalMethod::numeric()).map(|e| e.value),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaitDerivative<T> {
    pub value: T,
    /// `S − D` has an atom at the lag, so only one-sided derivatives exist.
    pub at_kink: bool,
}

/// `dE[W]/dΔ = −P(S − D > Δ)`.
pub fn wait_derivative<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    lag: T,
) -> Result<WaitDerivative<T>> {
    check_lag(lag)?;
    let at_kink = matches!(point_masses(service, delay), Some((vs, vd)) if vs - vd == lag);
    Ok(WaitDerivative {
        value: -prob_diff_exceeds(service, delay, lag),
        at_kink,
    })
}

/// Nodes in the `h(w) = E_S[f(w + S)]` interpolation table.
pub const KERNEL_NODES: usize = 2048;
/// Quantile of `S` spanned by the table; beyond it `h` is integrated directly.
pub const KERNEL_SPAN_QUANTILE: f64 = 0.999;

/// `h(w) = E_S[f(w + S)]`, the conditional reward given the wait.
///
/// Exponential rewards factorise exactly as `exp(−κw)·M_S(−κ)`. Other
/// rewards are tabulated with values and slopes and read back through cubic
/// Hermite interpolation.
pub struct RewardKernel<'a, T: Real, F: RewardFn<T> + ?Sized> {
    service: DistributionSpec<T>,
    reward: &'a F,
    tol: T,
    repr: KernelRepr<T>,
}

enum KernelRepr<T> {
    Factorised { kappa: T, mgf: T },
    PointMass { value: T },
    Table { step: T, values: Vec<T>, slopes: Vec<T> },
}

impl<'a, T: Real, F: RewardFn<T> + ?Sized> RewardKernel<'a, T, F> {
    pub fn build(service: &DistributionSpec<T>, reward: &'a F, tol: T) -> Result<Self> {
        let repr = if let Some(kappa) = reward.exponential_rate() {
            KernelRepr::Factorised {
                kappa,
                mgf: service.mgf(-kappa)?,
            }
        } else if let DistributionSpec::Deterministic { value } = *service {
            KernelRepr::PointMass { value }
        } else {
            let span = service.quantile(KERNEL_SPAN_QUANTILE);
            let step = span / T::lit((KERNEL_NODES - 1) as f64);
            let nodes: Vec<Result<(T, T)>> = (0..KERNEL_NODES)
                .into_par_iter()
                .map(|i| {
                    let w = step * T::lit(i as f64);
                    let v = service.expect_tol(&mut |s| reward.eval(w + s), &[], tol)?;
                    let m = service.expect_tol(&mut |s| reward.deriv(w + s), &[], tol)?;
                    Ok((v, m))
                })
                .collect();
            let (values, slopes) = nodes.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
            KernelRepr::Table { step, values, slopes }
        };
        Ok(RewardKernel {
            service: *service,
            reward,
            tol,
            repr,
        })
    }

    pub fn eval(&self, w: T) -> Result<T> {
        match &self.repr {
            KernelRepr::Factorised { kappa, mgf } => Ok((-*kappa * w).exp() * *mgf),
            KernelRepr::PointMass { value } => Ok(self.reward.eval(w + *value)),
            KernelRepr::Table { step, values, slopes } => {
                let x = w / *step;
                let i = x.floor().to_usize().unwrap_or(usize::MAX);
                if i + 1 >= values.len() {
                    let direct = self.service.expect_tol(&mut |s| self.reward.eval(w + s), &[], self.tol)?;
                    return Ok(direct);
                }
                let t = x - T::lit(i as f64);
                let (t2, t3) = (t * t, t * t * t);
                let two = T::lit(2.0);
                let three = T::lit(3.0);
                let h00 = two * t3 - three * t2 + T::one();
                let h10 = t3 - two * t2 + t;
                let h01 = three * t2 - two * t3;
                let h11 = t3 - t2;
                Ok(h00 * values[i] + h10 * *step * slopes[i] + h01 * values[i + 1] + h11 * *step * slopes[i + 1])
            }
        }
    }
}

/// Reward evaluation for one `(S, D, f)` triple at many lags, reusing the
/// conditional-reward table between lags.
pub struct RewardModel<'a, T: Real, F: RewardFn<T> + ?Sized> {
    pub service: DistributionSpec<T>,
    pub delay: DistributionSpec<T>,
    kernel: RewardKernel<'a, T, F>,
    tol: T,
}

impl<'a, T: Real, F: RewardFn<T> + ?Sized> RewardModel<'a, T, F> {
    pub fn new(service: &DistributionSpec<T>, delay: &DistributionSpec<T>, reward: &'a F, tol: T) -> Result<Self> {
        Ok(RewardModel {
            service: *service,
            delay: *delay,
            kernel: RewardKernel::build(service, reward, tol)?,
            tol,
        })
    }

    /// `E[f(W + S)]` by conditioning on `(S₋₁, D)`.
    pub fn numerator(&self, lag: T) -> Result<T> {
        let s = &self.service;
        let slot = ErrorSlot::new();
        let h0 = self.kernel.eval(T::zero())?;
        let inner = |c: T| -> T {
            match *s {
                DistributionSpec::Deterministic { value } => slot.take(self.kernel.eval(pos(value - c))),
                _ => {
                    let (lo, _) = s.support();
                    let hi = s.effective_upper();
                    let start = lo.max(c);
                    let tail = integrate_split(
                        |x| slot.take(self.kernel.eval(x - c)) * s.pdf(x),
                        start,
                        hi,
                        &[],
                        self.tol,
                    );
                    h0 * s.cdf(c) + slot.take(tail.map(|r| r.value))
                }
            }
        };
        let value = match self.delay {
            DistributionSpec::Deterministic { value } => inner(lag + value),
            d => {
                let (slo, shi) = s.support();
                d.expect_tol(&mut |y| inner(lag + y), &[slo - lag, shi - lag], self.tol)?
            }
        };
        slot.check()?;
        Ok(value)
    }

    pub fn numeric(&self, lag: T) -> Result<T> {
        check_lag(lag)?;
        let num = self.numerator(lag)?;
        let ew = expected_wait_numeric(&self.service, &self.delay, lag, self.tol)?;
        Ok(num / (lag + self.delay.mean() + ew))
    }

    /// Closed form where one exists, numeric integration otherwise.
    pub fn exact(&self, lag: T) -> Result<T> {
        match closed_form_reward(&self.service, &self.delay, self.kernel.reward, lag) {
            Ok(v) => Ok(v),
            Err(Error::ClosedFormUnavailable(_)) => self.numeric(lag),
            Err(e) => Err(e),
        }
    }
}

fn closed_form_reward<T: Real, F: RewardFn<T> + ?Sized>(
    s: &DistributionSpec<T>,
    d: &DistributionSpec<T>,
    f: &F,
    lag: T,
) -> Result<T> {
    if let Some((vs, vd)) = point_masses(s, d) {
        let w = pos(vs - lag - vd);
        return Ok(f.eval(w + vs) / (lag + vd + w));
    }
    match (exp_rates(s, d), f.exponential_rate()) {
        (Some((mu, nu)), Some(kappa)) => {
            // Given a positive wait, W is Exp(mu) by memorylessness, so
            // E[exp(−κW)] = 1 − p·κ/(mu + κ) with p = P(S − D > lag).
            let p = nu / (mu + nu) * (-mu * lag).exp();
            let ms = mu / (mu + kappa);
            Ok(ms * (T::one() - p * kappa / (mu + kappa)) / (lag + T::one() / nu + p / mu))
        }
        _ => Err(Error::ClosedFormUnavailable(format!("G for {s} / {d}"))),
    }
}

/// Long-run reward `G` at a deterministic lag.
pub fn reward_exact<T: Real, F: RewardFn<T> + ?Sized>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    f: &F,
    lag: T,
    method: EvalMethod<T>,
) -> Result<Estimate<T>> {
    check_lag(lag)?;
    method.validate()?;
    match method {
        EvalMethod::ClosedForm => closed_form_reward(service, delay, f, lag).map(Estimate::exact),
        EvalMethod::NumericIntegration { tol } => {
            RewardModel::new(service, delay, f, tol)?.numeric(lag).map(Estimate::exact)
        }
        EvalMethod::MonteCarlo { n, seed } => {
            let mut r_prev = substream(seed, Purpose::MonteCarlo, &[1]);
            let mut r_delay = substream(seed, Purpose::MonteCarlo, &[2]);
            let mut r_serv = substream(seed, Purpose::MonteCarlo, &[3]);
            let mut samples = Vec::with_capacity(n);
            let (mut sf, mut sw) = (T::zero(), T::zero());
            for _ in 0..n {
                let w = pos(service.sample(&mut r_prev) - lag - delay.sample(&mut r_delay));
                let v = f.eval(w + service.sample(&mut r_serv));
                sf = sf + v;
                sw = sw + w;
                samples.push((v, w));
            }
            let nn = T::lit(n as f64);
            let den = lag + delay.mean() + sw / nn;
            let g = sf / nn / den;
            // Delta method on z = f − G·(lag + E[D] + W).
            let z = mean_se(samples.iter().map(|&(v, w)| v - g * (lag + delay.mean() + w)));
            Ok(Estimate {
                value: g,
                std_error: z.std_error / den,
            })
        }
    }
}

/// Jensen upper bound on `G` for `f(T) = exp(−κT)`:
/// `M_S(−κ)·min(M_S(−κ)·e^{κΔ}·M_D(κ), 1) / (Δ + E[D] + E[W])`.
pub fn surrogate_reward<T: Real>(
    service: &DistributionSpec<T>,
    delay: &DistributionSpec<T>,
    kappa: T,
    lag: T,
) -> Result<T> {
    check_lag(lag)?;
    let ms = service.mgf(-kappa)?;
    let md = delay.mgf(kappa)?;
    let ew = expected_wait_auto(service, delay, lag)?;
    let clause = (ms * (kappa * lag).exp() * md).min(T::one());
    Ok(ms * clause / (lag + delay.mean() + ew))
}

/// Smallest lag at which the surrogate's MGF clause reaches 1.
pub fn delta_star<T: Real>(service: &DistributionSpec<T>, delay: &DistributionSpec<T>, kappa: T) -> Result<T> {
    let product = service.mgf(-kappa)? * delay.mgf(kappa)?;
    if product < T::one() {
        Ok((T::one() / product).ln() / kappa)
    } else {
        Ok(T::zero())
    }
}
