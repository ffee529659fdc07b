//! Parametric laws for service and delay times.
//!
//! All supports lie in `[0, ∞)`. Moments are closed form where one exists;
//! the truncated normal MGF and every expectation of a user function go
//! through adaptive quadrature, truncated at the `1 − 1e−12` quantile for
//! unbounded laws.

use std::fmt;

use rand::Rng;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::quadrature::integrate_split;
use crate::rng::{substream, Purpose};
use crate::scalar::Real;

/// Absolute tolerance for MGFs, convolutions and expectations.
pub const NUMERIC_TOL: f64 = 1e-9;
/// Upper tail mass discarded when integrating over an unbounded support.
pub const TAIL_MASS: f64 = 1e-12;
/// Sample count of the Monte-Carlo fallback for `P(S − D > x)`.
pub const FALLBACK_SAMPLES: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistributionSpec<T> {
    Exponential { mean: T },
    Uniform { lower: T, upper: T },
    TruncatedNormal { mu: T, sigma: T, lower: T, upper: T },
    Deterministic { value: T },
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of the upper tail `x ↦ P(Z > x)`.
fn std_normal_isf(q: f64) -> f64 {
    std::f64::consts::SQRT_2 * erfc_inv(2.0 * q)
}

fn finite_positive<T: Real>(x: T, field: &str) -> Result<()> {
    if x.is_finite() && x > T::zero() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be finite and > 0, got {x}")))
    }
}

fn finite_nonneg<T: Real>(x: T, field: &str) -> Result<()> {
    if x.is_finite() && x >= T::zero() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be finite and >= 0, got {x}")))
    }
}

impl<T: Real> DistributionSpec<T> {
    pub fn exponential(mean: T) -> Result<Self> {
        let d = DistributionSpec::Exponential { mean };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(lower: T, upper: T) -> Result<Self> {
        let d = DistributionSpec::Uniform { lower, upper };
        d.validate()?;
        Ok(d)
    }

    /// `Uniform(0, 2·mean)`: the uniform law used when only a mean is given.
    pub fn uniform_with_mean(mean: T) -> Result<Self> {
        Self::uniform(T::zero(), mean + mean)
    }

    pub fn truncated_normal(mu: T, sigma: T, lower: T, upper: T) -> Result<Self> {
        let d = DistributionSpec::TruncatedNormal { mu, sigma, lower, upper };
        d.validate()?;
        Ok(d)
    }

    pub fn deterministic(value: T) -> Result<Self> {
        let d = DistributionSpec::Deterministic { value };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistributionSpec::Exponential { mean } => finite_positive(mean, "mean"),
            DistributionSpec::Uniform { lower, upper } => {
                finite_nonneg(lower, "lower")?;
                if !(upper.is_finite() && upper > lower) {
                    return Err(Error::invalid("upper", format!("must be finite and > lower, got {upper}")));
                }
                Ok(())
            }
            DistributionSpec::TruncatedNormal { mu, sigma, lower, upper } => {
                if !mu.is_finite() {
                    return Err(Error::invalid("mu", "must be finite"));
                }
                finite_positive(sigma, "sigma")?;
                finite_nonneg(lower, "lower")?;
                if !(upper.is_finite() && upper > lower) {
                    return Err(Error::invalid("upper", format!("must be finite and > lower, got {upper}")));
                }
                let (_, _, z) = self.truncnorm_window();
                if !(z > 0.0) {
                    return Err(Error::invalid("sigma", "truncation window carries no probability mass"));
                }
                Ok(())
            }
            DistributionSpec::Deterministic { value } => finite_nonneg(value, "value"),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DistributionSpec::Exponential { .. } => "exponential",
            DistributionSpec::Uniform { .. } => "uniform",
            DistributionSpec::TruncatedNormal { .. } => "truncnorm",
            DistributionSpec::Deterministic { .. } => "deterministic",
        }
    }

    pub fn is_continuous(&self) -> bool {
        !matches!(self, DistributionSpec::Deterministic { .. })
    }

    /// Whether every moment this crate needs has a closed form.
    pub fn has_closed_form_mgf(&self) -> bool {
        !matches!(self, DistributionSpec::TruncatedNormal { .. })
    }

    // (alpha, beta, Z) of the truncated normal in standard units.
    fn truncnorm_window(&self) -> (f64, f64, f64) {
        match *self {
            DistributionSpec::TruncatedNormal { mu, sigma, lower, upper } => {
                let a = (lower.f64() - mu.f64()) / sigma.f64();
                let b = (upper.f64() - mu.f64()) / sigma.f64();
                let z = if a > 0.0 {
                    std_normal_sf(a) - std_normal_sf(b)
                } else {
                    std_normal_cdf(b) - std_normal_cdf(a)
                };
                (a, b, z)
            }
            _ => (f64::NAN, f64::NAN, f64::NAN),
        }
    }

    /// `[lower, upper]` of the support; `upper` is `+∞` for the exponential.
    pub fn support(&self) -> (T, T) {
        match *self {
            DistributionSpec::Exponential { .. } => (T::zero(), T::infinity()),
            DistributionSpec::Uniform { lower, upper } => (lower, upper),
            DistributionSpec::TruncatedNormal { lower, upper, .. } => (lower, upper),
            DistributionSpec::Deterministic { value } => (value, value),
        }
    }

    /// Upper integration limit: the support end, or the `1 − TAIL_MASS` quantile.
    pub fn effective_upper(&self) -> T {
        match *self {
            DistributionSpec::Exponential { mean } => mean * T::lit(-(TAIL_MASS.ln())),
            _ => self.support().1,
        }
    }

    pub fn mean(&self) -> T {
        match *self {
            DistributionSpec::Exponential { mean } => mean,
            DistributionSpec::Uniform { lower, upper } => (lower + upper) * T::lit(0.5),
            DistributionSpec::TruncatedNormal { mu, sigma, .. } => {
                let (a, b, z) = self.truncnorm_window();
                mu + sigma * T::lit((std_normal_pdf(a) - std_normal_pdf(b)) / z)
            }
            DistributionSpec::Deterministic { value } => value,
        }
    }

    /// `P(X ≤ x)`.
    pub fn cdf(&self, x: T) -> T {
        match *self {
            DistributionSpec::Exponential { mean } => {
                if x <= T::zero() {
                    T::zero()
                } else {
                    -(-x / mean).exp_m1()
                }
            }
            DistributionSpec::Uniform { lower, upper } => {
                if x <= lower {
                    T::zero()
                } else if x >= upper {
                    T::one()
                } else {
                    (x - lower) / (upper - lower)
                }
            }
            DistributionSpec::TruncatedNormal { mu, sigma, lower, upper } => {
                if x <= lower {
                    T::zero()
                } else if x >= upper {
                    T::one()
                } else {
                    let (a, _, z) = self.truncnorm_window();
                    let t = (x.f64() - mu.f64()) / sigma.f64();
                    let p = if a > 0.0 {
                        (std_normal_sf(a) - std_normal_sf(t)) / z
                    } else {
                        (std_normal_cdf(t) - std_normal_cdf(a)) / z
                    };
                    T::lit(p.clamp(0.0, 1.0))
                }
            }
            DistributionSpec::Deterministic { value } => {
                if x >= value {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// `P(X > x)`.
    pub fn survival(&self, x: T) -> T {
        match *self {
            DistributionSpec::Exponential { mean } => {
                if x <= T::zero() {
                    T::one()
                } else {
                    (-x / mean).exp()
                }
            }
            DistributionSpec::TruncatedNormal { mu, sigma, lower, upper } => {
                if x <= lower {
                    T::one()
                } else if x >= upper {
                    T::zero()
                } else {
                    let (a, b, z) = self.truncnorm_window();
                    let t = (x.f64() - mu.f64()) / sigma.f64();
                    let p = if a > 0.0 {
                        (std_normal_sf(t) - std_normal_sf(b)) / z
                    } else {
                        (std_normal_cdf(b) - std_normal_cdf(t)) / z
                    };
                    T::lit(p.clamp(0.0, 1.0))
                }
            }
            _ => T::one() - self.cdf(x),
        }
    }

    /// Density of a continuous law; zero for the point mass.
    pub fn pdf(&self, x: T) -> T {
        match *self {
            DistributionSpec::Exponential { mean } => {
                if x < T::zero() {
                    T::zero()
                } else {
                    (-x / mean).exp() / mean
                }
            }
            DistributionSpec::Uniform { lower, upper } => {
                if x < lower || x > upper {
                    T::zero()
                } else {
                    T::one() / (upper - lower)
                }
            }
            DistributionSpec::TruncatedNormal { mu, sigma, lower, upper } => {
                if x < lower || x > upper {
                    T::zero()
                } else {
                    let (_, _, z) = self.truncnorm_window();
                    let t = (x.f64() - mu.f64()) / sigma.f64();
                    T::lit(std_normal_pdf(t) / (z * sigma.f64()))
                }
            }
            DistributionSpec::Deterministic { .. } => T::zero(),
        }
    }

    /// Inverse CDF for `u ∈ [0, 1)`.
    pub fn quantile(&self, u: f64) -> T {
        match *self {
            DistributionSpec::Exponential { mean } => mean * T::lit(-(-u).ln_1p()),
            DistributionSpec::Uniform { lower, upper } => lower + (upper - lower) * T::lit(u),
            DistributionSpec::TruncatedNormal { mu, sigma, lower, upper } => {
                let (a, _, z) = self.truncnorm_window();
                let t = if a > 0.0 {
                    std_normal_isf(std_normal_sf(a) - u * z)
                } else {
                    -std_normal_isf(std_normal_cdf(a) + u * z)
                };
                let x = T::lit(mu.f64() + sigma.f64() * t);
                x.max(lower).min(upper)
            }
            DistributionSpec::Deterministic { value } => value,
        }
    }

    /// One draw by inversion. Every variant consumes exactly one uniform, so
    /// streams stay aligned when laws are swapped between runs.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let u: f64 = rng.random();
        self.quantile(u)
    }

    /// `E[exp(aX)]`.
    pub fn mgf(&self, a: T) -> Result<T> {
        if a == T::zero() {
            return Ok(T::one());
        }
        match *self {
            DistributionSpec::Exponential { mean } => {
                if a * mean >= T::one() {
                    Err(Error::DivergentMgf {
                        a: a.f64(),
                        limit: 1.0 / mean.f64(),
                    })
                } else {
                    Ok(T::one() / (T::one() - a * mean))
                }
            }
            DistributionSpec::Uniform { lower, upper } => {
                let w = a * (upper - lower);
                Ok((a * lower).exp() * w.exp_m1() / w)
            }
            DistributionSpec::Deterministic { value } => Ok((a * value).exp()),
            DistributionSpec::TruncatedNormal { lower, upper, .. } => {
                // Factor out the largest exponent so the integrand is <= pdf.
                let anchor = if a > T::zero() { upper } else { lower };
                let scaled = self.expect(|x| (a * (x - anchor)).exp(), &[])?;
                Ok(scaled * (a * anchor).exp())
            }
        }
    }

    /// `E[g(X)]`; `breaks` lists points where `g` is not smooth.
    pub fn expect<G: FnMut(T) -> T>(&self, mut g: G, breaks: &[T]) -> Result<T> {
        self.expect_tol(&mut g, breaks, T::lit(NUMERIC_TOL))
    }

    pub fn expect_tol<G: FnMut(T) -> T>(&self, g: &mut G, breaks: &[T], tol: T) -> Result<T> {
        match *self {
            DistributionSpec::Deterministic { value } => Ok(g(value)),
            _ => {
                let (lo, _) = self.support();
                let hi = self.effective_upper();
                integrate_split(|x| g(x) * self.pdf(x), lo, hi, breaks, tol).map(|r| r.value)
            }
        }
    }

    /// Stop-loss transform `E[(X − c)⁺]`.
    pub fn stop_loss(&self, c: T) -> Result<T> {
        let zero = T::zero();
        Ok(match *self {
            DistributionSpec::Exponential { mean } => {
                if c <= zero {
                    mean - c
                } else {
                    mean * (-c / mean).exp()
                }
            }
            DistributionSpec::Uniform { lower, upper } => {
                if c <= lower {
                    self.mean() - c
                } else if c >= upper {
                    zero
                } else {
                    let r = upper - c;
                    r * r / ((upper - lower) * T::lit(2.0))
                }
            }
            DistributionSpec::Deterministic { value } => crate::scalar::pos(value - c),
            DistributionSpec::TruncatedNormal { lower, upper, .. } => {
                if c <= lower {
                    self.mean() - c
                } else if c >= upper {
                    zero
                } else {
                    self.expect(|x| crate::scalar::pos(x - c), &[c])?
                }
            }
        })
    }

    /// The same family with its mean moved to `target`.
    ///
    /// Exponential and deterministic laws take the new mean directly, the
    /// uniform scales both endpoints, and the truncated normal shifts `mu`
    /// together with its window.
    pub fn with_mean(&self, target: T) -> Result<Self> {
        finite_positive(target, "mean")?;
        let out = match *self {
            DistributionSpec::Exponential { .. } => DistributionSpec::Exponential { mean: target },
            DistributionSpec::Deterministic { .. } => DistributionSpec::Deterministic { value: target },
            DistributionSpec::Uniform { lower, upper } => {
                let k = target / self.mean();
                DistributionSpec::Uniform {
                    lower: lower * k,
                    upper: upper * k,
                }
            }
            DistributionSpec::TruncatedNormal { mu, sigma, lower, upper } => {
                let shift = target - self.mean();
                DistributionSpec::TruncatedNormal {
                    mu: mu + shift,
                    sigma,
                    lower: lower + shift,
                    upper: upper + shift,
                }
            }
        };
        out.validate()?;
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> DistributionSpec<U> {
        let c = |x: T| U::lit(x.f64());
        match *self {
            DistributionSpec::Exponential { mean } => DistributionSpec::Exponential { mean: c(mean) },
            DistributionSpec::Uniform { lower, upper } => DistributionSpec::Uniform {
                lower: c(lower),
                upper: c(upper),
            },
            DistributionSpec::TruncatedNormal { mu, sigma, lower, upper } => DistributionSpec::TruncatedNormal {
                mu: c(mu),
                sigma: c(sigma),
                lower: c(lower),
                upper: c(upper),
            },
            DistributionSpec::Deterministic { value } => DistributionSpec::Deterministic { value: c(value) },
        }
    }
}

impl<T: Real> fmt::Display for DistributionSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionSpec::Exponential { mean } => write!(f, "Exponential(mean={mean})"),
            DistributionSpec::Uniform { lower, upper } => write!(f, "Uniform({lower}, {upper})"),
            DistributionSpec::TruncatedNormal { mu, sigma, lower, upper } => {
                write!(f, "TruncatedNormal(mu={mu}, sigma={sigma}, [{lower}, {upper}])")
            }
            DistributionSpec::Deterministic { value } => write!(f, "Deterministic({value})"),
        }
    }
}

/// `P(S − D > x)` for independent `S` and `D`.
///
/// Closed form for exponential pairs and whenever either side is a point
/// mass; otherwise a quadrature over the delay law, with a seeded
/// Monte-Carlo estimate if the quadrature does not converge.
pub fn prob_diff_exceeds<T: Real>(s: &DistributionSpec<T>, d: &DistributionSpec<T>, x: T) -> T {
    use DistributionSpec::*;
    match (*s, *d) {
        (Exponential { mean: ms }, Exponential { mean: md }) => {
            let (ls, ld) = (T::one() / ms, T::one() / md);
            if x >= T::zero() {
                ld / (ls + ld) * (-ls * x).exp()
            } else {
                T::one() - ls / (ls + ld) * (ld * x).exp()
            }
        }
        (Deterministic { value: vs }, Deterministic { value: vd }) => {
            if vs - vd > x {
                T::one()
            } else {
                T::zero()
            }
        }
        // D continuous: P(D < vs − x) = F_D(vs − x).
        (Deterministic { value: vs }, _) => d.cdf(vs - x),
        (_, Deterministic { value: vd }) => s.survival(x + vd),
        _ => {
            let (slo, shi) = s.support();
            let breaks = [slo - x, shi - x];
            match d.expect(|y| s.survival(x + y), &breaks) {
                Ok(p) => p.max(T::zero()).min(T::one()),
                Err(_) => prob_diff_exceeds_mc(s, d, x, FALLBACK_SAMPLES, 0),
            }
        }
    }
}

/// Monte-Carlo estimate of `P(S − D > x)` from a dedicated substream.
pub fn prob_diff_exceeds_mc<T: Real>(
    s: &DistributionSpec<T>,
    d: &DistributionSpec<T>,
    x: T,
    samples: usize,
    seed: u64,
) -> T {
    let mut rs = substream(seed, Purpose::Fallback, &[1]);
    let mut rd = substream(seed, Purpose::Fallback, &[2]);
    let hits = (0..samples).filter(|_| s.sample(&mut rs) - d.sample(&mut rd) > x).count();
    T::lit(hits as f64 / samples as f64)
}
