//! Globally adaptive Gauss-Kronrod (7/15) integration.

use crate::error::{Error, Result};
use crate::scalar::Real;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 2000;

#[derive(Debug, Clone, Copy)]
pub struct Integral<T> {
    pub value: T,
    pub error: T,
}

#[derive(Clone, Copy)]
struct Segment<T> {
    a: T,
    b: T,
    value: T,
    error: T,
}

fn kronrod<T: Real, F: FnMut(T) -> T>(f: &mut F, a: T, b: T) -> Segment<T> {
    let half = T::lit(0.5);
    let center = (a + b) * half;
    let radius = (b - a) * half;
    let fc = f(center);
    let mut kron = fc * T::lit(WGK[7]);
    let mut gauss = fc * T::lit(WG[3]);
    for i in 0..7 {
        let dx = radius * T::lit(XGK[i]);
        let pair = f(center - dx) + f(center + dx);
        kron = kron + pair * T::lit(WGK[i]);
        if i % 2 == 1 {
            gauss = gauss + pair * T::lit(WG[i / 2]);
        }
    }
    Segment {
        a,
        b,
        value: kron * radius,
        error: ((kron - gauss) * radius).abs(),
    }
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<T: Real, F: FnMut(T) -> T>(f: F, a: T, b: T, tol: T) -> Result<Integral<T>> {
    integrate_split(f, a, b, &[], tol)
}

/// As [`integrate`], with the interval pre-split at `breaks` (points where the
/// integrand has a kink or jump). Breaks outside `(a, b)` are ignored.
pub fn integrate_split<T: Real, F: FnMut(T) -> T>(
    mut f: F,
    a: T,
    b: T,
    breaks: &[T],
    tol: T,
) -> Result<Integral<T>> {
    if !(b > a) {
        return Ok(Integral {
            value: T::zero(),
            error: T::zero(),
        });
    }
    let mut cuts: Vec<T> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    cuts.sort_by(|x, y| x.partial_cmp(y).expect("finite break"));
    cuts.dedup();
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(a);
    edges.extend(cuts);
    edges.push(b);

    let mut segments: Vec<Segment<T>> = edges.windows(2).map(|w| kronrod(&mut f, w[0], w[1])).collect();
    let floor = tol.max(T::resolution());
    loop {
        let (value, error) = segments
            .iter()
            .fold((T::zero(), T::zero()), |(v, e), s| (v + s.value, e + s.error));
        if error <= floor {
            return Ok(Integral { value, error });
        }
        let worst = segments
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.partial_cmp(&y.1.error).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .expect("at least one segment");
        let seg = segments.swap_remove(worst);
        let mid = (seg.a + seg.b) * T::lit(0.5);
        let width_limit = (seg.a.abs() + seg.b.abs() + T::one()) * T::epsilon() * T::lit(64.0);
        if segments.len() + 2 > MAX_INTERVALS || seg.b - seg.a <= width_limit || !error.is_finite() {
            return Err(Error::Quadrature {
                tol: tol.f64(),
                estimate: error.f64(),
            });
        }
        segments.push(kronrod(&mut f, seg.a, mid));
        segments.push(kronrod(&mut f, mid, seg.b));
    }
}
