#![allow(dead_code)]

pub mod grad;

use femurseg::nn::Tensor;
use femurseg::rng::SeededRng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;

pub fn random_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.standard_normal()).collect()).unwrap()
}

/// Entries in `[lo, hi]` with random sign.
pub fn random_away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_in(lo, hi);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|a - n| / max(|a|, |n|)`, or the absolute difference when both are below `floor`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < floor {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Worst relative error between `analytic` and central differences of `f` at `x`.
pub fn fd_max_rel_err(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut p = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric, 1e-7));
    }
    worst
}

/// Exhaustive Otsu over all 256 bin boundaries with exact rational
/// arithmetic: maximises `w0 * w1 * (mu0 - mu1)^2` on bin indices and keeps
/// the first maximiser. `None` when no boundary separates two nonempty classes.
pub fn otsu_oracle(h: &[u64; 256]) -> Option<usize> {
    use num_bigint::BigInt;
    use num_rational::BigRational;
    let q = |v: u64| BigRational::from_integer(BigInt::from(v));
    let n: u64 = h.iter().sum();
    let mut best: Option<(usize, BigRational)> = None;
    for k in 1..256 {
        let (lo, hi) = h.split_at(k);
        let n0: u64 = lo.iter().sum();
        let n1: u64 = hi.iter().sum();
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u64 = lo.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
        let s1: u64 = hi.iter().enumerate().map(|(b, &c)| (b + k) as u64 * c).sum();
        let mu0 = q(s0) / q(n0);
        let mu1 = q(s1) / q(n1);
        let diff = mu0 - mu1;
        let score = q(n0) / q(n) * (q(n1) / q(n)) * &diff * &diff;
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
}
