//! Small numeric helpers shared across modules.

use statrs::function::erf::erfc_inv;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn normal_pdf(u: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * u * u).exp()
}

#[inline]
pub fn normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal CDF on (0, 1): a series inverse polished
/// by one Newton step against the accurate CDF.
pub fn normal_quantile(p: f64) -> f64 {
    let u = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    if !u.is_finite() {
        return u;
    }
    let dens = normal_pdf(u);
    if dens > 0.0 {
        u - (normal_cdf(u) - p) / dens
    } else {
        u
    }
}

/// Antiderivative of the standard normal CDF: `u Φ(u) + φ(u)`.
#[inline]
pub fn normal_cdf_antiderivative(u: f64) -> f64 {
    u * normal_cdf(u) + normal_pdf(u)
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); NaN for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    sample_sd(xs) / (xs.len() as f64).sqrt()
}

/// Mean after dropping `floor(frac * n)` values from each tail.
pub fn trimmed_mean(xs: &[f64], frac: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (frac * sorted.len() as f64).floor() as usize;
    let kept = &sorted[k..sorted.len() - k];
    if kept.is_empty() {
        return mean(&sorted);
    }
    mean(kept)
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" rule). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Composite Simpson rule for `∫_a^b f`. `nodes` is the number of
/// evaluation points and is rounded up to the next odd number (minimum 3).
/// Returns `-∫_b^a f` when `b < a`, i.e. the oriented integral.
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, nodes: usize) -> f64 {
    if a == b {
        return 0.0;
    }
    let mut m = nodes.max(3);
    if m % 2 == 0 {
        m += 1;
    }
    let panels = m - 1;
    let h = (b - a) / panels as f64;
    let mut acc = f(a) + f(b);
    for k in 1..panels {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
