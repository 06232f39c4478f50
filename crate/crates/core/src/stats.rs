//! Summary statistics used by the Monte Carlo harnesses: moments with
//! standard errors, the Kolmogorov–Smirnov test against a normal target,
//! jackknife standard errors and log–log slope fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::numerics::pairwise_sum;

/// Sample mean and unbiased sample variance (0 for fewer than two values).
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, pairwise_sum(&sq) / (n - 1) as f64)
}

/// Standard error of the sample mean.
pub fn mean_se(values: &[f64]) -> f64 {
    let (_, var) = mean_var(values);
    (var / values.len() as f64).sqrt()
}

/// Delete-one jackknife standard error of the mean of `values`.
///
/// For a plain mean this coincides with `s / sqrt(n)`; it is written out so
/// callers can reuse it on per-unit contributions.
pub fn jackknife_mean_se(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let total = pairwise_sum(values);
    let loo: Vec<f64> = values.iter().map(|v| (total - v) / (n - 1) as f64).collect();
    let (loo_mean, _) = mean_var(&loo);
    let dev: Vec<f64> = loo.iter().map(|v| (v - loo_mean).powi(2)).collect();
    ((n - 1) as f64 / n as f64 * pairwise_sum(&dev)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test of `values` against `Normal(mean, var)`.
///
/// A zero target variance is the point-mass case: the statistic is 0 and the
/// p-value 1 when every value equals `mean`, and (1, 0) otherwise.
pub fn ks_test_normal(values: &[f64], mean: f64, var: f64) -> KsResult {
    let n = values.len();
    if n == 0 {
        return KsResult { statistic: f64::NAN, p_value: f64::NAN };
    }
    if var <= 0.0 {
        let exact = values.iter().all(|v| *v == mean);
        return if exact {
            KsResult { statistic: 0.0, p_value: 1.0 }
        } else {
            KsResult { statistic: 1.0, p_value: 0.0 }
        };
    }
    let normal = Normal::new(mean, var.sqrt()).expect("positive variance");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, v) in sorted.iter().enumerate() {
        let f = normal.cdf(*v);
        d = d.max((i as f64 + 1.0) / nf - f).max(f - i as f64 / nf);
    }
    KsResult { statistic: d, p_value: (1.0 - kolmogorov_cdf(n, d)).clamp(0.0, 1.0) }
}

/// `P(D_n < d)` for the one-sample Kolmogorov statistic, by the
/// Marsaglia–Tsang–Wang matrix-power algorithm (with its large-`n d²`
/// asymptotic shortcut).
pub fn kolmogorov_cdf(n: usize, d: f64) -> f64 {
    if d <= 0.0 {
        return 0.0;
    }
    if d >= 1.0 {
        return 1.0;
    }
    let nf = n as f64;
    let s = d * d * nf;
    if s > 7.24 || (s > 3.76 && n > 99) {
        return 1.0 - 2.0 * (-(2.000071 + 0.331 / nf.sqrt() + 1.409 / nf) * s).exp();
    }
    let k = (nf * d) as usize + 1;
    let m = 2 * k - 1;
    let h = k as f64 - nf * d;
    let mut hm = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            hm[i * m + j] = if i + 1 >= j { 1.0 } else { 0.0 };
        }
    }
    for i in 0..m {
        hm[i * m] -= h.powi(i as i32 + 1);
        hm[(m - 1) * m + i] -= h.powi((m - i) as i32);
    }
    if 2.0 * h - 1.0 > 0.0 {
        hm[(m - 1) * m] += (2.0 * h - 1.0).powi(m as i32);
    }
    for i in 0..m {
        for j in 0..m {
            if i + 1 > j {
                for g in 1..=(i + 1 - j) {
                    hm[i * m + j] /= g as f64;
                }
            }
        }
    }
    let (q, mut eq) = matrix_power(&hm, 0, m, n);
    let mut s = q[(k - 1) * m + k - 1];
    for i in 1..=n {
        s = s * i as f64 / nf;
        if s < 1e-140 {
            s *= 1e140;
            eq -= 140;
        }
    }
    s * 10f64.powi(eq)
}

fn matrix_multiply(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                c[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    c
}

fn matrix_power(a: &[f64], ea: i32, m: usize, n: usize) -> (Vec<f64>, i32) {
    if n == 1 {
        return (a.to_vec(), ea);
    }
    let (v, ev) = matrix_power(a, ea, m, n / 2);
    let b = matrix_multiply(&v, &v, m);
    let eb = 2 * ev;
    let (mut v, mut ev) = if n % 2 == 0 { (b, eb) } else { (matrix_multiply(a, &b, m), ea + eb) };
    if v[(m / 2) * m + m / 2] > 1e140 {
        v.iter_mut().for_each(|x| *x *= 1e-140);
        ev += 140;
    }
    (v, ev)
}

/// Ordinary least-squares slope of `y` on `x`, with its standard error.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len();
    assert_eq!(n, y.len());
    let (mx, _) = mean_var(x);
    let (my, _) = mean_var(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    if n <= 2 {
        return (slope, 0.0);
    }
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    (slope, (rss / (n - 2) as f64 / sxx).sqrt())
}
