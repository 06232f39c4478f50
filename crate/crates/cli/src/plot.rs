//! Plot-ready tables for z samples: histogram with the target normal
//! density on the same bins, and QQ pairs. No rendering.

use std::fmt::Write;

use statrs::distribution::{ContinuousCDF, Normal};

/// One histogram bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub center: f64,
    pub count: usize,
    /// Target normal density averaged over the bin and renormalised to the
    /// plotted span, so that `Σ density · width = 1`.
    pub target_density: f64,
}

/// `bins` equal bins spanning `[min, max]` of `values`.
///
/// Identical values collapse to a single bin at that value carrying the
/// whole (unit) mass.
pub fn histogram(values: &[f64], mean: f64, var: f64, bins: usize) -> Vec<Bin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![Bin { center: lo, count: values.len(), target_density: 1.0 }];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let j = (((v - lo) / width) as usize).min(bins - 1);
        counts[j] += 1;
    }
    let edge = |j: usize| if j == bins { hi } else { lo + j as f64 * width };
    let cdf = |x: f64| match Normal::new(mean, var.sqrt()) {
        Ok(n) if var > 0.0 => n.cdf(x),
        _ => {
            if x >= mean {
                1.0
            } else {
                0.0
            }
        }
    };
    let mass: Vec<f64> = (0..bins).map(|j| cdf(edge(j + 1)) - cdf(edge(j))).collect();
    let total: f64 = mass.iter().sum();
    (0..bins)
        .map(|j| Bin {
            center: lo + (j as f64 + 0.5) * width,
            count: counts[j],
            target_density: if total > 0.0 { mass[j] / (total * width) } else { 0.0 },
        })
        .collect()
}

/// `(theoretical, sample)` quantile pairs at plotting positions `(i + ½)/n`.
pub fn qq_pairs(values: &[f64], mean: f64, var: f64) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let normal = Normal::new(mean, var.sqrt()).ok().filter(|_| var > 0.0);
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let q = match &normal {
                Some(d) => d.inverse_cdf((i as f64 + 0.5) / n),
                None => mean,
            };
            (q, s)
        })
        .collect()
}

pub fn histogram_csv(bins: &[Bin]) -> String {
    let mut s = String::from("bin_center,count,target_density\n");
    for b in bins {
        let _ = writeln!(s, "{:?},{},{:?}", b.center, b.count, b.target_density);
    }
    s
}

pub fn qq_csv(pairs: &[(f64, f64)]) -> String {
    let mut s = String::from("theoretical,sample\n");
    for (q, v) in pairs {
        let _ = writeln!(s, "{q:?},{v:?}");
    }
    s
}

/// Histogram and QQ tables of a z sample against `N(mean, var)`.
pub fn emit_plot_data(values: &[f64], mean: f64, var: f64, bins: usize) -> (String, String) {
    (histogram_csv(&histogram(values, mean, var, bins)), qq_csv(&qq_pairs(values, mean, var)))
}
