//! Paired Wilcoxon signed-rank test: exact sign-flip enumeration for small
//! samples, normal approximation with continuity and tie corrections above
//! that. Zero-difference pairs are dropped per standard practice.

use crate::error::{Error, Result};

/// Largest n handled by exact enumeration (2^n sign assignments).
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences (W+). Swapping the samples
    /// maps W+ to W-; the p-value is unchanged.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    /// All pairs tied; p is 1.0 by convention.
    pub degenerate: bool,
    /// Whether the exact distribution was enumerated.
    pub exact: bool,
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Evaluation(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Evaluation("empty paired sample".into()));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n_used: 0,
            degenerate: true,
            exact: true,
        });
    }
    let n = diffs.len();

    // average ranks of |d| with tie handling
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0f64; n];
    let mut tie_groups: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        tie_groups.push(j - i + 1);
        i = j + 1;
    }

    let w_plus: f64 = diffs
        .iter()
        .zip(ranks.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let w_total: f64 = ranks.iter().sum();
    let w_minus = w_total - w_plus;
    let w_small = w_plus.min(w_minus);

    let (p_value, exact) = if n <= EXACT_LIMIT {
        // enumerate all sign assignments; under the null each is equally
        // likely and the distribution of W+ is symmetric about w_total/2
        let total = 1u64 << n;
        let mut at_or_below = 0u64;
        for mask in 0..total {
            let mut w = 0.0f64;
            for (bit, r) in ranks.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    w += *r;
                }
            }
            if w <= w_small + 1e-9 {
                at_or_below += 1;
            }
        }
        let one_tail = at_or_below as f64 / total as f64;
        ((2.0 * one_tail).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_corr: f64 = tie_groups
            .iter()
            .map(|&t| {
                let tf = t as f64;
                tf * tf * tf - tf
            })
            .sum::<f64>()
            / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_corr;
        if var <= 0.0 {
            return Ok(WilcoxonResult {
                statistic: w_plus,
                p_value: 1.0,
                n_used: n,
                degenerate: true,
                exact: false,
            });
        }
        // continuity correction toward the mean
        let d = (w_small - mean).abs() - 0.5;
        let z = d.max(0.0) / var.sqrt();
        ((2.0 * (1.0 - standard_normal_cdf(z))).min(1.0), false)
    };

    Ok(WilcoxonResult {
        statistic: w_plus,
        p_value,
        n_used: n,
        degenerate: false,
        exact,
    })
}

/// Standard normal CDF via a rational erf approximation (Abramowitz &
/// Stegun 7.1.26 form, absolute error below 1.5e-7).
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc_as(-x / std::f64::consts::SQRT_2)
}

fn erfc_as(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc_as(-x);
    }
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    poly * (-x * x).exp()
}
