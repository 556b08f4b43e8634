use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by the exact null
/// distribution.
pub const EXACT_LIMIT: usize = 25;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of positive differences.
    pub w_plus: f64,
    /// Non-zero differences.
    pub n: usize,
    pub exact: bool,
    /// Two-sided p-value in `(0, 1]`.
    pub p_value: f64,
}

/// Ranks of `values` (1-based), ties sharing their average rank.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Exact two-sided p-value of the statistic `w2` (sum of doubled ranks
/// with a positive sign) when every sign is a fair coin.
pub(crate) fn exact_p(doubled: &[usize], w2: usize) -> f64 {
    let total: usize = doubled.iter().sum();
    // counts[s] = number of sign patterns whose positive doubled ranks sum to s
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let patterns = 2f64.powi(doubled.len() as i32);
    let lower: f64 = counts[..=w2].iter().sum();
    let upper: f64 = counts[w2..].iter().sum();
    (2.0 * lower.min(upper) / patterns).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test of paired samples.
///
/// Zero differences are dropped and tied magnitudes share average ranks.
/// Up to [`EXACT_LIMIT`] differences the null distribution is computed
/// exactly; beyond that the normal approximation with tie and continuity
/// corrections is used. When every difference is zero, `p = 1`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite score difference".into()));
    }
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            n,
            exact: true,
            p_value: 1.0,
        });
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if n <= EXACT_LIMIT {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let p = exact_p(&doubled, (2.0 * w_plus).round() as usize);
        return Ok(WilcoxonResult {
            w_plus,
            n,
            exact: true,
            p_value: p,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).clamp(f64::MIN_POSITIVE, 1.0)
    };
    Ok(WilcoxonResult {
        w_plus,
        n,
        exact: false,
        p_value: p,
    })
}
