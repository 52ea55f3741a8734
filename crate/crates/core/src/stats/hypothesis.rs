//! Paired t, Wilcoxon signed-rank and Pearson correlation tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest number of nonzero differences for which the Wilcoxon p-value is exact.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    OneSidedGreater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PairedT,
    WilcoxonExact,
    WilcoxonNormal,
    Pearson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub tail: Tail,
    pub method: Method,
}

/// Student t CDF with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    StudentsT::new(0.0, 1.0, df).expect("df > 0").cdf(t)
}

fn normal_sf(z: f64) -> f64 {
    Normal::standard().sf(z)
}

fn paired_diffs(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// One-tailed paired t-test of mean(a − b) > 0.
pub fn paired_t_one_tailed(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let d = paired_diffs(a, b)?;
    let n = d.len();
    if n < 2 {
        return Err(Error::TooFew { need: 2, got: n });
    }
    if d.iter().all(|&x| x == d[0]) {
        return Err(Error::ZeroVariance("paired differences".into()));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = mean / (var.sqrt() / nf.sqrt());
    let p = (1.0 - t_cdf(t, nf - 1.0)).clamp(0.0, 1.0);
    Ok(TestResult { statistic: t, p_value: p, n, tail: Tail::OneSidedGreater, method: Method::PairedT })
}

/// Midranks (1-based) of the values, ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Number of sign assignments whose doubled positive rank sum is at least `observed`.
///
/// Doubled midranks are integers, so the count over all `2^n` assignments is
/// accumulated exactly by a subset-sum table.
fn exact_upper_count(doubled_ranks: &[u64], observed: u64) -> u64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut ways = vec![0u64; total as usize + 1];
    ways[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if ways[s] > 0 {
                ways[s + r] += ways[s];
            }
        }
        reach += r;
    }
    ways[observed as usize..].iter().sum()
}

/// One-tailed Wilcoxon signed-rank test of a > b.
///
/// Zero differences are dropped; exact for at most [`WILCOXON_EXACT_MAX`]
/// nonzero differences, otherwise a normal approximation with tie and
/// continuity corrections.
pub fn wilcoxon_signed_rank_one_tailed(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let d: Vec<f64> = paired_diffs(a, b)?.into_iter().filter(|&x| x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::AllZero);
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let observed = (2.0 * w_plus).round() as u64;
        let count = exact_upper_count(&doubled, observed);
        let p = count as f64 / (1u64 << n) as f64;
        return Ok(TestResult {
            statistic: w_plus,
            p_value: p,
            n,
            tail: Tail::OneSidedGreater,
            method: Method::WilcoxonExact,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Err(Error::ZeroVariance("signed ranks".into()));
    }
    let z = (w_plus - mean - 0.5) / var.sqrt();
    Ok(TestResult {
        statistic: w_plus,
        p_value: normal_sf(z).clamp(0.0, 1.0),
        n,
        tail: Tail::OneSidedGreater,
        method: Method::WilcoxonNormal,
    })
}

/// Pearson product-moment correlation with a two-sided t-test on n − 2 df.
/// `statistic` holds r.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("pearson on lengths {} and {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFew { need: 3, got: n });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance("pearson input".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * ((nf - 2.0) / (1.0 - r * r)).sqrt();
        (2.0 * (1.0 - t_cdf(t.abs(), nf - 2.0))).clamp(0.0, 1.0)
    };
    Ok(TestResult { statistic: r, p_value: p, n, tail: Tail::TwoSided, method: Method::Pearson })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_t_reference() {
        // d = [1,0,2,1]: mean 1, sd sqrt(2/3), t = sqrt(6)
        let r = paired_t_one_tailed(&[1.0, 0.0, 2.0, 1.0], &[0.0; 4]).unwrap();
        assert!((r.statistic - 6f64.sqrt()).abs() < 1e-12);
        assert!((r.statistic - 2.4495).abs() < 1e-4);
        assert!((r.p_value - 0.0459).abs() < 1e-4, "{}", r.p_value);
    }

    #[test]
    fn paired_t_errors_and_symmetry() {
        let b = [0.3, 0.1, 0.7];
        let a: Vec<f64> = b.iter().map(|x| x + 1.0).collect();
        assert!(matches!(paired_t_one_tailed(&a, &b), Err(Error::ZeroVariance(_))));
        assert!(matches!(paired_t_one_tailed(&[1.0], &[0.0]), Err(Error::TooFew { .. })));
        let a = [0.71, 0.64, 0.80, 0.55, 0.69];
        let b = [0.66, 0.65, 0.71, 0.50, 0.70];
        let pab = paired_t_one_tailed(&a, &b).unwrap().p_value;
        let pba = paired_t_one_tailed(&b, &a).unwrap().p_value;
        assert!((pab + pba - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_small_cases() {
        let r = wilcoxon_signed_rank_one_tailed(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(r.p_value, 1.0 / 32.0);
        assert_eq!(r.statistic, 15.0);
        let r = wilcoxon_signed_rank_one_tailed(&[2.0], &[1.0]).unwrap();
        assert_eq!(r.p_value, 0.5);
        assert!(matches!(
            wilcoxon_signed_rank_one_tailed(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::AllZero)
        ));
    }

    #[test]
    fn wilcoxon_normal_branch() {
        let a: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 + if i % 8 == 0 { -1.0 } else { 0.5 }).collect();
        let b: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let r = wilcoxon_signed_rank_one_tailed(&a, &b).unwrap();
        assert_eq!(r.method, Method::WilcoxonNormal);
        assert!(r.p_value < 0.01);
    }

    #[test]
    fn midrank_ties() {
        assert_eq!(midranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn pearson_lines() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap().statistic - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap().statistic + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[1.0; 5]), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn pearson_hand_value() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.1, 1.9, 3.2, 3.8];
        // means 2.5 and 2.5; deviations (-1.5,-.5,.5,1.5) and (-1.4,-.6,.7,1.3)
        let sxy = 1.5 * 1.4 + 0.5 * 0.6 + 0.5 * 0.7 + 1.5 * 1.3;
        let sxx = 5.0;
        let syy = 1.4f64 * 1.4 + 0.36 + 0.49 + 1.69;
        let expect = sxy / (sxx * syy).sqrt();
        assert!((pearson(&x, &y).unwrap().statistic - expect).abs() < 1e-12);
    }
}
