//! Paired Wilcoxon signed-rank test and Holm step-down adjustment.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of nonzero differences handled by the exact null distribution.
pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Smaller of the positive and negative rank sums.
    pub statistic: f64,
    pub p_value: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub exact: bool,
}

/// Average ranks (1-based) of `v`, which must be sorted ascending.
fn average_ranks(sorted: &[f64]) -> Vec<f64> {
    let mut ranks = vec![0.0; sorted.len()];
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|x| *x = r);
        i = j + 1;
    }
    ranks
}

/// Two-sided paired test on `xs - ys`. Zero differences are dropped.
pub fn wilcoxon_paired(xs: &[f64], ys: &[f64]) -> Result<WilcoxonResult> {
    if xs.len() != ys.len() {
        return Err(Error::Metric(format!("paired samples differ in length: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < MIN_PAIRS {
        return Err(Error::Metric(format!("need at least {MIN_PAIRS} pairs, got {}", xs.len())));
    }
    let mut d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite paired difference".into()));
    }
    d.retain(|v| *v != 0.0);
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult { statistic: 0.0, p_value: 1.0, n, exact: true });
    }
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&mags);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);
    if n <= EXACT_MAX_N {
        let p = exact_p(&ranks, statistic);
        Ok(WilcoxonResult { statistic, p_value: p, n, exact: true })
    } else {
        let mean = total / 2.0;
        let mut var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0;
        let mut i = 0;
        while i < n {
            let j = ranks[i..].iter().take_while(|r| **r == ranks[i]).count();
            let t = j as f64;
            var -= (t * t * t - t) / 48.0;
            i += j;
        }
        let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
        let p = if var > 0.0 {
            let z = dev / var.sqrt();
            2.0 * (1.0 - Normal::standard().cdf(z))
        } else {
            1.0
        };
        Ok(WilcoxonResult { statistic, p_value: p.clamp(f64::MIN_POSITIVE, 1.0), n, exact: false })
    }
}

/// Two-sided exact p from the sign-flip distribution of the (possibly tied) ranks.
/// Ranks are doubled so ties at .5 stay integral.
fn exact_p(ranks: &[f64], statistic: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0.0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    let obs = (statistic * 2.0).round() as usize;
    let tail: f64 = counts[..=obs].iter().sum();
    let all = 2f64.powi(ranks.len() as i32);
    (2.0 * tail / all).min(1.0)
}

/// Holm step-down adjusted p-values, returned in input order.
pub fn holm_bonferroni(pvals: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Metric(format!("p-value {p} is outside [0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (k, &i) in order.iter().enumerate() {
        running = running.max(((m - k) as f64 * pvals[i]).min(1.0));
        out[i] = running;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_six() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = wilcoxon_paired(&xs, &[0.0; 6]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.03125);
    }

    #[test]
    fn identical_samples_give_one() {
        let xs = [0.3, 0.5, 0.1, 0.9, 0.7];
        assert_eq!(wilcoxon_paired(&xs, &xs).unwrap().p_value, 1.0);
        assert!(wilcoxon_paired(&xs[..4], &xs[..4]).is_err());
        assert!(wilcoxon_paired(&xs, &xs[..4]).is_err());
    }

    #[test]
    fn holm_basics() {
        let adj = holm_bonferroni(&[0.01, 0.04, 0.03]).unwrap();
        let want = [0.03, 0.06, 0.06];
        for (a, w) in adj.iter().zip(want) {
            assert!((a - w).abs() < 1e-15, "{adj:?}");
        }
        assert_eq!(holm_bonferroni(&[0.5, 0.6]).unwrap(), vec![1.0, 1.0]);
        assert!(holm_bonferroni(&[1.5]).is_err());
        assert!(holm_bonferroni(&[]).unwrap().is_empty());
    }

    #[test]
    fn mixed_signs_exact() {
        let d = [1.5, -2.0, 3.0, 4.0, -5.0, 6.5, 7.0, 8.0, -9.0, 10.5, 1.2, 2.2];
        let r = wilcoxon_paired(&d, &[0.0; 12]).unwrap();
        assert_eq!(r.statistic, 21.0);
        assert!((r.p_value - 0.176_269_531_25).abs() < 1e-12);
    }

    #[test]
    fn normal_branch_with_and_without_ties() {
        let d: Vec<f64> = (1..=26).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let r = wilcoxon_paired(&d, &[0.0; 26]).unwrap();
        assert!(!r.exact);
        assert_eq!(r.statistic, 108.0);
        assert!((r.p_value - 0.088_818_283_271_724_04).abs() < 1e-9, "{}", r.p_value);

        let mut t = vec![1.0, 1.0, 2.0, 2.0, 2.0, -3.0, 4.0, 4.0, -5.0, 6.0];
        t.extend((0..20).map(|i| 7.0 + 0.5 * (i % 4) as f64));
        let r = wilcoxon_paired(&t, &[0.0; 30]).unwrap();
        assert_eq!(r.statistic, 15.0);
        assert!((r.p_value / 7.694_463_113_153_815e-6 - 1.0).abs() < 1e-6, "{}", r.p_value);
    }
}
