//! Rank correlation and exact nonparametric tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample size up to which Kendall p-values enumerate every permutation.
pub const KENDALL_EXACT_MAX: usize = 8;
/// Sample size up to which the signed-rank null is computed exactly.
pub const WILCOXON_EXACT_MAX: usize = 20;
pub const WILCOXON_MIN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TauVariant {
    /// `(C - D) / (n(n-1)/2)`.
    Plain,
    /// Tie-corrected denominator.
    TieCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    Greater,
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankStatistic {
    pub tau: f64,
    /// Two-sided.
    pub p_value: f64,
    pub variant: TauVariant,
}

/// Standard normal upper tail.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

struct PairCounts {
    /// Concordant minus discordant.
    s: i64,
    /// Pairs not tied in `a`, and not tied in `b`.
    untied_a: i64,
    untied_b: i64,
}

fn pair_counts(a: &[f64], b: &[f64]) -> PairCounts {
    let n = a.len();
    let (mut s, mut ua, mut ub) = (0, 0, 0);
    for i in 0..n {
        for j in i + 1..n {
            let da = (a[i] - a[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let db = (b[i] - b[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += da * db;
            ua += i64::from(da != 0);
            ub += i64::from(db != 0);
        }
    }
    PairCounts { s, untied_a: ua, untied_b: ub }
}

fn tau_of(c: &PairCounts, n: usize, variant: TauVariant) -> Option<f64> {
    match variant {
        TauVariant::Plain => Some(c.s as f64 / (n * (n - 1) / 2) as f64),
        TauVariant::TieCorrected => {
            let d = (c.untied_a as f64 * c.untied_b as f64).sqrt();
            (d > 0.0).then(|| c.s as f64 / d)
        }
    }
}

fn tie_groups(x: &[f64]) -> Vec<usize> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i + 1;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        if j - i > 1 {
            groups.push(j - i);
        }
        i = j;
    }
    groups
}

/// Variance of `S` under independence, with the usual tie terms.
fn kendall_s_variance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ta = tie_groups(a);
    let tb = tie_groups(b);
    let f = |t: &[usize], g: &dyn Fn(f64) -> f64| t.iter().map(|&t| g(t as f64)).sum::<f64>();
    let v0 = n * (n - 1.0) * (2.0 * n + 5.0);
    let vt = f(&ta, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let vu = f(&tb, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let v1 = f(&ta, &|t| t * (t - 1.0)) * f(&tb, &|t| t * (t - 1.0)) / (2.0 * n * (n - 1.0));
    let v2 = if n > 2.0 {
        f(&ta, &|t| t * (t - 1.0) * (t - 2.0)) * f(&tb, &|t| t * (t - 1.0) * (t - 2.0)) / (9.0 * n * (n - 1.0) * (n - 2.0))
    } else {
        0.0
    };
    (v0 - vt - vu) / 18.0 + v1 + v2
}

/// Calls `f` on every permutation of `items` (Heap's algorithm).
fn for_each_permutation(items: &mut [f64], f: &mut dyn FnMut(&[f64])) {
    let n = items.len();
    let mut c = vec![0usize; n];
    f(items);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            f(items);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Kendall rank correlation with a two-sided independence p-value: exact
/// over all permutations of `b` for `n <= 8`, normal approximation of `S`
/// otherwise.
pub fn kendall_tau(a: &[f64], b: &[f64], variant: TauVariant) -> Result<RankStatistic> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("at least two observations required".into()));
    }
    let counts = pair_counts(a, b);
    let tau = tau_of(&counts, n, variant).ok_or_else(|| Error::Undefined("tau-b of a fully tied ranking".into()))?;
    let p_value = if counts.s == 0 && (counts.untied_a == 0 || counts.untied_b == 0) {
        1.0
    } else if n <= KENDALL_EXACT_MAX {
        let observed = counts.s.abs();
        let mut hits = 0u64;
        let mut total = 0u64;
        let mut perm = b.to_vec();
        for_each_permutation(&mut perm, &mut |p| {
            total += 1;
            if pair_counts(a, p).s.abs() >= observed {
                hits += 1;
            }
        });
        hits as f64 / total as f64
    } else {
        let var = kendall_s_variance(a, b);
        if var <= 0.0 {
            1.0
        } else {
            (2.0 * normal_sf(counts.s.abs() as f64 / var.sqrt())).min(1.0)
        }
    };
    Ok(RankStatistic { tau, p_value, variant })
}

/// Mid-ranks (1-based) of `x`.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|i, j| x[*i].total_cmp(&x[*j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for k in i..j {
            ranks[idx[k]] = r;
        }
        i = j;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Signed-rank test of `values - null_median`. Zeros are dropped and tied
/// magnitudes get mid-ranks. For `n <= 20` the null distribution of `W+` is
/// exact; above, a tie-corrected normal approximation is used.
pub fn wilcoxon_signed_rank(values: &[f64], null_median: f64, alternative: Alternative) -> Result<WilcoxonResult> {
    let d: Vec<f64> = values.iter().map(|v| v - null_median).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n < WILCOXON_MIN {
        return Err(Error::InsufficientData(format!("{n} nonzero differences, at least {WILCOXON_MIN} required")));
    }
    let ranks = midranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        // mid-ranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let total = (1u64 << n) as f64;
        let w2 = (w_plus * 2.0).round() as usize;
        let upper = counts[w2..].iter().sum::<u64>() as f64 / total;
        let lower = counts[..=w2].iter().sum::<u64>() as f64 / total;
        let p_value = match alternative {
            Alternative::Greater => upper,
            Alternative::Less => lower,
            Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
        };
        return Ok(WilcoxonResult { w_plus, n, p_value, exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_groups(&ranks).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
    let z = (w_plus - mean) / sd;
    let p_value = match alternative {
        Alternative::Greater => normal_sf(z),
        Alternative::Less => normal_sf(-z),
        Alternative::TwoSided => (2.0 * normal_sf(z.abs())).min(1.0),
    };
    Ok(WilcoxonResult { w_plus, n, p_value, exact: false })
}

fn binomial_coefficient(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c.round()
}

pub fn binomial_pmf(j: u64, n: u64, p: f64) -> f64 {
    binomial_coefficient(n, j) * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32)
}

/// Exact binomial test of `k` successes in `n` trials against success
/// probability `p0`. The two-sided p-value sums every outcome no more
/// likely than the observed one.
pub fn binomial_test(k: u64, n: u64, p0: f64, alternative: Alternative) -> Result<f64> {
    if k > n {
        return Err(Error::InvalidArgument(format!("k={k} exceeds n={n}")));
    }
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::InvalidArgument(format!("p0={p0} outside [0, 1]")));
    }
    let p = match alternative {
        Alternative::Greater => (k..=n).map(|j| binomial_pmf(j, n, p0)).sum(),
        Alternative::Less => (0..=k).map(|j| binomial_pmf(j, n, p0)).sum(),
        Alternative::TwoSided => {
            let observed = binomial_pmf(k, n, p0);
            (0..=n).map(|j| binomial_pmf(j, n, p0)).filter(|q| *q <= observed * (1.0 + 1e-7)).sum()
        }
    };
    Ok(f64::min(p, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_extremes_and_single_swap() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(kendall_tau(&a, &a, TauVariant::Plain).unwrap().tau, 1.0);
        assert_eq!(kendall_tau(&a, &[3.0, 2.0, 1.0], TauVariant::Plain).unwrap().tau, -1.0);
        let t = kendall_tau(&a, &[2.0, 1.0, 3.0], TauVariant::Plain).unwrap().tau;
        assert!((t - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tau_b_undefined_when_all_tied() {
        let r = kendall_tau(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0], TauVariant::TieCorrected);
        assert!(matches!(r, Err(Error::Undefined(_))));
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0], TauVariant::Plain).unwrap().tau, 0.0);
    }

    #[test]
    fn perfect_three_way_correlation_p_value() {
        // 2 of the 6 permutations reach |S| = 3
        let r = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], TauVariant::Plain).unwrap();
        assert!((r.p_value - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn five_positive_values() {
        let r = wilcoxon_signed_rank(&[0.1, 0.5, 0.2, 0.9, 0.3], 0.0, Alternative::Greater).unwrap();
        assert_eq!(r.p_value, 1.0 / 32.0);
        assert_eq!(r.w_plus, 15.0);
    }

    #[test]
    fn symmetric_values_two_sided_is_one() {
        let r = wilcoxon_signed_rank(&[1.0, -1.0, 2.0, -2.0, 3.0, -3.0], 0.0, Alternative::TwoSided).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn zeros_dropped_and_small_samples_rejected() {
        assert!(matches!(wilcoxon_signed_rank(&[0.0, 0.0, 1.0, 2.0, 3.0, 4.0], 0.0, Alternative::Greater), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn binomial_reference_values() {
        assert_eq!(binomial_test(9, 10, 0.5, Alternative::Greater).unwrap(), 11.0 / 1024.0);
        assert_eq!(binomial_test(10, 10, 0.5, Alternative::Greater).unwrap(), 0.5f64.powi(10));
        assert_eq!(binomial_test(0, 10, 0.5, Alternative::Greater).unwrap(), 1.0);
        assert!(binomial_test(11, 10, 0.5, Alternative::Greater).is_err());
    }

    #[test]
    fn normal_tail() {
        assert!((normal_sf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_sf(1.959963984540054) - 0.025).abs() < 1e-12);
    }

    #[test]
    fn midranks_of_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
