//! Split-chain convergence diagnostics on rank-normalized draws.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::sampler::PosteriorDraws;

fn check_shape(chains: &[Vec<f64>]) -> Result<usize> {
    if chains.len() < 2 {
        return Err(Error::InsufficientDraws {
            need: 2,
            got: chains.len(),
        });
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("chains have different lengths"));
    }
    if n < 4 {
        return Err(Error::InsufficientDraws { need: 4, got: n });
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("draws contain non-finite values"));
    }
    let first = chains[0][0];
    if chains.iter().flatten().all(|v| *v == first) {
        return Err(Error::Degenerate(
            "all draws are identical; R-hat and ESS are undefined".into(),
        ));
    }
    Ok(n)
}

/// Halves every chain (dropping the middle draw of odd-length chains).
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half = chains[0].len() / 2;
    let odd = chains[0].len() % 2;
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        out.push(c[..half].to_vec());
        out.push(c[half + odd..].to_vec());
    }
    out
}

/// Normal scores of pooled ranks (ties averaged), Blom offset 3/8.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, ch)| ch.iter().enumerate().map(move |(i, v)| (*v, c, i)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = pooled.len() as f64;
    let std = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut k = 0;
    while k < pooled.len() {
        let mut end = k;
        while end + 1 < pooled.len() && pooled[end + 1].0 == pooled[k].0 {
            end += 1;
        }
        // ranks are 1-based; ties share their mean rank
        let rank = (k + end) as f64 / 2.0 + 1.0;
        let z = std.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, i) in &pooled[k..=end] {
            out[c][i] = z;
        }
        k = end + 1;
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Gelman-Rubin potential scale reduction over already-split chains.
fn psrf(chains: &[Vec<f64>]) -> Result<f64> {
    let n = chains[0].len() as f64;
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / chains.len() as f64;
    if !(w > 0.0) {
        return Err(Error::Degenerate(
            "zero within-chain variance; R-hat is undefined".into(),
        ));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b = n * var(&means);
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

fn median(chains: &[Vec<f64>]) -> f64 {
    let mut all: Vec<f64> = chains.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    crate::diagnostics::quantile_sorted(&all, 0.5)
}

/// Split R-hat: the largest of the rank-normalized bulk value, the
/// rank-normalized folded (tail) value, and the classic split value on the
/// raw draws.
///
/// Rank normalization alone saturates when chains do not overlap at all
/// (two fully separated chains give about 1.8), so the classic statistic is
/// kept in the maximum to expose gross location differences.
pub fn split_rhat_chains(chains: &[Vec<f64>]) -> Result<f64> {
    check_shape(chains)?;
    let sp = split(chains);
    let classic = psrf(&sp).unwrap_or(f64::INFINITY);
    let bulk = psrf(&rank_normalize(&sp))?;
    let med = median(chains);
    let folded: Vec<Vec<f64>> = sp
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let tail = psrf(&rank_normalize(&folded)).unwrap_or(1.0);
    Ok(bulk.max(tail).max(classic))
}

/// Effective sample size of already-prepared (split, possibly normalized)
/// chains, using Geyer's initial positive sequence with monotone
/// smoothing, truncated at the first negative paired sum.
fn ess_of(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov = |c: usize, lag: usize| -> f64 {
        let ch = &chains[c];
        let mu = means[c];
        (0..n - lag).map(|t| (ch[t] - mu) * (ch[t + lag] - mu)).sum::<f64>() / n as f64
    };
    let acov0: Vec<f64> = (0..m).map(|c| acov(c, 0)).collect();
    let nf = n as f64;
    let w = acov0.iter().map(|a| a * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    if !(w > 0.0) {
        return Err(Error::Degenerate(
            "zero within-chain variance; ESS is undefined".into(),
        ));
    }
    let var_plus = if m > 1 {
        (nf - 1.0) / nf * w + var(&means)
    } else {
        w * (nf - 1.0) / nf
    };
    let rho = |lag: usize| -> f64 {
        let mean_acov = (0..m).map(|c| acov(c, lag)).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };

    let mut tau = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let r0 = if lag == 0 { 1.0 } else { rho(lag) };
        let pair = r0 + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = (tau - 1.0).max(1.0 / ((m * n) as f64).log10());
    Ok((m * n) as f64 / tau)
}

/// Rank-normalized bulk effective sample size.
pub fn ess_bulk_chains(chains: &[Vec<f64>]) -> Result<f64> {
    check_shape(chains)?;
    ess_of(&rank_normalize(&split(chains)))
}

pub fn split_rhat(draws: &PosteriorDraws, param: usize) -> Result<f64> {
    split_rhat_chains(&draws.chain_values(param))
}

pub fn ess(draws: &PosteriorDraws, param: usize) -> Result<f64> {
    ess_bulk_chains(&draws.chain_values(param))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_chains(seed: u64, chains: usize, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..chains)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn well_mixed_chains() {
        let c = normal_chains(1, 2, 1000);
        let r = split_rhat_chains(&c).unwrap();
        assert!(r < 1.01, "rhat {r}");
        let e = ess_bulk_chains(&c).unwrap();
        assert!((1600.0..=2400.0).contains(&e), "ess {e}");
    }

    #[test]
    fn separated_chains() {
        let mut c = normal_chains(2, 2, 1000);
        c[1].iter_mut().for_each(|v| *v += 10.0);
        assert!(split_rhat_chains(&c).unwrap() > 2.0);
    }

    #[test]
    fn rank_normalized_part_saturates() {
        let mut c = normal_chains(3, 2, 1000);
        c[1].iter_mut().for_each(|v| *v += 10.0);
        let bulk = psrf(&rank_normalize(&split(&c))).unwrap();
        assert!(bulk > 1.5 && bulk < 2.0, "{bulk}");
    }

    #[test]
    fn ar1_ess() {
        let phi: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sd = (1.0 - phi * phi).sqrt();
        let chains: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let mut x: f64 = rng.sample(StandardNormal);
                (0..5000)
                    .map(|_| {
                        x = phi * x + sd * rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let want = 10_000.0 * (1.0 - phi) / (1.0 + phi);
        let e = ess_bulk_chains(&chains).unwrap();
        assert!(e > want / 1.5 && e < want * 1.5, "ess {e} vs {want}");
    }

    #[test]
    fn constant_chains_are_degenerate() {
        let c = vec![vec![2.0; 50], vec![2.0; 50]];
        assert!(matches!(split_rhat_chains(&c), Err(Error::Degenerate(_))));
        assert!(matches!(ess_bulk_chains(&c), Err(Error::Degenerate(_))));
    }

    #[test]
    fn shape_errors() {
        assert!(split_rhat_chains(&[vec![1.0, 2.0, 3.0, 4.0]]).is_err());
        assert!(split_rhat_chains(&[vec![1.0, 2.0], vec![1.0, 3.0]]).is_err());
    }

    #[test]
    fn ties_share_ranks() {
        let z = rank_normalize(&[vec![1.0, 1.0, 2.0], vec![3.0, 1.0, 2.0]]);
        assert_eq!(z[0][0], z[0][1]);
        assert_eq!(z[0][0], z[1][1]);
        assert_eq!(z[0][2], z[1][2]);
    }
}
