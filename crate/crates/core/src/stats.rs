//! Chi-squared tail probabilities and quantiles, BIC, and exact binomial
//! (Clopper-Pearson) confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::error::{Error, Result};

/// P[X <= x] for X ~ chi^2(dof).
pub fn chi2_cdf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(dof as f64 / 2.0, x / 2.0)
}

/// P[X > x] for X ~ chi^2(dof).
pub fn chi2_sf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(dof as f64 / 2.0, x / 2.0)
}

/// Inverse of [`chi2_cdf`], found by bisection to full precision.
pub fn chi2_quantile(p: f64, dof: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&p) || dof == 0 {
        return Err(Error::InvalidArgument(format!(
            "chi2 quantile needs p in [0,1) and dof >= 1, got p={p}, dof={dof}"
        )));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let mut hi = dof as f64;
    while chi2_cdf(hi, dof) < p {
        hi *= 2.0;
    }
    Ok(bisect(0.0, hi, |x| chi2_cdf(x, dof) < p))
}

/// Smallest point (to f64 resolution) in `[lo, hi]` where `below` turns false.
/// `below` must be monotone: true then false.
fn bisect(mut lo: f64, mut hi: f64, below: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `k ln(n) + 2 nll`; lower is better.
pub fn bic(nll: f64, n_params: usize, n_obs: usize) -> Result<f64> {
    if n_obs == 0 {
        return Err(Error::InvalidArgument("BIC needs at least one observation".into()));
    }
    Ok(n_params as f64 * (n_obs as f64).ln() + 2.0 * nll)
}

/// A binomial proportion with its exact confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationStat {
    pub successes: u64,
    pub trials: u64,
    pub confidence: f64,
    pub low: f64,
    pub high: f64,
}

impl PopulationStat {
    pub fn proportion(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }

    pub fn contains(&self, p: f64) -> bool {
        self.low <= p && p <= self.high
    }
}

/// Two-sided Clopper-Pearson interval, from beta-distribution quantiles:
/// `low = B^-1(a/2; k, n-k+1)`, `high = B^-1(1-a/2; k+1, n-k)`.
pub fn clopper_pearson(successes: u64, trials: u64, confidence: f64) -> Result<PopulationStat> {
    if trials == 0 || successes > trials {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= successes <= trials and trials >= 1, got {successes}/{trials}"
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence must lie in (0,1), got {confidence}"
        )));
    }
    let tail = (1.0 - confidence) / 2.0;
    let (k, n) = (successes as f64, trials as f64);
    let low = if successes == 0 {
        0.0
    } else {
        beta_quantile(tail, k, n - k + 1.0)
    };
    let high = if successes == trials {
        1.0
    } else {
        beta_quantile(1.0 - tail, k + 1.0, n - k)
    };
    Ok(PopulationStat {
        successes,
        trials,
        confidence,
        low,
        high,
    })
}

fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    bisect(0.0, 1.0, |x| beta_reg(a, b, x) < p)
}
