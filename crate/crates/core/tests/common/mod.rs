//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the engine's numerical code paths.

#![allow(dead_code)]

/// Step-by-step replay of a single-stock sell sequence written the long way:
/// literal exponential squash, explicit soft-max probabilities, nested loops.
pub struct SellStep {
    pub bin: usize,
    pub raw_reward: f64,
}

pub fn sequential_nll(steps: &[SellStep], alpha: f64, beta: f64, gamma: f64, rho: f64) -> f64 {
    let mut q = vec![vec![0.0f64; 3]; 2];
    let mut profit = 0.0f64;
    let mut nll = 0.0f64;
    for step in steps {
        let s = if profit < 0.0 { 0 } else { 1 };
        let mut denom = 0.0;
        for b in 0..3 {
            denom += (q[s][b] * beta).exp();
        }
        let p = (q[s][step.bin] * beta).exp() / denom;
        nll -= p.ln();
        let e = (-step.raw_reward / rho).exp();
        let r = (1.0 - e) / (1.0 + e);
        profit += r;
        let s_next = if profit < 0.0 { 0 } else { 1 };
        let mut best = f64::NEG_INFINITY;
        for b in 0..3 {
            if q[s_next][b] > best {
                best = q[s_next][b];
            }
        }
        let delta = alpha * (r + gamma * best - q[s][step.bin]);
        q[s][step.bin] += delta;
    }
    nll
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let mut acc = 0.0;
    for i in 0..k {
        acc += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    acc
}

/// P[Bin(n, p) >= k] by direct summation of the pmf.
pub fn binom_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    (k..=n)
        .map(|j| {
            (ln_choose(n, j) + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp()
        })
        .sum()
}

/// P[Bin(n, p) <= k].
pub fn binom_lower_tail(k: u64, n: u64, p: f64) -> f64 {
    (0..=k)
        .map(|j| {
            (ln_choose(n, j) + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp()
        })
        .sum()
}

/// Clopper-Pearson bounds by bisection on the binomial tails.
pub fn clopper_pearson_oracle(k: u64, n: u64, confidence: f64) -> (f64, f64) {
    let a = (1.0 - confidence) / 2.0;
    let solve = |f: &dyn Fn(f64) -> bool| {
        // f true below the root
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if f(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let low = if k == 0 {
        0.0
    } else {
        solve(&|p| binom_upper_tail(k, n, p) < a)
    };
    let high = if k == n {
        1.0
    } else {
        solve(&|p| binom_lower_tail(k, n, p) > a)
    };
    (low, high)
}
