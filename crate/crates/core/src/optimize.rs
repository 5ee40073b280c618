//! Bounded local minimization with finite-difference gradients.
//!
//! Projected quasi-Newton: BFGS on the free variables, Armijo backtracking
//! along the projection path, all in coordinates rescaled to the unit box.
//! Deterministic for a given start.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    /// Converged when the infinity norm of the projected gradient (unit-box
    /// coordinates) falls below this.
    pub grad_tol: f64,
    /// Converged when an accepted step is shorter than this (unit-box).
    pub step_tol: f64,
    /// Finite-difference step in unit-box coordinates.
    pub fd_step: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            step_tol: 1e-9,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    Step,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        self.termination != Termination::IterationLimit
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MinimizeError {
    #[error("objective is not finite at the start point")]
    NonFiniteStart,
    #[error("bounds are empty or start has wrong dimension")]
    BadProblem,
}

/// Minimize `f` over the box `[lower, upper]` starting from `x0` (clamped
/// into the box).
pub fn minimize_bounded(
    f: impl Fn(&[f64]) -> f64,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &MinimizeOptions,
) -> Result<Minimum, MinimizeError> {
    let n = x0.len();
    if lower.len() != n || upper.len() != n || lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
        return Err(MinimizeError::BadProblem);
    }
    let width: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| u - l).collect();
    let to_x = |u: &[f64]| -> Vec<f64> {
        (0..n).map(|i| lower[i] + u[i] * width[i]).collect()
    };
    let obj = |u: &[f64]| {
        let v = f(&to_x(u));
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    // degenerate dimensions (lo == hi) never move
    let fixed: Vec<bool> = width.iter().map(|&w| w == 0.0).collect();

    let mut u: Vec<f64> = (0..n)
        .map(|i| {
            if fixed[i] {
                0.0
            } else {
                ((x0[i] - lower[i]) / width[i]).clamp(0.0, 1.0)
            }
        })
        .collect();
    let mut fu = obj(&u);
    if !fu.is_finite() {
        return Err(MinimizeError::NonFiniteStart);
    }
    let mut g = gradient(&obj, &u, fu, &fixed, opts.fd_step);
    let mut h = identity(n);
    let mut termination = Termination::IterationLimit;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let active = active_set(&u, &g, &fixed);
        let pg_norm = (0..n)
            .filter(|&i| !active[i])
            .map(|i| g[i].abs())
            .fold(0.0, f64::max);
        if pg_norm < opts.grad_tol {
            termination = Termination::Gradient;
            break;
        }
        iterations += 1;

        let mut d = direction(&h, &g, &active);
        if dot(&d, &g) >= 0.0 {
            h = identity(n);
            d = direction(&h, &g, &active);
        }

        let Some((u_new, f_new)) = line_search(&obj, &u, fu, &g, &d) else {
            if h != identity(n) {
                h = identity(n);
                continue;
            }
            termination = Termination::Step;
            break;
        };
        let s: Vec<f64> = u_new.iter().zip(&u).map(|(a, b)| a - b).collect();
        let step = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let g_new = gradient(&obj, &u_new, f_new, &fixed, opts.fd_step);
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        bfgs_update(&mut h, &s, &y);
        u = u_new;
        fu = f_new;
        g = g_new;
        if step < opts.step_tol {
            termination = Termination::Step;
            break;
        }
    }

    Ok(Minimum {
        x: to_x(&u),
        f: fu,
        iterations,
        termination,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Variables pinned at a bound with the gradient pushing outward.
fn active_set(u: &[f64], g: &[f64], fixed: &[bool]) -> Vec<bool> {
    (0..u.len())
        .map(|i| fixed[i] || (u[i] <= 0.0 && g[i] > 0.0) || (u[i] >= 1.0 && g[i] < 0.0))
        .collect()
}

/// `-H g` restricted to the free variables.
fn direction(h: &[Vec<f64>], g: &[f64], active: &[bool]) -> Vec<f64> {
    let n = g.len();
    (0..n)
        .map(|i| {
            if active[i] {
                0.0
            } else {
                -(0..n).filter(|&j| !active[j]).map(|j| h[i][j] * g[j]).sum::<f64>()
            }
        })
        .collect()
}

fn project(u: &mut [f64]) {
    for v in u {
        *v = v.clamp(0.0, 1.0);
    }
}

fn line_search(
    obj: &impl Fn(&[f64]) -> f64,
    u: &[f64],
    fu: f64,
    g: &[f64],
    d: &[f64],
) -> Option<(Vec<f64>, f64)> {
    const C1: f64 = 1e-4;
    let dnorm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if dnorm == 0.0 {
        return None;
    }
    // never try a step that crosses more than the whole box
    let mut t = (1.0f64).min(1.0 / dnorm);
    for _ in 0..60 {
        let mut cand: Vec<f64> = u.iter().zip(d).map(|(a, b)| a + t * b).collect();
        project(&mut cand);
        let delta: Vec<f64> = cand.iter().zip(u).map(|(a, b)| a - b).collect();
        if delta.iter().all(|&v| v == 0.0) {
            return None;
        }
        let fc = obj(&cand);
        if fc.is_finite() && fc <= fu + C1 * dot(g, &delta) && fc <= fu {
            return Some((cand, fc));
        }
        t *= 0.5;
    }
    None
}

fn gradient(obj: &impl Fn(&[f64]) -> f64, u: &[f64], fu: f64, fixed: &[bool], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; u.len()];
    let mut x = u.to_vec();
    for i in 0..u.len() {
        if fixed[i] {
            continue;
        }
        let ui = u[i];
        g[i] = if ui - h >= 0.0 && ui + h <= 1.0 {
            x[i] = ui + h;
            let fp = obj(&x);
            x[i] = ui - h;
            let fm = obj(&x);
            (fp - fm) / (2.0 * h)
        } else if ui + h <= 1.0 {
            x[i] = ui + h;
            (obj(&x) - fu) / h
        } else {
            x[i] = ui - h;
            (fu - obj(&x)) / h
        };
        x[i] = ui;
        if !g[i].is_finite() {
            g[i] = 0.0;
        }
    }
    g
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64]) {
    let sy = dot(s, y);
    if sy <= 1e-12 {
        return;
    }
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}
