//! Box-constrained gradient minimizers used for hyperparameter training.
//!
//! Adam with random restarts does the global work; an optional BFGS pass
//! polishes the best Adam iterate so that the returned point is stationary
//! to much better than Adam's step noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerCfg {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Total number of Adam runs, the first starting at the supplied point.
    pub restarts: usize,
    /// Std-dev of the Gaussian perturbation (in log-parameter units) used to
    /// seed restarts after the first.
    pub restart_spread: f64,
    /// Maximum BFGS iterations after Adam; 0 disables polishing.
    pub polish_iterations: usize,
    pub seed: u64,
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        OptimizerCfg {
            iterations: 300,
            learning_rate: 0.1,
            restarts: 5,
            restart_spread: 1.0,
            polish_iterations: 100,
            seed: 0,
        }
    }
}

impl OptimizerCfg {
    /// Single short Adam run from the starting point, for warm starts.
    pub fn warm(iterations: usize) -> Self {
        OptimizerCfg {
            iterations,
            restarts: 1,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Box bounds, one `(lo, hi)` pair per coordinate.
pub type Bounds = Vec<(f64, f64)>;

fn project(x: &mut [f64], bounds: &Bounds) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Minimizes `f` (returning value and gradient) over a box. Failed
/// evaluations end the current run; the best finite point seen across all
/// runs is returned.
pub fn minimize<F>(mut f: F, x0: &[f64], bounds: &Bounds, cfg: &OptimizerCfg) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dim = x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Minimum> = None;
    let mut evaluations = 0usize;
    let mut last_err = None;

    let consider = |x: &[f64], v: f64, best: &mut Option<Minimum>| {
        if v.is_finite() && best.as_ref().is_none_or(|b| v < b.value) {
            *best = Some(Minimum {
                x: x.to_vec(),
                value: v,
                evaluations: 0,
            });
        }
    };

    for run in 0..cfg.restarts.max(1) {
        let mut x = x0.to_vec();
        if run > 0 {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.restart_spread * z;
            }
        }
        project(&mut x, bounds);
        let mut m = vec![0.0; dim];
        let mut s = vec![0.0; dim];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for it in 0..=cfg.iterations {
            let (v, g) = match f(&x) {
                Ok(r) => r,
                Err(e) => {
                    last_err = Some(e);
                    break;
                }
            };
            evaluations += 1;
            if !v.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
                break;
            }
            consider(&x, v, &mut best);
            if it == cfg.iterations {
                break;
            }
            let t = (it + 1) as i32;
            for k in 0..dim {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                s[k] = b2 * s[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / (1.0 - b1.powi(t));
                let sh = s[k] / (1.0 - b2.powi(t));
                x[k] -= cfg.learning_rate * mh / (sh.sqrt() + eps);
            }
            project(&mut x, bounds);
        }
    }

    let mut best = match best {
        Some(b) => b,
        None => {
            return Err(last_err.unwrap_or(Error::NonFinite("objective")));
        }
    };
    if cfg.polish_iterations > 0 {
        if let Ok(p) = bfgs(&mut f, &best.x, bounds, cfg.polish_iterations, &mut evaluations) {
            if p.value <= best.value {
                best = p;
            }
        }
    }
    best.evaluations = evaluations;
    Ok(best)
}

/// Projected BFGS with Armijo backtracking. Coordinates pinned at a bound
/// with the gradient pushing outward are frozen for the step.
fn bfgs<F>(f: &mut F, x0: &[f64], bounds: &Bounds, max_iter: usize, evaluations: &mut usize) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    *evaluations += 1;
    // first step moves at most one unit in the largest coordinate
    let scaled_identity = |g: &[f64]| {
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let c = 1.0 / gmax.max(1.0);
        let mut h = identity(n);
        h.iter_mut().enumerate().for_each(|(i, r)| r[i] = c);
        h
    };
    let mut h = scaled_identity(&g);
    let free = |x: &[f64], g: &[f64]| -> Vec<bool> {
        (0..n)
            .map(|k| {
                let (lo, hi) = bounds[k];
                !((x[k] <= lo && g[k] > 0.0) || (x[k] >= hi && g[k] < 0.0))
            })
            .collect()
    };
    for _ in 0..max_iter {
        let active = free(&x, &g);
        let gnorm: f64 = g
            .iter()
            .zip(&active)
            .filter(|(_, a)| **a)
            .map(|(v, _)| v * v)
            .sum::<f64>()
            .sqrt();
        let ginf = g
            .iter()
            .zip(&active)
            .filter(|(_, a)| **a)
            .fold(0.0f64, |m, (v, _)| m.max(v.abs()));
        if ginf < 1e-5 {
            break;
        }
        let mut p: Vec<f64> = (0..n)
            .map(|i| {
                if !active[i] {
                    return 0.0;
                }
                -(0..n).filter(|j| active[*j]).map(|j| h[i][j] * g[j]).sum::<f64>()
            })
            .collect();
        let mut slope: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            h = scaled_identity(&g);
            let c = h[0][0];
            p = (0..n).map(|i| if active[i] { -c * g[i] } else { 0.0 }).collect();
            slope = -c * gnorm * gnorm;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + step * b).collect();
            project(&mut xn, bounds);
            if let Ok((fnew, gnew)) = f(&xn) {
                *evaluations += 1;
                if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += (1.0 + yhy * rho) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        if improvement.abs() <= 2.2e-9 * fx.abs().max(1.0) {
            break;
        }
    }
    Ok(Minimum {
        x,
        value: fx,
        evaluations: 0,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((v, g))
    }

    #[test]
    fn adam_plus_polish_finds_rosenbrock_minimum() {
        let bounds = vec![(-5.0, 5.0); 2];
        let m = minimize(rosenbrock, &[-1.2, 1.0], &bounds, &OptimizerCfg::default()).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?}", m.x);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| Ok(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let m = minimize(f, &[0.0], &vec![(-1.0, 1.0)], &OptimizerCfg::default()).unwrap();
        assert_eq!(m.x[0], 1.0);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &[f64]| {
            Ok((
                (x[0] * 5.0).sin() + 0.1 * x[0] * x[0],
                vec![5.0 * (x[0] * 5.0).cos() + 0.2 * x[0]],
            ))
        };
        let start = f(&[0.7]).unwrap().0;
        let cfg = OptimizerCfg {
            learning_rate: 2.0,
            iterations: 5,
            restarts: 1,
            polish_iterations: 0,
            ..Default::default()
        };
        let m = minimize(f, &[0.7], &vec![(-10.0, 10.0)], &cfg).unwrap();
        assert!(m.value <= start);
    }

    #[test]
    fn all_failures_is_an_error() {
        let f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Err(Error::IllConditioned { jitter: 1e-6 }) };
        assert!(minimize(f, &[0.0], &vec![(-1.0, 1.0)], &OptimizerCfg::default()).is_err());
    }
}
