//! Spot-dependent default intensity, survival weights and calibration of
//! the intensity level to a target survival probability.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::paths::PathSet;

/// `γ(S) = γ₀ (S_ref / S)^γ₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityModel {
    pub gamma0: f64,
    pub gamma1: f64,
    /// Reference spot `S_ref`, normally the time-0 spot.
    pub s_ref: f64,
    pub recovery: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        IntensityModel {
            gamma0: 0.02,
            gamma1: 1.2,
            s_ref: 100.0,
            recovery: 0.4,
        }
    }
}

impl IntensityModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0.is_finite() && self.gamma0 > 0.0) {
            return Err(invalid("gamma0", "must be > 0"));
        }
        if !self.gamma1.is_finite() {
            return Err(Error::NonFinite("gamma1"));
        }
        if !(self.s_ref.is_finite() && self.s_ref > 0.0) {
            return Err(invalid("s_ref", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.recovery) {
            return Err(invalid("recovery", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn intensity(&self, s: f64) -> Result<f64> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Domain(format!("intensity needs a positive spot, got {s}")));
        }
        Ok(self.gamma0 * (self.s_ref / s).powf(self.gamma1))
    }
}

/// Survival factors `exp(−Δt Σ_{ι<i} γ_ι)` and default densities
/// `γ_i · survival_i` for a sequence of per-date intensities.
pub fn survival_weights(gammas: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(invalid("dt", "must be > 0"));
    }
    let mut survival = Vec::with_capacity(gammas.len());
    let mut density = Vec::with_capacity(gammas.len());
    let mut acc = 0.0;
    for &g in gammas {
        if !(g.is_finite() && g >= 0.0) {
            return Err(invalid("intensity", "must be finite and >= 0"));
        }
        let s = (-dt * acc).exp();
        survival.push(s);
        density.push(g * s);
        acc += g;
    }
    Ok((survival, density))
}

/// Per-path integrated normalized intensity `Δt Σ_{i<N} (S_ref/S_i)^γ₁`
/// (left Riemann sum over the stored dates), so that the survival of path
/// `j` is `exp(−γ₀ A_j)`.
fn exposure_integrals(gamma1: f64, s_ref: f64, paths: &PathSet, factor: usize) -> Result<Vec<f64>> {
    let n = paths.n_dates();
    (0..paths.n_paths)
        .map(|j| {
            let p = paths.path(factor, j);
            let mut a = 0.0;
            for i in 0..n - 1 {
                let s = p[i];
                if !(s > 0.0) {
                    return Err(Error::Domain(format!("non-positive spot {s} on path {j}")));
                }
                a += (s_ref / s).powf(gamma1) * (paths.times[i + 1] - paths.times[i]);
            }
            Ok(a)
        })
        .collect()
}

/// Monte-Carlo survival probability to the last stored date.
pub fn mean_survival(gamma0: f64, gamma1: f64, s_ref: f64, paths: &PathSet, factor: usize) -> Result<f64> {
    let a = exposure_integrals(gamma1, s_ref, paths, factor)?;
    Ok(a.iter().map(|v| (-gamma0 * v).exp()).sum::<f64>() / a.len() as f64)
}

/// Upper end of the default search bracket for `γ₀`.
pub const GAMMA0_MAX: f64 = 10.0;

/// Solves `mean_j exp(−γ₀ A_j) = target` for `γ₀ ∈ (0, gamma0_max]` by
/// bisection on the monotone map. Fails if the target is not reachable
/// inside the bracket.
pub fn calibrate_gamma0(
    gamma1: f64,
    s_ref: f64,
    paths: &PathSet,
    factor: usize,
    target: f64,
    gamma0_max: f64,
) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(invalid("target", "survival target must lie in (0, 1)"));
    }
    if paths.n_dates() < 2 || paths.n_paths == 0 {
        return Err(invalid("paths", "need at least two dates and one path"));
    }
    let a = exposure_integrals(gamma1, s_ref, paths, factor)?;
    let m = a.len() as f64;
    let surv = |g: f64| a.iter().map(|v| (-g * v).exp()).sum::<f64>() / m;
    if surv(gamma0_max) > target {
        return Err(Error::CalibrationFailed(format!(
            "survival {:.6} at gamma0 = {gamma0_max} still above target {target}",
            surv(gamma0_max)
        )));
    }
    let (mut lo, mut hi) = (0.0, gamma0_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if surv(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
    }
    let g = 0.5 * (lo + hi);
    let residual = (surv(g) - target).abs();
    if residual > 1e-3 || g <= 0.0 {
        return Err(Error::CalibrationFailed(format!(
            "residual {residual:e} at gamma0 = {g}"
        )));
    }
    Ok(g)
}

/// `(center + scale·Z)²` for standard normal `Z`.
pub fn sample_gamma1_prior(center: f64, scale: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(invalid("count", "must be >= 1"));
    }
    if !center.is_finite() || !scale.is_finite() {
        return Err(Error::NonFinite("prior parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (center + scale * z).powi(2)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{simulate_gbm, TimeGrid};

    #[test]
    fn intensity_values() {
        let m = IntensityModel::default();
        assert_eq!(m.intensity(100.0).unwrap(), 0.02);
        assert!((m.intensity(50.0).unwrap() - 0.045_947_934_199_881_4).abs() < 1e-12);
        let flat = IntensityModel { gamma1: 0.0, ..m };
        assert_eq!(flat.intensity(3.0).unwrap(), 0.02);
        assert!(m.intensity(0.0).is_err());
    }

    #[test]
    fn constant_intensity_weights() {
        let (s, d) = survival_weights(&[0.1; 5], 0.5).unwrap();
        for i in 0..5 {
            assert!((s[i] - (-0.1 * 0.5 * i as f64).exp()).abs() < 1e-15);
            assert_eq!(d[i], 0.1 * s[i]);
        }
        let (s, d) = survival_weights(&[0.0; 3], 0.1).unwrap();
        assert_eq!(s, vec![1.0; 3]);
        assert_eq!(d, vec![0.0; 3]);
        assert!(survival_weights(&[-0.1], 0.1).is_err());
    }

    #[test]
    fn total_probability() {
        let (gamma, t, n) = (0.3, 2.0, 2000);
        let dt = t / n as f64;
        let (s, d) = survival_weights(&vec![gamma; n], dt).unwrap();
        let terminal = s[n - 1] * (-gamma * dt).exp();
        let total = d.iter().sum::<f64>() * dt + terminal;
        assert!((total - 1.0).abs() <= gamma * gamma * t * dt);
    }

    #[test]
    fn flat_calibration_matches_closed_form() {
        let g = TimeGrid::new(2.0, 100, 1).unwrap();
        let p = simulate_gbm(100.0, 0.0, 0.3, &g, 200, 1).unwrap();
        let g0 = calibrate_gamma0(0.0, 100.0, &p, 0, 0.05, GAMMA0_MAX).unwrap();
        assert!((g0 + 0.05f64.ln() / 2.0).abs() < 1e-6);
    }

    #[test]
    fn calibration_residual_and_monotonicity() {
        let g = TimeGrid::new(2.0, 100, 1).unwrap();
        let p = simulate_gbm(100.0, 0.0, 0.3, &g, 1000, 2).unwrap();
        let g0 = calibrate_gamma0(1.2, 100.0, &p, 0, 0.05, GAMMA0_MAX).unwrap();
        assert!((mean_survival(g0, 1.2, 100.0, &p, 0).unwrap() - 0.05).abs() <= 1e-3);
        let g1 = calibrate_gamma0(1.2, 100.0, &p, 0, 0.10, GAMMA0_MAX).unwrap();
        assert!(g1 < g0);
        let mut prev = 1.0;
        for k in 1..50 {
            let s = mean_survival(0.1 * k as f64, 1.2, 100.0, &p, 0).unwrap();
            assert!(s < prev);
            prev = s;
        }
        assert!(matches!(
            calibrate_gamma0(1.2, 100.0, &p, 0, 1e-30, 1.0),
            Err(Error::CalibrationFailed(_))
        ));
    }

    #[test]
    fn prior_draws() {
        let d = sample_gamma1_prior(1.2, 0.0, 10, 1).unwrap();
        assert!(d.iter().all(|v| (v - 1.44).abs() < 1e-15));
        let n = 1_000_000;
        let d = sample_gamma1_prior(1.2, 1.0, n, 3).unwrap();
        assert!(d.iter().all(|v| *v >= 0.0));
        let m = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
        assert!((m - 2.44).abs() <= 3.0 * (var / n as f64).sqrt());
    }
}
