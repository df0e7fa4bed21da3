//! Exposure profiles and CVA estimators over simulated paths, with
//! pluggable valuation (exact repricing or GP surrogates).

mod valuer;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use valuer::{
    train_grid_mgp_valuer, train_grid_valuer, train_path_valuer, DateModel, ExactValuer, GpValuer, Instrument, Market,
    MgpValuer, OffsetValuer, Portfolio, Position, StateMap, SurrogateCfg, Valuation, Valuer,
};

use crate::credit::{calibrate_gamma0, survival_weights, IntensityModel};
use crate::error::{invalid, Error, Result};
use crate::paths::PathSet;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// Discount factors `β_t` along the paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Discount {
    /// `exp(−r (t − t_first))` on the path clock.
    Flat { rate: f64 },
    /// `exp(−I_t)` for a stored integrated short-rate factor `I`.
    Factor { name: String },
}

/// Portfolio values (and surrogate variances) per date and path, with the
/// discount factors used for exposure.
#[derive(Debug, Clone)]
pub struct ExposureCube {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub valuer: String,
    /// `[date][path]`.
    values: Vec<f64>,
    variances: Option<Vec<f64>>,
    discounts: Vec<f64>,
}

impl ExposureCube {
    /// Builds a cube from explicit `[date][path]` arrays.
    pub fn from_parts(
        times: Vec<f64>,
        n_paths: usize,
        values: Vec<f64>,
        variances: Option<Vec<f64>>,
        discounts: Vec<f64>,
    ) -> Result<ExposureCube> {
        let n = times.len() * n_paths;
        if values.len() != n || discounts.len() != n || variances.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: values.len(),
            });
        }
        if n_paths == 0 || times.is_empty() {
            return Err(invalid("cube", "needs at least one date and one path"));
        }
        Ok(ExposureCube {
            times,
            n_paths,
            seed: 0,
            valuer: "explicit".into(),
            values,
            variances,
            discounts,
        })
    }

    pub fn n_dates(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_paths + j]
    }

    #[inline]
    pub fn discount(&self, i: usize, j: usize) -> f64 {
        self.discounts[i * self.n_paths + j]
    }

    #[inline]
    pub fn std_dev(&self, i: usize, j: usize) -> f64 {
        self.variances
            .as_ref()
            .map_or(0.0, |v| v[i * self.n_paths + j].max(0.0).sqrt())
    }

    pub fn has_variance(&self) -> bool {
        self.variances.is_some()
    }

    /// Same cube with every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> ExposureCube {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        if let Some(var) = out.variances.as_mut() {
            var.iter_mut().for_each(|v| *v *= c * c);
        }
        out
    }

    /// Uniform date spacing.
    fn dt(&self) -> Result<f64> {
        if self.times.len() < 2 {
            return Err(Error::GridMismatch("need at least two dates".into()));
        }
        let dt = self.times[1] - self.times[0];
        for w in self.times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(Error::GridMismatch("exposure dates must be uniformly spaced".into()));
            }
        }
        Ok(dt)
    }
}

/// Values the portfolio along every path. `time_offset` is the model time
/// of the first path date; the valuer's date index `i` is path date `i`.
pub fn exposure_cube(
    valuer: &dyn Valuer,
    portfolio: &Portfolio,
    paths: &PathSet,
    time_offset: f64,
    discount: &Discount,
    with_variance: bool,
) -> Result<ExposureCube> {
    let n = paths.n_dates();
    if valuer.n_dates() < n {
        return Err(Error::MissingModel(valuer.n_dates()));
    }
    let map = portfolio.state_map(paths, time_offset)?;
    let disc_factor = match discount {
        Discount::Factor { name } => Some(paths.factor(name)?),
        Discount::Flat { rate } => {
            if !rate.is_finite() {
                return Err(Error::NonFinite("discount rate"));
            }
            None
        }
    };
    let m = paths.n_paths;
    let per_path: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut vals = Vec::with_capacity(n);
            let mut vars = Vec::with_capacity(n);
            let mut disc = Vec::with_capacity(n);
            let mut state = Vec::with_capacity(map.dim());
            for i in 0..n {
                map.fill(paths, j, i, &mut state)?;
                let v = valuer.value(i, &state, with_variance)?;
                if !v.value.is_finite() {
                    return Err(Error::NonFinite("portfolio value"));
                }
                vals.push(v.value);
                vars.push(v.variance);
                disc.push(match (discount, disc_factor) {
                    (_, Some(f)) => (-paths.value(f, j, i)).exp(),
                    (Discount::Flat { rate }, None) => (-rate * (paths.times[i] - paths.times[0])).exp(),
                    _ => unreachable!(),
                });
            }
            Ok((vals, vars, disc))
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; n * m];
    let mut variances = vec![0.0; n * m];
    let mut discounts = vec![0.0; n * m];
    for (j, (v, s, d)) in per_path.into_iter().enumerate() {
        for i in 0..n {
            values[i * m + j] = v[i];
            variances[i * m + j] = s[i];
            discounts[i * m + j] = d[i];
        }
    }
    Ok(ExposureCube {
        times: paths.times.clone(),
        n_paths: m,
        seed: paths.seed,
        valuer: valuer.kind().to_string(),
        values,
        variances: with_variance.then_some(variances),
        discounts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpeRow {
    pub time: f64,
    pub epe: f64,
    /// Half-width of the 95% surrogate band.
    pub band: f64,
}

/// `EPE(t_i) = mean_j β π⁺` with band `mean_j 1{π>0}·1.96·β·sd`.
pub fn epe_profile(cube: &ExposureCube) -> Vec<EpeRow> {
    let m = cube.n_paths as f64;
    (0..cube.n_dates())
        .map(|i| {
            let mut epe = 0.0;
            let mut band = 0.0;
            for j in 0..cube.n_paths {
                let (v, b) = (cube.value(i, j), cube.discount(i, j));
                if v > 0.0 {
                    epe += b * v;
                    band += Z95 * b * cube.std_dev(i, j);
                }
            }
            EpeRow {
                time: cube.times[i],
                epe: epe / m,
                band: band / m,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaReport {
    pub cva: f64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Half-width of the 95% surrogate band on the CVA, when the valuer
    /// reports variances.
    pub gp_band: Option<f64>,
    pub epe: Vec<EpeRow>,
    pub n_paths: usize,
    pub n_dates: usize,
    pub seed: u64,
    pub valuer: String,
}

impl CvaReport {
    fn from_contributions(cube: &ExposureCube, c: &[f64], band: Option<f64>) -> Result<CvaReport> {
        let m = c.len() as f64;
        let cva = c.iter().sum::<f64>() / m;
        let var = if c.len() > 1 {
            c.iter().map(|v| (v - cva) * (v - cva)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        let se = (var / m).sqrt();
        if !(cva.is_finite() && se.is_finite() && band.is_none_or(f64::is_finite)) {
            return Err(Error::NonFinite("CVA estimate"));
        }
        Ok(CvaReport {
            cva,
            std_error: se,
            ci_lo: cva - Z95 * se,
            ci_hi: cva + Z95 * se,
            gp_band: band,
            epe: epe_profile(cube),
            n_paths: cube.n_paths,
            n_dates: cube.n_dates(),
            seed: cube.seed,
            valuer: cube.valuer.clone(),
        })
    }

    /// `metric,value,ci_lo,ci_hi` table.
    pub fn write_metrics<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "metric,value,ci_lo,ci_hi")?;
        writeln!(out, "cva,{},{},{}", self.cva, self.ci_lo, self.ci_hi)?;
        writeln!(out, "std_error,{},,", self.std_error)?;
        if let Some(b) = self.gp_band {
            writeln!(out, "gp_band,{b},{},{}", self.cva - b, self.cva + b)?;
        }
        writeln!(out, "paths,{},,", self.n_paths)?;
        writeln!(out, "dates,{},,", self.n_dates)?;
        writeln!(out, "seed,{},,", self.seed)
    }

    pub fn write_epe<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_epe(&self.epe, out)
    }
}

/// `date,epe,band_lo,band_hi` table.
pub fn write_epe<W: Write>(rows: &[EpeRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "date,epe,band_lo,band_hi")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.time, r.epe, r.epe - r.band, r.epe + r.band)?;
    }
    Ok(())
}

fn check_recovery(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(invalid("recovery", "must lie in [0, 1]"));
    }
    Ok(())
}

/// Default independent of exposure: `(1−R) Σ_{i≥1} mean_j(β π⁺) Δp_i`,
/// with `dp[i-1] = P(t_i ≤ τ < t_{i+1})` for the cube's dates after the
/// first.
pub fn cva0_independent(cube: &ExposureCube, dp: &[f64], recovery: f64) -> Result<CvaReport> {
    check_recovery(recovery)?;
    let n = cube.n_dates();
    if dp.len() + 1 != n {
        return Err(Error::GridMismatch(format!(
            "{} default probabilities for {} exposure dates",
            dp.len(),
            n - 1
        )));
    }
    if dp.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(invalid("dp", "default probabilities must be >= 0"));
    }
    if dp.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(invalid("dp", "default probabilities sum above one"));
    }
    let lgd = 1.0 - recovery;
    let (c, band): (Vec<f64>, Vec<f64>) = (0..cube.n_paths)
        .map(|j| {
            let mut acc = 0.0;
            let mut b = 0.0;
            for i in 1..n {
                let v = cube.value(i, j);
                if v > 0.0 {
                    acc += cube.discount(i, j) * v * dp[i - 1];
                    b += Z95 * cube.discount(i, j) * cube.std_dev(i, j) * dp[i - 1];
                }
            }
            (lgd * acc, lgd * b)
        })
        .unzip();
    let band = cube
        .has_variance()
        .then(|| band.iter().sum::<f64>() / band.len() as f64);
    CvaReport::from_contributions(cube, &c, band)
}

/// Per-path intensities `[path][date]` from a spot factor.
pub fn path_intensities(model: &IntensityModel, paths: &PathSet, factor: usize) -> Result<Vec<Vec<f64>>> {
    model.validate()?;
    (0..paths.n_paths)
        .map(|j| paths.path(factor, j).iter().map(|s| model.intensity(*s)).collect())
        .collect()
}

/// Stochastic-intensity estimator:
/// `(1−R)Δt/M Σ_j Σ_{i≥1} β π⁺ exp(−Δt Σ_{ι<i} γ_ι) γ_i`, with the MC
/// standard error from the per-path contributions.
pub fn cva0_intensity(cube: &ExposureCube, gammas: &[Vec<f64>], recovery: f64) -> Result<CvaReport> {
    check_recovery(recovery)?;
    let dt = cube.dt()?;
    let n = cube.n_dates();
    if gammas.len() != cube.n_paths || gammas.iter().any(|g| g.len() != n) {
        return Err(Error::GridMismatch("intensities must cover every path and date".into()));
    }
    let lgd = 1.0 - recovery;
    let rows: Vec<(f64, f64)> = gammas
        .par_iter()
        .enumerate()
        .map(|(j, g)| {
            let (_, density) = survival_weights(g, dt)?;
            let mut acc = 0.0;
            let mut b = 0.0;
            for i in 1..n {
                let v = cube.value(i, j);
                if v > 0.0 {
                    acc += cube.discount(i, j) * v * density[i];
                    b += Z95 * cube.discount(i, j) * cube.std_dev(i, j) * density[i];
                }
            }
            Ok((lgd * dt * acc, lgd * dt * b))
        })
        .collect::<Result<_>>()?;
    let (c, band): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let band = cube
        .has_variance()
        .then(|| band.iter().sum::<f64>() / band.len() as f64);
    CvaReport::from_contributions(cube, &c, band)
}

/// Conditional CVA at `t = offset·Δt` for each outer state: inner paths
/// from `inner(j)` start at the outer state, are valued with the valuer
/// re-indexed by `offset`, and survival restarts at the inner root.
#[allow(clippy::too_many_arguments)]
pub fn cva1_distribution<F>(
    valuer: &dyn Valuer,
    portfolio: &Portfolio,
    offset: usize,
    time_offset: f64,
    n_outer: usize,
    inner: F,
    discount: &Discount,
    intensity: &IntensityModel,
    spot_factor: &str,
    recovery: f64,
) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<PathSet> + Sync,
{
    if offset + 1 >= valuer.n_dates() {
        return Err(invalid("horizon", "no exposure dates left after the outer horizon"));
    }
    if n_outer == 0 {
        return Err(invalid("outer", "need at least one outer path"));
    }
    let shifted = OffsetValuer { inner: valuer, offset };
    (0..n_outer)
        .into_par_iter()
        .map(|j| {
            let paths = inner(j)?;
            let cube = exposure_cube(&shifted, portfolio, &paths, time_offset, discount, false)?;
            let f = paths.factor(spot_factor)?;
            let g = path_intensities(intensity, &paths, f)?;
            Ok(cva0_intensity(&cube, &g, recovery)?.cva)
        })
        .collect()
}

/// Empirical `α`-quantile with linear interpolation between order
/// statistics at fractional rank `(n−1)α`.
pub fn quantile(samples: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha", "must lie in (0, 1)"));
    }
    if samples.is_empty() {
        return Err(invalid("samples", "empty sample"));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("samples"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * alpha;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    Ok(s[lo] + (h - lo as f64) * (s[hi] - s[lo]))
}

/// VaR of level `α` of the CVA increments `cva1 − cva0`.
pub fn cva_var(cva1: &[f64], cva0: f64, alpha: f64) -> Result<f64> {
    let inc: Vec<f64> = cva1.iter().map(|c| c - cva0).collect();
    quantile(&inc, alpha)
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("samples", "empty sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqRow {
    pub gamma1: f64,
    /// `None` when calibration failed for this draw.
    pub gamma0: Option<f64>,
    pub cva: Option<f64>,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqReport {
    pub rows: Vec<UqRow>,
    pub failures: usize,
    /// 5%, 50% and 95% quantiles of the calibrated CVA₀ sample.
    pub quantiles: Option<[f64; 3]>,
}

impl UqReport {
    pub fn cvas(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.cva).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "gamma1,gamma0,cva,std_error")?;
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.gamma1, f(r.gamma0), f(r.cva), f(r.std_error))?;
        }
        Ok(())
    }
}

/// CVA₀ for each prior draw of `γ₁`, with `γ₀` calibrated on the same
/// paths to the survival target. Failed calibrations are kept as rows
/// without values and counted.
#[allow(clippy::too_many_arguments)]
pub fn uq_cva(
    cube: &ExposureCube,
    paths: &PathSet,
    spot_factor: &str,
    s_ref: f64,
    gamma1_draws: &[f64],
    target: f64,
    gamma0_max: f64,
    recovery: f64,
) -> Result<UqReport> {
    if cube.n_paths != paths.n_paths || cube.n_dates() != paths.n_dates() {
        return Err(Error::GridMismatch("cube and paths differ".into()));
    }
    let f = paths.factor(spot_factor)?;
    let rows: Vec<UqRow> = gamma1_draws
        .par_iter()
        .map(|&g1| {
            let g0 = match calibrate_gamma0(g1, s_ref, paths, f, target, gamma0_max) {
                Ok(g) => g,
                Err(Error::CalibrationFailed(_)) => {
                    return Ok(UqRow {
                        gamma1: g1,
                        gamma0: None,
                        cva: None,
                        std_error: None,
                    })
                }
                Err(e) => return Err(e),
            };
            let model = IntensityModel {
                gamma0: g0,
                gamma1: g1,
                s_ref,
                recovery,
            };
            let rep = cva0_intensity(cube, &path_intensities(&model, paths, f)?, recovery)?;
            Ok(UqRow {
                gamma1: g1,
                gamma0: Some(g0),
                cva: Some(rep.cva),
                std_error: Some(rep.std_error),
            })
        })
        .collect::<Result<_>>()?;
    let failures = rows.iter().filter(|r| r.cva.is_none()).count();
    let cvas: Vec<f64> = rows.iter().filter_map(|r| r.cva).collect();
    let quantiles = if cvas.is_empty() {
        None
    } else {
        Some([quantile(&cvas, 0.05)?, quantile(&cvas, 0.5)?, quantile(&cvas, 0.95)?])
    };
    Ok(UqReport {
        rows,
        failures,
        quantiles,
    })
}
