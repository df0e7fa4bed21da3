//! Seeded Monte-Carlo simulation of risk factors on a fixed time grid.
//!
//! Randomness is organized in streams keyed by `(seed, path block, factor)`.
//! Each stream produces its block's draws time-major, then by path within
//! the block, so a factor's draws do not depend on how many other factors a
//! scheme uses or on the thread count.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::psd_factor;
use crate::pricers::{HestonParams, HullWhite};

/// Paths per random stream block.
pub const BLOCK: usize = 256;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a list of tags.
pub fn sub_seed(root: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(root), |acc, t| {
        splitmix(acc ^ splitmix(t.wrapping_add(0x51_7CC1_B727_220A)))
    })
}

/// `count` standard normals of stream `(seed, block, factor)`.
pub fn normal_stream(seed: u64, block: u64, factor: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &[block, factor]));
    (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Uniform time grid of `steps` stored dates over `[0, horizon]`, each
/// split into `substeps` simulation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize, substeps: usize) -> Result<TimeGrid> {
        let g = TimeGrid {
            horizon,
            steps,
            substeps,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(invalid("horizon", "must be > 0"));
        }
        if self.steps == 0 || self.substeps == 0 {
            return Err(invalid("steps", "steps and substeps must be >= 1"));
        }
        Ok(())
    }

    /// Spacing of stored dates.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Simulation step.
    pub fn fine_dt(&self) -> f64 {
        self.dt() / self.substeps as f64
    }

    pub fn fine_steps(&self) -> usize {
        self.steps * self.substeps
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| i as f64 * self.dt()).collect()
    }
}

/// Simulated trajectories: `factor × path × date`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub times: Vec<f64>,
    pub factors: Vec<String>,
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: String,
    pub substeps: usize,
    values: Vec<f64>,
}

impl PathSet {
    /// Assembles a path set from `values[factor][path][date]` laid out flat.
    pub fn from_values(
        times: Vec<f64>,
        factors: Vec<String>,
        n_paths: usize,
        values: Vec<f64>,
        seed: u64,
        scheme: &str,
        substeps: usize,
    ) -> Result<PathSet> {
        if values.len() != factors.len() * n_paths * times.len() {
            return Err(Error::DimensionMismatch {
                expected: factors.len() * n_paths * times.len(),
                found: values.len(),
            });
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::GridMismatch("times must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("path values"));
        }
        Ok(PathSet {
            times,
            factors,
            n_paths,
            seed,
            scheme: scheme.to_string(),
            substeps,
            values,
        })
    }

    pub fn n_dates(&self) -> usize {
        self.times.len()
    }

    pub fn factor(&self, name: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Domain(format!("unknown factor {name}")))
    }

    #[inline]
    pub fn value(&self, factor: usize, path: usize, date: usize) -> f64 {
        self.values[(factor * self.n_paths + path) * self.times.len() + date]
    }

    /// Trajectory of one factor along one path.
    pub fn path(&self, factor: usize, path: usize) -> &[f64] {
        let n = self.times.len();
        let start = (factor * self.n_paths + path) * n;
        &self.values[start..start + n]
    }

    /// Cross-section of one factor at one date.
    pub fn at_date(&self, factor: usize, date: usize) -> Vec<f64> {
        (0..self.n_paths).map(|j| self.value(factor, j, date)).collect()
    }

    /// Writes one row per `(path, date)` with one column per factor.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "path,time")?;
        for f in &self.factors {
            write!(out, ",{f}")?;
        }
        writeln!(out)?;
        for j in 0..self.n_paths {
            for (i, t) in self.times.iter().enumerate() {
                write!(out, "{j},{t}")?;
                for f in 0..self.factors.len() {
                    write!(out, ",{}", self.value(f, j, i))?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Draws `count` vectors `L·Z` with `L Lᵀ = R`; row `c` is draw `c`.
pub fn correlated_normals(r: &DMatrix<f64>, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    let l = psd_factor(r)?;
    let k = r.nrows();
    let blocks = count.div_ceil(BLOCK);
    let mut out = DMatrix::zeros(count, k);
    for b in 0..blocks {
        let len = BLOCK.min(count - b * BLOCK);
        let z: Vec<Vec<f64>> = (0..k).map(|f| normal_stream(seed, b as u64, f as u64, len)).collect();
        for c in 0..len {
            for i in 0..k {
                out[(b * BLOCK + c, i)] = (0..=i).map(|m| l[(i, m)] * z[m][c]).sum();
            }
        }
    }
    Ok(out)
}

/// Runs `body(block, first_path, len) -> per-factor rows` over all path
/// blocks in parallel and stitches the result into factor-major storage.
fn run_blocks<F>(n_paths: usize, n_factors: usize, n_dates: usize, body: F) -> Vec<f64>
where
    F: Fn(u64, usize) -> Vec<Vec<f64>> + Sync,
{
    let blocks = n_paths.div_ceil(BLOCK);
    let parts: Vec<Vec<Vec<f64>>> = (0..blocks)
        .into_par_iter()
        .map(|b| body(b as u64, BLOCK.min(n_paths - b * BLOCK)))
        .collect();
    let mut values = vec![0.0; n_factors * n_paths * n_dates];
    for (b, part) in parts.iter().enumerate() {
        for (f, rows) in part.iter().enumerate() {
            let start = (f * n_paths + b * BLOCK) * n_dates;
            values[start..start + rows.len()].copy_from_slice(rows);
        }
    }
    values
}

/// Geometric Brownian motion with exact log-increments.
pub fn simulate_gbm(s0: f64, r: f64, sigma: f64, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathSet> {
    grid.validate()?;
    if !(s0.is_finite() && s0 > 0.0) {
        return Err(invalid("s0", "must be > 0"));
    }
    if !(sigma.is_finite() && sigma >= 0.0) || !r.is_finite() {
        return Err(invalid("sigma", "must be finite and >= 0"));
    }
    let n_dates = grid.steps + 1;
    let h = grid.fine_dt();
    let drift = (r - 0.5 * sigma * sigma) * h;
    let vol = sigma * h.sqrt();
    let values = run_blocks(n_paths, 1, n_dates, |b, len| {
        let z = normal_stream(seed, b, 0, len * grid.fine_steps());
        let mut rows = vec![0.0; len * n_dates];
        let mut log_s = vec![s0.ln(); len];
        for j in 0..len {
            rows[j * n_dates] = s0;
        }
        for k in 0..grid.fine_steps() {
            for j in 0..len {
                log_s[j] += drift + vol * z[k * len + j];
            }
            if (k + 1) % grid.substeps == 0 {
                let i = (k + 1) / grid.substeps;
                for j in 0..len {
                    rows[j * n_dates + i] = log_s[j].exp();
                }
            }
        }
        vec![rows]
    });
    PathSet::from_values(
        grid.times(),
        vec!["S".into()],
        n_paths,
        values,
        seed,
        "gbm-exact",
        grid.substeps,
    )
}

/// Heston dynamics by full-truncation Euler on `ln S` and `V`.
pub fn simulate_heston(p: &HestonParams, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathSet> {
    grid.validate()?;
    let vals = [p.s0, p.v0, p.kappa, p.theta, p.sigma, p.r, p.rho];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heston parameters"));
    }
    if p.s0 <= 0.0 || p.v0 < 0.0 || p.kappa < 0.0 || p.theta < 0.0 || p.sigma < 0.0 || p.rho.abs() > 1.0 {
        return Err(invalid("heston", "parameters out of range"));
    }
    let n_dates = grid.steps + 1;
    let h = grid.fine_dt();
    let sh = h.sqrt();
    let rho_c = (1.0 - p.rho * p.rho).max(0.0).sqrt();
    let values = run_blocks(n_paths, 2, n_dates, |b, len| {
        let n = len * grid.fine_steps();
        let z_s = normal_stream(seed, b, 0, n);
        let z_v = normal_stream(seed, b, 1, n);
        let mut s_rows = vec![0.0; len * n_dates];
        let mut v_rows = vec![0.0; len * n_dates];
        let mut log_s = vec![p.s0.ln(); len];
        let mut v = vec![p.v0; len];
        for j in 0..len {
            s_rows[j * n_dates] = p.s0;
            v_rows[j * n_dates] = p.v0;
        }
        for k in 0..grid.fine_steps() {
            for j in 0..len {
                let vp = v[j].max(0.0);
                let w1 = z_s[k * len + j];
                let w2 = p.rho * w1 + rho_c * z_v[k * len + j];
                log_s[j] += (p.r - 0.5 * vp) * h + vp.sqrt() * sh * w1;
                v[j] += p.kappa * (p.theta - vp) * h + p.sigma * vp.sqrt() * sh * w2;
            }
            if (k + 1) % grid.substeps == 0 {
                let i = (k + 1) / grid.substeps;
                for j in 0..len {
                    s_rows[j * n_dates + i] = log_s[j].exp();
                    v_rows[j * n_dates + i] = v[j];
                }
            }
        }
        vec![s_rows, v_rows]
    });
    PathSet::from_values(
        grid.times(),
        vec!["S".into(), "V".into()],
        n_paths,
        values,
        seed,
        "heston-full-truncation-euler",
        grid.substeps,
    )
}

/// One foreign exchange rate, quoted as domestic units per foreign unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FxParams {
    pub initial: f64,
    pub vol: f64,
    /// Sign applied to the FX driver.
    #[serde(default = "unit_sign")]
    pub alpha: f64,
}

fn unit_sign() -> f64 {
    1.0
}

/// Multi-currency Hull–White short rates plus FX. Currency 0 is domestic;
/// `fx[j-1]` converts currency `j` into domestic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesFxConfig {
    pub rates: Vec<HullWhite>,
    pub fx: Vec<FxParams>,
    #[serde(default = "rr")]
    pub rate_rate_corr: f64,
    #[serde(default = "rf")]
    pub rate_fx_corr: f64,
    #[serde(default = "ff")]
    pub fx_fx_corr: f64,
    /// Sample the OU factor exactly instead of by Euler.
    #[serde(default)]
    pub exact_ou: bool,
}

fn rr() -> f64 {
    0.45
}
fn rf() -> f64 {
    0.30
}
fn ff() -> f64 {
    0.15
}

impl RatesFxConfig {
    /// `currencies` currencies with common Hull–White and FX parameters.
    pub fn homogeneous(currencies: usize, hw: HullWhite, fx: FxParams) -> RatesFxConfig {
        RatesFxConfig {
            rates: vec![hw; currencies],
            fx: vec![fx; currencies.saturating_sub(1)],
            rate_rate_corr: rr(),
            rate_fx_corr: rf(),
            fx_fx_corr: ff(),
            exact_ou: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(invalid("rates", "need at least the domestic currency"));
        }
        if self.fx.len() + 1 != self.rates.len() {
            return Err(invalid("fx", "need exactly one FX rate per foreign currency"));
        }
        self.rates.iter().try_for_each(|h| h.validate())?;
        for f in &self.fx {
            if !(f.initial.is_finite() && f.initial > 0.0)
                || !(f.vol.is_finite() && f.vol >= 0.0)
                || !f.alpha.is_finite()
            {
                return Err(invalid("fx", "initial > 0 and vol >= 0 required"));
            }
        }
        psd_factor(&self.correlation())?;
        Ok(())
    }

    /// Driver correlation, ordered rates first then FX.
    pub fn correlation(&self) -> DMatrix<f64> {
        let nr = self.rates.len();
        let k = nr + self.fx.len();
        DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                1.0
            } else if i < nr && j < nr {
                self.rate_rate_corr
            } else if i >= nr && j >= nr {
                self.fx_fx_corr
            } else {
                self.rate_fx_corr
            }
        })
    }

    /// Names of the stored factors: short rates, FX rates, then the
    /// integrated short rates used for discounting.
    pub fn factor_names(&self) -> Vec<String> {
        let nr = self.rates.len();
        (0..nr)
            .map(|i| format!("r{i}"))
            .chain((1..nr).map(|j| format!("fx{j}")))
            .chain((0..nr).map(|i| format!("int_r{i}")))
            .collect()
    }
}

/// Hull–White short rates and FX under the domestic measure. Integrated
/// rates are accumulated with left-point sums on the simulation grid.
pub fn simulate_hw_fx(cfg: &RatesFxConfig, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathSet> {
    cfg.validate()?;
    grid.validate()?;
    let l = psd_factor(&cfg.correlation())?;
    let nr = cfg.rates.len();
    let nf = cfg.fx.len();
    let k = nr + nf;
    let n_dates = grid.steps + 1;
    let h = grid.fine_dt();
    let sh = h.sqrt();
    let steps = grid.fine_steps();
    let values = run_blocks(n_paths, 2 * nr + nf, n_dates, |b, len| {
        let z: Vec<Vec<f64>> = (0..k).map(|f| normal_stream(seed, b, f as u64, len * steps)).collect();
        let mut rows = vec![vec![0.0; len * n_dates]; 2 * nr + nf];
        let mut x = vec![vec![0.0; len]; nr];
        let mut log_fx: Vec<Vec<f64>> = cfg.fx.iter().map(|f| vec![f.initial.ln(); len]).collect();
        let mut integ = vec![vec![0.0; len]; nr];
        for j in 0..len {
            for (i, hw) in cfg.rates.iter().enumerate() {
                rows[i][j * n_dates] = hw.beta(0.0);
            }
            for (f, fx) in cfg.fx.iter().enumerate() {
                rows[nr + f][j * n_dates] = fx.initial;
            }
        }
        let mut w = vec![0.0; k];
        for s in 0..steps {
            let t = s as f64 * h;
            let betas: Vec<f64> = cfg.rates.iter().map(|hw| hw.beta(t)).collect();
            for j in 0..len {
                for (i, wi) in w.iter_mut().enumerate() {
                    *wi = (0..=i).map(|m| l[(i, m)] * z[m][s * len + j]).sum();
                }
                let r: Vec<f64> = (0..nr).map(|i| x[i][j] + betas[i]).collect();
                for (f, fx) in cfg.fx.iter().enumerate() {
                    let vol = fx.vol;
                    log_fx[f][j] += (r[0] - r[f + 1] - 0.5 * vol * vol) * h + fx.alpha * vol * sh * w[nr + f];
                }
                for (i, hw) in cfg.rates.iter().enumerate() {
                    integ[i][j] += r[i] * h;
                    x[i][j] = if cfg.exact_ou {
                        let e = (-hw.a * h).exp();
                        x[i][j] * e + hw.sigma * ((1.0 - e * e) / (2.0 * hw.a)).sqrt() * w[i]
                    } else {
                        x[i][j] - hw.a * x[i][j] * h + hw.sigma * sh * w[i]
                    };
                }
            }
            if (s + 1) % grid.substeps == 0 {
                let d = (s + 1) / grid.substeps;
                let t1 = (s + 1) as f64 * h;
                for j in 0..len {
                    for (i, hw) in cfg.rates.iter().enumerate() {
                        rows[i][j * n_dates + d] = x[i][j] + hw.beta(t1);
                        rows[nr + nf + i][j * n_dates + d] = integ[i][j];
                    }
                    for f in 0..nf {
                        rows[nr + f][j * n_dates + d] = log_fx[f][j].exp();
                    }
                }
            }
        }
        rows
    });
    PathSet::from_values(
        grid.times(),
        cfg.factor_names(),
        n_paths,
        values,
        seed,
        if cfg.exact_ou {
            "hw-exact-ou-fx-euler"
        } else {
            "hw-euler-fx-euler"
        },
        grid.substeps,
    )
}

/// Sample mean and standard error of the foreign-to-domestic density
/// `FX_j(t)/FX_j(0) · exp(∫(r_j − r_0))` at every stored date.
pub fn measure_change_check(paths: &PathSet, currency: usize) -> Result<Vec<(f64, f64)>> {
    let fx = paths.factor(&format!("fx{currency}"))?;
    let int_dom = paths.factor("int_r0")?;
    let int_for = paths.factor(&format!("int_r{currency}"))?;
    let m = paths.n_paths as f64;
    Ok((0..paths.n_dates())
        .map(|i| {
            let z: Vec<f64> = (0..paths.n_paths)
                .map(|j| {
                    paths.value(fx, j, i) / paths.value(fx, j, 0)
                        * (paths.value(int_for, j, i) - paths.value(int_dom, j, i)).exp()
                })
                .collect();
            let mean = z.iter().sum::<f64>() / m;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
            (mean, (var / m).sqrt())
        })
        .collect())
}
