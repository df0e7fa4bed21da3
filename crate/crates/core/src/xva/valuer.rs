//! Portfolios, state extraction from simulated paths, and the valuers that
//! map `(date, state)` to a portfolio value: exact repricing or per-date
//! GP surrogates.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::{fit, FitCfg, GpModel};
use crate::kernels::KernelSpec;
use crate::mgp::{fit_multi, MgpCfg, MgpModel};
use crate::optim::OptimizerCfg;
use crate::paths::{PathSet, RatesFxConfig};
use crate::pricers::{bs_price, irs_price, OptionSide, Swap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Instrument {
    /// European option on the spot factor `S`.
    Option {
        side: OptionSide,
        strike: f64,
        maturity: f64,
    },
    Swap(Swap),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Position {
    pub instrument: Instrument,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Market {
    BlackScholes { r: f64, vol: f64 },
    RatesFx(RatesFxConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Portfolio {
    pub market: Market,
    pub positions: Vec<Position>,
}

const EXPIRY_TOL: f64 = 1e-9;

impl Portfolio {
    /// Two long calls struck at 110 and one short put struck at 90, both
    /// two years, on a Black–Scholes spot with `r = 0`, `σ = 0.3`.
    pub fn bs_example() -> Portfolio {
        let opt = |side, strike| Instrument::Option {
            side,
            strike,
            maturity: 2.0,
        };
        Portfolio {
            market: Market::BlackScholes { r: 0.0, vol: 0.3 },
            positions: vec![
                Position {
                    instrument: opt(OptionSide::Call, 110.0),
                    weight: 2.0,
                },
                Position {
                    instrument: opt(OptionSide::Put, 90.0),
                    weight: -1.0,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(invalid("positions", "portfolio is empty"));
        }
        match &self.market {
            Market::BlackScholes { r, vol } => {
                if !r.is_finite() || !(vol.is_finite() && *vol > 0.0) {
                    return Err(invalid("market.vol", "must be finite and > 0"));
                }
            }
            Market::RatesFx(cfg) => cfg.validate()?,
        }
        for p in &self.positions {
            if !p.weight.is_finite() {
                return Err(Error::NonFinite("position weight"));
            }
            match (&p.instrument, &self.market) {
                (Instrument::Option { strike, maturity, .. }, Market::BlackScholes { .. }) => {
                    if !(strike.is_finite() && *strike > 0.0) || !(maturity.is_finite() && *maturity > 0.0) {
                        return Err(invalid("instrument", "option needs strike > 0 and maturity > 0"));
                    }
                }
                (Instrument::Swap(swap), Market::RatesFx(cfg)) => {
                    swap.validate()?;
                    if swap.currency >= cfg.rates.len() {
                        return Err(invalid("swap.currency", "no such currency in the market"));
                    }
                }
                _ => return Err(invalid("instrument", "no pricer for this instrument in this market")),
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.positions.iter().map(|p| p.weight).collect()
    }

    /// Last date at which any position is alive.
    pub fn horizon(&self) -> f64 {
        self.positions
            .iter()
            .map(|p| match &p.instrument {
                Instrument::Option { maturity, .. } => *maturity,
                Instrument::Swap(swap) => swap.maturity(),
            })
            .fold(0.0, f64::max)
    }

    /// Number of state variables per position.
    pub fn feature_dims(&self) -> Vec<usize> {
        self.positions
            .iter()
            .map(|p| match &p.instrument {
                Instrument::Option { .. } => 1,
                Instrument::Swap(swap) => {
                    if swap.currency == 0 {
                        2
                    } else {
                        3
                    }
                }
            })
            .collect()
    }

    pub fn state_dim(&self) -> usize {
        self.feature_dims().iter().sum()
    }

    /// Unweighted value of position `k` in domestic units at model time `t`
    /// given its features.
    pub fn position_value(&self, k: usize, t: f64, features: &[f64]) -> Result<f64> {
        match (&self.positions[k].instrument, &self.market) {
            (Instrument::Option { side, strike, maturity }, Market::BlackScholes { r, vol }) => {
                if t > maturity + EXPIRY_TOL {
                    return Ok(0.0);
                }
                Ok(bs_price(*side, features[0], *strike, *r, (maturity - t).max(0.0), *vol)?.price)
            }
            (Instrument::Swap(swap), Market::RatesFx(cfg)) => {
                if t > swap.maturity() + EXPIRY_TOL || t < swap.start - EXPIRY_TOL {
                    return Ok(0.0);
                }
                let t = t.clamp(swap.start, swap.maturity());
                let p = irs_price(swap, &cfg.rates[swap.currency], t, features[0], features[1])?;
                Ok(if swap.currency == 0 { p } else { p * features[2] })
            }
            _ => Err(invalid("instrument", "no pricer for this instrument in this market")),
        }
    }

    /// Resolves factor indices of `paths` for state extraction. `time_offset`
    /// is the model time of the first path date.
    pub fn state_map(&self, paths: &PathSet, time_offset: f64) -> Result<StateMap> {
        let mut items = Vec::with_capacity(self.positions.len());
        for p in &self.positions {
            items.push(match &p.instrument {
                Instrument::Option { .. } => Item::Spot(paths.factor("S")?),
                Instrument::Swap(swap) => Item::Swap {
                    rate: paths.factor(&format!("r{}", swap.currency))?,
                    fx: if swap.currency == 0 {
                        None
                    } else {
                        Some(paths.factor(&format!("fx{}", swap.currency))?)
                    },
                    swap: swap.clone(),
                },
            });
        }
        let dt = if paths.n_dates() > 1 {
            paths.times[1] - paths.times[0]
        } else {
            1.0
        };
        Ok(StateMap {
            items,
            time_offset,
            t0: paths.times[0],
            dt,
            dim: self.state_dim(),
        })
    }
}

#[derive(Debug, Clone)]
enum Item {
    Spot(usize),
    Swap { rate: usize, fx: Option<usize>, swap: Swap },
}

/// Extracts the concatenated per-position features along a path.
#[derive(Debug, Clone)]
pub struct StateMap {
    items: Vec<Item>,
    time_offset: f64,
    t0: f64,
    dt: f64,
    dim: usize,
}

impl StateMap {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Model time of path date `i`.
    pub fn model_time(&self, paths: &PathSet, i: usize) -> f64 {
        self.time_offset + paths.times[i] - self.t0
    }

    pub fn fill(&self, paths: &PathSet, j: usize, i: usize, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        let t = self.model_time(paths, i);
        for item in &self.items {
            match item {
                Item::Spot(f) => out.push(paths.value(*f, j, i)),
                Item::Swap { rate, fx, swap } => {
                    let r = paths.value(*rate, j, i);
                    let reset = match swap.previous_reset(t) {
                        None => r,
                        Some(n) => {
                            let pos = (swap.reset(n) - self.time_offset) / self.dt;
                            let k = pos.round();
                            if k < 0.0 || (pos - k).abs() > 1e-6 {
                                return Err(Error::GridMismatch(format!(
                                    "reset at {} is not a stored path date",
                                    swap.reset(n)
                                )));
                            }
                            paths.value(*rate, j, k as usize)
                        }
                    };
                    out.push(r);
                    out.push(reset);
                    if let Some(f) = fx {
                        out.push(paths.value(*f, j, i));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Portfolio value and surrogate variance (zero for exact valuation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Valuation {
    pub value: f64,
    pub variance: f64,
}

pub trait Valuer: Sync {
    fn kind(&self) -> &str;
    /// Number of date indices the valuer covers.
    fn n_dates(&self) -> usize;
    fn value(&self, date: usize, state: &[f64], with_variance: bool) -> Result<Valuation>;
}

/// Full repricing with the reference pricers (MC-reval).
#[derive(Debug, Clone)]
pub struct ExactValuer {
    pub portfolio: Portfolio,
    /// Model time of each date index.
    pub times: Vec<f64>,
    dims: Vec<usize>,
}

impl ExactValuer {
    pub fn new(portfolio: Portfolio, times: Vec<f64>) -> Result<ExactValuer> {
        portfolio.validate()?;
        let dims = portfolio.feature_dims();
        Ok(ExactValuer { portfolio, times, dims })
    }
}

impl Valuer for ExactValuer {
    fn kind(&self) -> &str {
        "exact"
    }

    fn n_dates(&self) -> usize {
        self.times.len()
    }

    fn value(&self, date: usize, state: &[f64], _with_variance: bool) -> Result<Valuation> {
        let t = *self.times.get(date).ok_or(Error::MissingModel(date))?;
        let mut off = 0;
        let mut v = 0.0;
        for (k, d) in self.dims.iter().enumerate() {
            let w = self.portfolio.positions[k].weight;
            v += w * self.portfolio.position_value(k, t, &state[off..off + d])?;
            off += d;
        }
        Ok(Valuation {
            value: v,
            variance: 0.0,
        })
    }
}

/// Surrogate for one position at one date.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DateModel {
    /// Value does not vary over the training states (expired, or all
    /// states identical).
    Constant(f64),
    Gp {
        model: GpModel,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

impl DateModel {
    fn predict(&self, x: &[f64], buf: &mut Vec<f64>, with_variance: bool) -> Result<(f64, f64)> {
        match self {
            DateModel::Constant(c) => Ok((*c, 0.0)),
            DateModel::Gp { model, lo, hi } => {
                buf.clear();
                buf.extend(x.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)));
                if with_variance {
                    model.predict_point(buf)
                } else {
                    Ok((model.predict_mean_point(buf)?, 0.0))
                }
            }
        }
    }
}

/// One GP per position and date (MC-GP). States outside a model's
/// training box are clamped to the box edge. Position variances are added
/// as if independent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpValuer {
    pub weights: Vec<f64>,
    dims: Vec<usize>,
    /// `models[date][position]`.
    pub models: Vec<Vec<DateModel>>,
}

impl Valuer for GpValuer {
    fn kind(&self) -> &str {
        "gp"
    }

    fn n_dates(&self) -> usize {
        self.models.len()
    }

    fn value(&self, date: usize, state: &[f64], with_variance: bool) -> Result<Valuation> {
        let row = self.models.get(date).ok_or(Error::MissingModel(date))?;
        let mut off = 0;
        let (mut v, mut var) = (0.0, 0.0);
        let mut buf = Vec::with_capacity(3);
        for ((m, d), w) in row.iter().zip(&self.dims).zip(&self.weights) {
            let (mu, s2) = m.predict(&state[off..off + d], &mut buf, with_variance)?;
            v += w * mu;
            var += w * w * s2;
            off += d;
        }
        Ok(Valuation {
            value: v,
            variance: var,
        })
    }
}

/// One multi-output GP per date over positions that share a single state
/// variable; the portfolio variance includes the task cross-covariances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MgpValuer {
    pub weights: Vec<f64>,
    pub models: Vec<MgpModel>,
    pub lo: f64,
    pub hi: f64,
}

impl Valuer for MgpValuer {
    fn kind(&self) -> &str {
        "mgp"
    }

    fn n_dates(&self) -> usize {
        self.models.len()
    }

    fn value(&self, date: usize, state: &[f64], _with_variance: bool) -> Result<Valuation> {
        let m = self.models.get(date).ok_or(Error::MissingModel(date))?;
        let x = DMatrix::from_element(1, 1, state[0].clamp(self.lo, self.hi));
        let (mean, cov) = m.portfolio_posterior(&self.weights, &x)?;
        Ok(Valuation {
            value: mean[0],
            variance: cov[(0, 0)],
        })
    }
}

/// Shifts date indices, so that models fitted on a grid starting at time 0
/// serve paths re-rooted at date `offset` of that grid.
pub struct OffsetValuer<'a> {
    pub inner: &'a dyn Valuer,
    pub offset: usize,
}

impl Valuer for OffsetValuer<'_> {
    fn kind(&self) -> &str {
        self.inner.kind()
    }

    fn n_dates(&self) -> usize {
        self.inner.n_dates().saturating_sub(self.offset)
    }

    fn value(&self, date: usize, state: &[f64], with_variance: bool) -> Result<Valuation> {
        self.inner.value(date + self.offset, state, with_variance)
    }
}

/// Training options for per-date surrogates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateCfg {
    pub kernel: KernelSpec,
    /// Initial noise standard deviation in original units.
    pub noise: f64,
    pub fit: FitCfg,
    /// For dates after the first, hyperparameters are polished by at most
    /// this many BFGS steps from the previous date's values instead of a
    /// full search; 0 refits every date from scratch.
    pub warm_iterations: usize,
    /// Hyperparameters are trained on at most this many evenly strided
    /// training rows; the posterior then conditions on all rows.
    pub fit_subsample: usize,
}

impl Default for SurrogateCfg {
    fn default() -> Self {
        SurrogateCfg {
            kernel: KernelSpec::se(1.0),
            noise: 1e-4,
            fit: FitCfg::default(),
            warm_iterations: 30,
            fit_subsample: 200,
        }
    }
}

fn is_constant(v: &[f64]) -> bool {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= 1e-12 * (1.0 + lo.abs().max(hi.abs()))
}

/// Fits one date's model, warm-starting from `prev` when given. Returns the
/// model and the hyperparameters (original units) to carry forward.
fn fit_date(
    x: &DMatrix<f64>,
    y: &[f64],
    cfg: &SurrogateCfg,
    prev: Option<&(KernelSpec, f64)>,
) -> Result<(DateModel, Option<(KernelSpec, f64)>)> {
    let p = x.ncols();
    let cols_constant = (0..p).all(|k| is_constant(x.column(k).as_slice()));
    if is_constant(y) || cols_constant {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        return Ok((DateModel::Constant(mean), None));
    }
    let (k0, s0, fcfg) = match (prev, cfg.warm_iterations) {
        (Some((k, s)), w) if w > 0 => (
            k.clone(),
            *s,
            FitCfg {
                optimizer: OptimizerCfg {
                    iterations: 0,
                    restarts: 1,
                    polish_iterations: w,
                    ..cfg.fit.optimizer.clone()
                },
                ..cfg.fit.clone()
            },
        ),
        _ => (cfg.kernel.clone(), cfg.noise, cfg.fit.clone()),
    };
    let n = x.nrows();
    let model = if n > cfg.fit_subsample && cfg.fit_subsample >= 2 {
        let stride = n.div_ceil(cfg.fit_subsample);
        let rows: Vec<usize> = (0..n).step_by(stride).collect();
        let xs = x.select_rows(&rows);
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let sub = if is_constant(&ys) {
            None
        } else {
            Some(fit(&xs, &ys, &k0, s0, &fcfg)?)
        };
        match sub {
            Some(m) => GpModel::condition(x, y, &m.kernel_external(), m.noise_external(), fcfg.rescale)?,
            None => fit(x, y, &k0, s0, &fcfg)?,
        }
    } else {
        fit(x, y, &k0, s0, &fcfg)?
    };
    let carry = (model.kernel_external(), model.noise_external());
    let lo = (0..p).map(|k| x.column(k).min()).collect();
    let hi = (0..p).map(|k| x.column(k).max()).collect();
    Ok((DateModel::Gp { model, lo, hi }, Some(carry)))
}

/// Trains per-date, per-position GPs on a spot grid of `points` evenly
/// spaced values in `[lo, hi]`, with exact prices as targets. Only for
/// portfolios whose positions each depend on the spot alone.
pub fn train_grid_valuer(
    portfolio: &Portfolio,
    times: &[f64],
    lo: f64,
    hi: f64,
    points: usize,
    cfg: &SurrogateCfg,
) -> Result<GpValuer> {
    portfolio.validate()?;
    let dims = portfolio.feature_dims();
    if dims.iter().any(|d| *d != 1) {
        return Err(invalid("design", "grid training needs single-factor positions"));
    }
    if !(lo.is_finite() && hi > lo) || points < 2 {
        return Err(invalid("grid", "need lo < hi and at least two points"));
    }
    let grid: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect();
    let x = DMatrix::from_column_slice(points, 1, &grid);
    let per_position: Vec<Vec<DateModel>> = (0..portfolio.positions.len())
        .into_par_iter()
        .map(|k| {
            let mut prev = None;
            let mut out = Vec::with_capacity(times.len());
            for &t in times {
                let y = grid
                    .iter()
                    .map(|s| portfolio.position_value(k, t, &[*s]))
                    .collect::<Result<Vec<_>>>()?;
                let (m, carry) = fit_date(&x, &y, cfg, prev.as_ref())?;
                if carry.is_some() {
                    prev = carry;
                }
                out.push(m);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(GpValuer {
        weights: portfolio.weights(),
        dims,
        models: transpose(per_position, times.len()),
    })
}

fn transpose(per_position: Vec<Vec<DateModel>>, n_dates: usize) -> Vec<Vec<DateModel>> {
    let mut cols: Vec<std::vec::IntoIter<DateModel>> = per_position.into_iter().map(|v| v.into_iter()).collect();
    (0..n_dates)
        .map(|_| cols.iter_mut().map(|c| c.next().expect("one model per date")).collect())
        .collect()
}

/// Trains per-date, per-position GPs on states read from simulated training
/// paths (first path date at model time 0), with exact prices as targets.
pub fn train_path_valuer(portfolio: &Portfolio, training: &PathSet, cfg: &SurrogateCfg) -> Result<GpValuer> {
    portfolio.validate()?;
    let dims = portfolio.feature_dims();
    let map = portfolio.state_map(training, 0.0)?;
    let n_dates = training.n_dates();
    let m = training.n_paths;
    // states[date] is m × state_dim
    let states: Vec<DMatrix<f64>> = (0..n_dates)
        .map(|i| {
            let mut rows = Vec::with_capacity(m * map.dim());
            let mut buf = Vec::new();
            for j in 0..m {
                map.fill(training, j, i, &mut buf)?;
                rows.extend_from_slice(&buf);
            }
            Ok(DMatrix::from_row_slice(m, map.dim(), &rows))
        })
        .collect::<Result<_>>()?;
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let per_position: Vec<Vec<DateModel>> = (0..portfolio.positions.len())
        .into_par_iter()
        .map(|k| {
            let mut prev = None;
            let mut out = Vec::with_capacity(n_dates);
            for (i, s) in states.iter().enumerate() {
                let x = s.columns(offsets[k], dims[k]).into_owned();
                let t = map.model_time(training, i);
                let y = (0..m)
                    .map(|j| portfolio.position_value(k, t, x.row(j).transpose().as_slice()))
                    .collect::<Result<Vec<_>>>()?;
                let (model, carry) = fit_date(&x, &y, cfg, prev.as_ref())?;
                if carry.is_some() {
                    prev = carry;
                }
                out.push(model);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(GpValuer {
        weights: portfolio.weights(),
        dims,
        models: transpose(per_position, n_dates),
    })
}

/// Trains one multi-output GP per date on a spot grid, jointly over all
/// positions (which must each depend on the spot alone).
pub fn train_grid_mgp_valuer(
    portfolio: &Portfolio,
    times: &[f64],
    lo: f64,
    hi: f64,
    points: usize,
    kernel: &KernelSpec,
    cfg: &MgpCfg,
) -> Result<MgpValuer> {
    portfolio.validate()?;
    if portfolio.feature_dims().iter().any(|d| *d != 1) {
        return Err(invalid("design", "grid training needs single-factor positions"));
    }
    if !(lo.is_finite() && hi > lo) || points < 2 {
        return Err(invalid("grid", "need lo < hi and at least two points"));
    }
    let d = portfolio.positions.len();
    let grid: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect();
    let x = DMatrix::from_column_slice(points, 1, &grid);
    let models = times
        .par_iter()
        .map(|&t| {
            let mut y = DMatrix::zeros(points, d);
            for k in 0..d {
                for (i, s) in grid.iter().enumerate() {
                    y[(i, k)] = portfolio.position_value(k, t, &[*s])?;
                }
            }
            fit_multi(&x, &y, kernel, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(MgpValuer {
        weights: portfolio.weights(),
        models,
        lo,
        hi,
    })
}
