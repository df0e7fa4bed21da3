//! Scenario configuration (TOML). Unknown keys are rejected everywhere.

use std::fmt;

use gpxva::pricers::{HestonParams, OptionSide, Swap};
use gpxva::xva::{Instrument, Market, Portfolio, Position};
use gpxva::{KernelSpec, OptimizerCfg};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    FitGp,
    PriceSurface,
    Greeks,
    Epe,
    Cva0,
    Cva1Var,
    Uq,
    IrsPortfolio,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::FitGp => "fit-gp",
            Pipeline::PriceSurface => "price-surface",
            Pipeline::Greeks => "greeks",
            Pipeline::Epe => "epe",
            Pipeline::Cva0 => "cva0",
            Pipeline::Cva1Var => "cva1-var",
            Pipeline::Uq => "uq",
            Pipeline::IrsPortfolio => "irs-portfolio",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub pipeline: Pipeline,
    /// Root seed; every random stream derives from it.
    pub seed: u64,
    pub market: Option<Market>,
    #[serde(default)]
    pub positions: Vec<PositionCfg>,
    #[serde(default)]
    pub gp: GpBlock,
    #[serde(default)]
    pub simulation: SimBlock,
    #[serde(default)]
    pub credit: CreditBlock,
    #[serde(default)]
    pub nested: NestedBlock,
    #[serde(default)]
    pub surface: SurfaceBlock,
    pub heston: Option<HestonParams>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionCfg {
    pub instrument: InstrumentCfg,
    pub weight: f64,
}

/// Like [`Instrument`], but a swap without `fixed_rate` is struck at par.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstrumentCfg {
    Option {
        side: OptionSide,
        strike: f64,
        maturity: f64,
    },
    Swap {
        fixed_rate: Option<f64>,
        delta: f64,
        periods: usize,
        #[serde(default)]
        start: f64,
        #[serde(default = "one")]
        notional: f64,
        #[serde(default)]
        currency: usize,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Evenly spaced spot grid.
    Grid,
    /// States read from simulated training paths.
    Paths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// One single-output GP per position and date.
    Gp,
    /// One multi-output GP per date over all positions.
    Mgp,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpBlock {
    pub kernel: KernelSpec,
    /// Initial noise standard deviation, original units.
    pub noise: f64,
    pub valuer: SurrogateKind,
    pub design: Design,
    pub lo: f64,
    pub hi: f64,
    pub points: i64,
    pub training_paths: i64,
    pub warm_iterations: i64,
    pub fit_subsample: i64,
    pub rescale: bool,
    pub optimizer: OptimizerCfg,
}

impl Default for GpBlock {
    fn default() -> Self {
        GpBlock {
            kernel: KernelSpec::se(0.2),
            noise: 1e-4,
            valuer: SurrogateKind::Gp,
            design: Design::Grid,
            lo: 1.0,
            hi: 400.0,
            points: 100,
            training_paths: 1000,
            warm_iterations: 30,
            fit_subsample: 200,
            rescale: true,
            optimizer: OptimizerCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimBlock {
    /// Number of paths `M`.
    pub paths: i64,
    /// Number of stored exposure dates after time zero `N`.
    pub steps: i64,
    /// Simulation steps per stored date.
    pub substeps: i64,
    /// Defaults to the last date any position is alive.
    pub horizon: Option<f64>,
    /// Initial spot for Black–Scholes markets.
    pub spot: f64,
}

impl Default for SimBlock {
    fn default() -> Self {
        SimBlock {
            paths: 1000,
            steps: 100,
            substeps: 1,
            horizon: None,
            spot: 100.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreditBlock {
    pub gamma0: f64,
    pub gamma1: f64,
    /// Reference spot of the intensity; defaults to the initial spot.
    pub s_ref: Option<f64>,
    pub recovery: f64,
    /// Flat hazard rate. When set, default is independent of exposure.
    pub hazard: Option<f64>,
    pub target_survival: f64,
    pub prior_center: f64,
    pub prior_scale: f64,
    pub draws: i64,
    pub gamma0_max: f64,
}

impl Default for CreditBlock {
    fn default() -> Self {
        CreditBlock {
            gamma0: 0.02,
            gamma1: 1.2,
            s_ref: None,
            recovery: 0.4,
            hazard: None,
            target_survival: 0.05,
            prior_center: 1.2,
            prior_scale: 1.0,
            draws: 100,
            gamma0_max: gpxva::credit::GAMMA0_MAX,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NestedBlock {
    pub outer: i64,
    pub inner: i64,
    /// Outer horizon; must be a stored date.
    pub horizon: f64,
    pub alpha: f64,
}

impl Default for NestedBlock {
    fn default() -> Self {
        NestedBlock {
            outer: 200,
            inner: 200,
            horizon: 1.0,
            alpha: 0.99,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceBlock {
    /// Model times (Black–Scholes portfolio) or maturities (Heston) to report.
    pub times: Vec<f64>,
    pub test_points: i64,
    /// Volatility range for the vega fit in the greeks pipeline.
    pub vol_lo: f64,
    pub vol_hi: f64,
}

impl Default for SurfaceBlock {
    fn default() -> Self {
        SurfaceBlock {
            times: vec![0.0, 0.5, 1.0, 1.5],
            test_points: 200,
            vol_lo: 0.05,
            vol_hi: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<String>,
    /// Also write the simulated paths and exposure cubes.
    pub dump_paths: bool,
}

/// Configuration problem attributable to one field.
#[derive(Debug, Clone, PartialEq)]
pub struct Invalid {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid `{}`: {}", self.field, self.reason)
    }
}

fn bad(field: &str, reason: &str) -> Invalid {
    Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

fn count(v: i64, field: &str, min: i64) -> Result<usize, Invalid> {
    if v < min {
        return Err(bad(field, &format!("must be >= {min}, got {v}")));
    }
    Ok(v as usize)
}

fn positive(v: f64, field: &str) -> Result<(), Invalid> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(field, &format!("must be finite and > 0, got {v}")))
    }
}

/// Counts after validation.
#[derive(Debug, Clone, Copy)]
pub struct Counts {
    pub paths: usize,
    pub steps: usize,
    pub substeps: usize,
    pub points: usize,
    pub training_paths: usize,
    pub warm_iterations: usize,
    pub fit_subsample: usize,
    pub draws: usize,
    pub outer: usize,
    pub inner: usize,
    pub test_points: usize,
}

impl Config {
    pub fn counts(&self) -> Result<Counts, Invalid> {
        Ok(Counts {
            paths: count(self.simulation.paths, "simulation.paths", 2)?,
            steps: count(self.simulation.steps, "simulation.steps", 1)?,
            substeps: count(self.simulation.substeps, "simulation.substeps", 1)?,
            points: count(self.gp.points, "gp.points", 2)?,
            training_paths: count(self.gp.training_paths, "gp.training_paths", 2)?,
            warm_iterations: count(self.gp.warm_iterations, "gp.warm_iterations", 0)?,
            fit_subsample: count(self.gp.fit_subsample, "gp.fit_subsample", 2)?,
            draws: count(self.credit.draws, "credit.draws", 1)?,
            outer: count(self.nested.outer, "nested.outer", 1)?,
            inner: count(self.nested.inner, "nested.inner", 2)?,
            test_points: count(self.surface.test_points, "surface.test_points", 2)?,
        })
    }

    /// Checks everything that can be checked without running a pipeline.
    pub fn validate(&self) -> Result<Counts, Invalid> {
        let counts = self.counts()?;
        if !(self.gp.lo.is_finite() && self.gp.hi.is_finite() && self.gp.lo < self.gp.hi) {
            return Err(bad("gp.lo", "need finite gp.lo < gp.hi"));
        }
        if !(self.gp.noise.is_finite() && self.gp.noise >= 0.0) {
            return Err(bad("gp.noise", "must be finite and >= 0"));
        }
        self.gp
            .kernel
            .validate(None)
            .map_err(|e| bad("gp.kernel", &e.to_string()))?;
        positive(self.simulation.spot, "simulation.spot")?;
        if let Some(h) = self.simulation.horizon {
            positive(h, "simulation.horizon")?;
        }
        let c = &self.credit;
        positive(c.gamma0, "credit.gamma0")?;
        if !c.gamma1.is_finite() {
            return Err(bad("credit.gamma1", "must be finite"));
        }
        if let Some(s) = c.s_ref {
            positive(s, "credit.s_ref")?;
        }
        if !(0.0..1.0).contains(&c.recovery) {
            return Err(bad("credit.recovery", "must lie in [0, 1)"));
        }
        if let Some(h) = c.hazard {
            if !(h.is_finite() && h >= 0.0) {
                return Err(bad("credit.hazard", "must be finite and >= 0"));
            }
        }
        if !(c.target_survival > 0.0 && c.target_survival < 1.0) {
            return Err(bad("credit.target_survival", "must lie in (0, 1)"));
        }
        if !(c.prior_center.is_finite() && c.prior_scale.is_finite() && c.prior_scale >= 0.0) {
            return Err(bad("credit.prior_scale", "prior needs a finite center and scale >= 0"));
        }
        positive(c.gamma0_max, "credit.gamma0_max")?;
        positive(self.nested.horizon, "nested.horizon")?;
        if !(self.nested.alpha > 0.0 && self.nested.alpha < 1.0) {
            return Err(bad("nested.alpha", "must lie in (0, 1)"));
        }
        if self.surface.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(bad("surface.times", "must be finite and >= 0"));
        }
        if !(self.surface.vol_lo > 0.0 && self.surface.vol_lo < self.surface.vol_hi && self.surface.vol_hi.is_finite())
        {
            return Err(bad("surface.vol_lo", "need 0 < vol_lo < vol_hi"));
        }
        for (k, p) in self.positions.iter().enumerate() {
            if !p.weight.is_finite() {
                return Err(bad(&format!("positions[{k}].weight"), "must be finite"));
            }
        }
        if let Some(h) = &self.heston {
            h.validate().map_err(|e| bad("heston", &e.to_string()))?;
        }
        let needs_portfolio = !(self.pipeline == Pipeline::PriceSurface && self.heston.is_some());
        if needs_portfolio {
            let p = self.portfolio()?;
            p.validate().map_err(|e| bad("positions", &e.to_string()))?;
            let rates = matches!(p.market, Market::RatesFx(_));
            if rates != (self.pipeline == Pipeline::IrsPortfolio) {
                return Err(bad(
                    "market.type",
                    "the irs-portfolio pipeline needs a rates_fx market and the others a black_scholes market",
                ));
            }
        }
        if self.gp.valuer == SurrogateKind::Mgp && self.gp.design != Design::Grid {
            return Err(bad("gp.valuer", "the multi-output surrogate needs the grid design"));
        }
        if self.pipeline == Pipeline::IrsPortfolio && self.gp.design != Design::Paths {
            return Err(bad("gp.design", "swap portfolios are trained on simulated paths"));
        }
        Ok(counts)
    }

    /// Resolves the portfolio, striking par swaps at time-zero rates.
    pub fn portfolio(&self) -> Result<Portfolio, Invalid> {
        let market = self
            .market
            .clone()
            .ok_or_else(|| bad("market", "missing market block"))?;
        if self.positions.is_empty() {
            return Err(bad("positions", "need at least one position"));
        }
        let positions = self
            .positions
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let instrument = match &p.instrument {
                    InstrumentCfg::Option { side, strike, maturity } => Instrument::Option {
                        side: *side,
                        strike: *strike,
                        maturity: *maturity,
                    },
                    InstrumentCfg::Swap {
                        fixed_rate,
                        delta,
                        periods,
                        start,
                        notional,
                        currency,
                    } => {
                        let mut swap = Swap {
                            fixed_rate: fixed_rate.unwrap_or(0.0),
                            delta: *delta,
                            periods: *periods,
                            start: *start,
                            notional: *notional,
                            currency: *currency,
                        };
                        if fixed_rate.is_none() {
                            let Market::RatesFx(cfg) = &market else {
                                return Err(bad(&format!("positions[{k}]"), "swaps need a rates_fx market"));
                            };
                            let curve = cfg.rates.get(*currency).ok_or_else(|| {
                                bad(&format!("positions[{k}].instrument.currency"), "no such currency")
                            })?;
                            swap.validate()
                                .map_err(|e| bad(&format!("positions[{k}]"), &e.to_string()))?;
                            swap.fixed_rate = swap.par_rate(curve, curve.beta(*start));
                        }
                        Instrument::Swap(swap)
                    }
                };
                Ok(Position {
                    instrument,
                    weight: p.weight,
                })
            })
            .collect::<Result<Vec<_>, Invalid>>()?;
        Ok(Portfolio { market, positions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BS: &str = r#"
pipeline = "cva0"
seed = 7

[market]
type = "black_scholes"
r = 0.0
vol = 0.3

[[positions]]
weight = 2.0
instrument = { type = "option", side = "call", strike = 110.0, maturity = 2.0 }
"#;

    #[test]
    fn minimal_config_validates() {
        let c: Config = toml::from_str(BS).unwrap();
        let n = c.validate().unwrap();
        assert_eq!((n.paths, n.steps), (1000, 100));
        assert_eq!(c.portfolio().unwrap().positions.len(), 1);
    }

    #[test]
    fn negative_count_names_field() {
        let c: Config = toml::from_str(&BS.replace("seed = 7", "seed = 7\n[simulation]\npaths = -5")).unwrap();
        assert_eq!(c.validate().unwrap_err().field, "simulation.paths");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>(&BS.replace("seed = 7", "seed = 7\ncolour = 1")).is_err());
        assert!(toml::from_str::<Config>(&BS.replace("vol = 0.3", "vol = 0.3\nrho = 0.1")).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(toml::from_str::<Config>(&BS.replace("seed = 7", "")).is_err());
    }

    #[test]
    fn missing_fixed_rate_means_par() {
        let text = r#"
pipeline = "irs-portfolio"
seed = 1
[market]
type = "rates_fx"
rates = [{ a = 0.1, sigma = 0.01, forward = 0.02 }]
fx = []
[[positions]]
weight = 1.0
instrument = { type = "swap", delta = 0.5, periods = 4 }
[gp]
design = "paths"
"#;
        let c: Config = toml::from_str(text).unwrap();
        c.validate().unwrap();
        let p = c.portfolio().unwrap();
        let Instrument::Swap(s) = &p.positions[0].instrument else {
            panic!()
        };
        assert!((s.fixed_rate - 0.0201).abs() < 1e-3, "{}", s.fixed_rate);
    }
}
