//! Reference valuation: Black–Scholes, Heston via the Fourier-cosine
//! expansion, Hull–White zero-coupon bonds and spot-starting swaps.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionSide {
    Call,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsQuote {
    pub price: f64,
    pub delta: f64,
    pub vega: f64,
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Black–Scholes price, delta and vega of a European option.
pub fn bs_price(side: OptionSide, s: f64, k: f64, r: f64, t: f64, vol: f64) -> Result<BsQuote> {
    for (name, v) in [("spot", s), ("strike", k), ("volatility", vol)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(name, "must be finite and > 0"));
        }
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(invalid("maturity", "must be finite and >= 0"));
    }
    if !r.is_finite() {
        return Err(Error::NonFinite("rate"));
    }
    if t == 0.0 {
        let (price, delta) = match side {
            OptionSide::Call => ((s - k).max(0.0), if s > k { 1.0 } else { 0.0 }),
            OptionSide::Put => ((k - s).max(0.0), if s < k { -1.0 } else { 0.0 }),
        };
        return Ok(BsQuote {
            price,
            delta,
            vega: 0.0,
        });
    }
    let sq = vol * t.sqrt();
    let d1 = ((s / k).ln() + (r + 0.5 * vol * vol) * t) / sq;
    let d2 = d1 - sq;
    let df = (-r * t).exp();
    let vega = s * norm_pdf(d1) * t.sqrt();
    Ok(match side {
        OptionSide::Call => BsQuote {
            price: s * norm_cdf(d1) - k * df * norm_cdf(d2),
            delta: norm_cdf(d1),
            vega,
        },
        OptionSide::Put => BsQuote {
            price: k * df * norm_cdf(-d2) - s * norm_cdf(-d1),
            delta: norm_cdf(d1) - 1.0,
            vega,
        },
    })
}

/// Heston model and option terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HestonParams {
    pub s0: f64,
    pub v0: f64,
    pub kappa: f64,
    pub theta: f64,
    /// Volatility of variance.
    pub sigma: f64,
    pub r: f64,
    pub rho: f64,
    pub strike: f64,
    pub maturity: f64,
}

impl Default for HestonParams {
    fn default() -> Self {
        HestonParams {
            s0: 100.0,
            v0: 0.1,
            kappa: 0.1,
            theta: 0.15,
            sigma: 0.1,
            r: 0.01,
            rho: -0.9,
            strike: 100.0,
            maturity: 2.0,
        }
    }
}

impl HestonParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.s0,
            self.v0,
            self.kappa,
            self.theta,
            self.sigma,
            self.r,
            self.rho,
            self.strike,
            self.maturity,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("heston parameters"));
        }
        if self.s0 <= 0.0 || self.strike <= 0.0 {
            return Err(invalid("s0/strike", "must be > 0"));
        }
        if self.v0 < 0.0 {
            return Err(invalid("v0", "must be >= 0"));
        }
        if self.kappa <= 0.0 || self.theta <= 0.0 || self.sigma <= 0.0 {
            return Err(invalid("kappa/theta/sigma", "must be > 0"));
        }
        if self.rho.abs() > 1.0 {
            return Err(invalid("rho", "must lie in [-1, 1]"));
        }
        if self.maturity <= 0.0 {
            return Err(invalid("maturity", "must be > 0"));
        }
        Ok(())
    }

    /// `2κθ ≥ σ²`: the variance process stays strictly positive.
    pub fn feller_satisfied(&self) -> bool {
        2.0 * self.kappa * self.theta >= self.sigma * self.sigma
    }

    /// Characteristic function of `ln(S_T/S_0)`, in the form that avoids
    /// the branch-cut discontinuity of the complex logarithm.
    pub fn char_fn(&self, u: Complex64) -> Complex64 {
        let i = Complex64::i();
        let (k, th, s, rho, t) = (self.kappa, self.theta, self.sigma, self.rho, self.maturity);
        let b = k - rho * s * i * u;
        let d = (b * b + s * s * (i * u + u * u)).sqrt();
        let g = (b - d) / (b + d);
        let e = (-d * t).exp();
        let c = k * th / (s * s) * ((b - d) * t - 2.0 * ((1.0 - g * e) / (1.0 - g)).ln());
        let dd = (b - d) / (s * s) * (1.0 - e) / (1.0 - g * e);
        (i * u * self.r * t + c + dd * self.v0).exp()
    }

    /// First, second and fourth cumulants of `ln(S_T/S_0)` from central
    /// differences of the cumulant generating function `ln E[e^{s X}]`.
    pub fn cumulants(&self) -> (f64, f64, f64) {
        let cgf = |s: f64| self.char_fn(Complex64::new(0.0, -s)).ln().re;
        let scale = (self.v0.max(self.theta) * self.maturity).sqrt().max(1e-3);
        let h = 0.25 / scale.max(0.25);
        let (m2, m1, z, p1, p2) = (cgf(-2.0 * h), cgf(-h), cgf(0.0), cgf(h), cgf(2.0 * h));
        let c1 = (p1 - m1) / (2.0 * h);
        let c2 = (p1 - 2.0 * z + m1) / (h * h);
        let c4 = (p2 - 4.0 * p1 + 6.0 * z - 4.0 * m1 + m2) / h.powi(4);
        let c2 = if c2.is_finite() && c2 > 0.0 {
            c2
        } else {
            self.theta * self.maturity
        };
        let c4 = if c4.is_finite() { c4.abs() } else { 0.0 };
        (c1, c2, c4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CosCfg {
    pub n_terms: usize,
    /// Truncation multiplier `L` of the interval `c1 ± L√(c2 + √c4)`.
    pub truncation: f64,
}

impl Default for CosCfg {
    fn default() -> Self {
        CosCfg {
            n_terms: 256,
            truncation: 12.0,
        }
    }
}

/// Cosine-series coefficients `χ_k(c, d)` and `ψ_k(c, d)` on `[a, b]`.
fn chi_psi(k: usize, a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let u = k as f64 * std::f64::consts::PI / (b - a);
    let (sd, cd) = (u * (d - a)).sin_cos();
    let (sc, cc) = (u * (c - a)).sin_cos();
    let chi = (cd * d.exp() - cc * c.exp() + u * sd * d.exp() - u * sc * c.exp()) / (1.0 + u * u);
    let psi = if k == 0 { d - c } else { (sd - sc) / u };
    (chi, psi)
}

/// European option under Heston by the Fourier-cosine expansion. The put
/// is expanded directly and the call follows from parity.
pub fn heston_price_cos(params: &HestonParams, side: OptionSide, cfg: &CosCfg) -> Result<f64> {
    params.validate()?;
    if cfg.n_terms < 64 {
        return Err(invalid("n_terms", "must be >= 64"));
    }
    if !(cfg.truncation.is_finite() && cfg.truncation > 0.0) {
        return Err(invalid("truncation", "must be > 0"));
    }
    let put = cos_put(params, cfg);
    if !put.is_finite() {
        return Err(Error::NonFinite("heston price"));
    }
    Ok(match side {
        OptionSide::Put => put,
        OptionSide::Call => put + params.s0 - params.strike * (-params.r * params.maturity).exp(),
    })
}

fn cos_put(p: &HestonParams, cfg: &CosCfg) -> f64 {
    let (c1, c2, c4) = p.cumulants();
    let x = (p.s0 / p.strike).ln();
    let half = cfg.truncation * (c2 + c4.sqrt()).sqrt();
    // interval for y = ln(S_T/K) = x + ln(S_T/S_0)
    let a = x + c1 - half;
    let b = x + c1 + half;
    let mut acc = 0.0;
    for k in 0..cfg.n_terms {
        let u = k as f64 * std::f64::consts::PI / (b - a);
        let (chi, psi) = chi_psi(k, a, b, a, 0.0_f64.max(a));
        let vk = 2.0 / (b - a) * p.strike * (psi - chi);
        let phase = Complex64::new(0.0, u * (x - a)).exp();
        let term = (p.char_fn(Complex64::new(u, 0.0)) * phase).re * vk;
        acc += if k == 0 { 0.5 * term } else { term };
    }
    (-p.r * p.maturity).exp() * acc
}

/// One-factor Hull–White model fitted to a flat initial forward curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HullWhite {
    pub a: f64,
    pub sigma: f64,
    /// Flat instantaneous forward rate `f(0, t)`.
    pub forward: f64,
}

impl Default for HullWhite {
    fn default() -> Self {
        HullWhite {
            a: 0.1,
            sigma: 0.01,
            forward: 0.02,
        }
    }
}

impl HullWhite {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(invalid("a", "mean reversion must be > 0"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(invalid("sigma", "must be >= 0"));
        }
        if !self.forward.is_finite() {
            return Err(Error::NonFinite("forward"));
        }
        Ok(())
    }

    /// Initial discount curve `P(0, t)`.
    pub fn p0(&self, t: f64) -> f64 {
        (-self.forward * t).exp()
    }

    /// Deterministic shift with `r(t) = x(t) + β(t)`.
    pub fn beta(&self, t: f64) -> f64 {
        let e = 1.0 - (-self.a * t).exp();
        self.forward + self.sigma * self.sigma / (2.0 * self.a * self.a) * e * e
    }

    pub fn b(&self, t: f64, big_t: f64) -> f64 {
        (1.0 - (-self.a * (big_t - t)).exp()) / self.a
    }

    /// Variance of `∫_t^T x(u) du` given `x(t)`.
    fn v(&self, t: f64, big_t: f64) -> f64 {
        let a = self.a;
        let tau = big_t - t;
        self.sigma * self.sigma / (a * a)
            * (tau + 2.0 / a * (-a * tau).exp() - 0.5 / a * (-2.0 * a * tau).exp() - 1.5 / a)
    }

    /// Zero-coupon bond `P(t, T)` given the short rate `r(t)`.
    pub fn bond(&self, t: f64, big_t: f64, r: f64) -> f64 {
        if big_t - t <= 0.0 {
            return 1.0;
        }
        let x = r - self.beta(t);
        self.p0(big_t) / self.p0(t)
            * (0.5 * (self.v(t, big_t) - self.v(0.0, big_t) + self.v(0.0, t)) - self.b(t, big_t) * x).exp()
    }

    /// Simple rate `L(t, T) = (1/P(t, T) − 1)/(T − t)`.
    pub fn simple_rate(&self, t: f64, big_t: f64, r: f64) -> f64 {
        let tau = big_t - t;
        if tau <= 0.0 {
            return 0.0;
        }
        (1.0 / self.bond(t, big_t, r) - 1.0) / tau
    }
}

/// Spot-starting swap, receiving floating and paying the fixed rate,
/// valued per unit notional in its own currency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Swap {
    pub fixed_rate: f64,
    /// Reset period.
    pub delta: f64,
    /// Number of periods `N`; resets at `t_0 + nδ`, `0 ≤ n ≤ N`.
    pub periods: usize,
    #[serde(default)]
    pub start: f64,
    #[serde(default = "one")]
    pub notional: f64,
    /// Currency index; 0 is domestic.
    #[serde(default)]
    pub currency: usize,
}

fn one() -> f64 {
    1.0
}

const RESET_TOL: f64 = 1e-9;

impl Swap {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(invalid("delta", "must be > 0"));
        }
        if self.periods == 0 {
            return Err(invalid("periods", "must be >= 1"));
        }
        if !self.fixed_rate.is_finite() || !self.start.is_finite() || !self.notional.is_finite() {
            return Err(Error::NonFinite("swap terms"));
        }
        Ok(())
    }

    pub fn reset(&self, n: usize) -> f64 {
        self.start + n as f64 * self.delta
    }

    pub fn maturity(&self) -> f64 {
        self.reset(self.periods)
    }

    /// Index of the latest reset strictly before `t`, or `None` at or
    /// before `t_0`.
    pub fn previous_reset(&self, t: f64) -> Option<usize> {
        if t <= self.start + RESET_TOL {
            return None;
        }
        let k = ((t - self.start) / self.delta - RESET_TOL).ceil() as usize;
        Some(k.saturating_sub(1).min(self.periods))
    }

    fn reset_index(&self, t: f64) -> Option<usize> {
        let k = ((t - self.start) / self.delta).round();
        if k >= 0.0 && (t - self.start - k * self.delta).abs() <= RESET_TOL && (k as usize) <= self.periods {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Par fixed rate at `t_0` given the short rate there.
    pub fn par_rate(&self, curve: &HullWhite, r0: f64) -> f64 {
        let t0 = self.start;
        let annuity: f64 = (1..=self.periods).map(|i| curve.bond(t0, self.reset(i), r0)).sum();
        (1.0 - curve.bond(t0, self.maturity(), r0)) / (self.delta * annuity)
    }
}

/// Swap value at `t ∈ [t_0, t_N]` per unit notional, in the swap currency.
/// `r_t` is the short rate at `t` and `r_reset` the short rate at the
/// latest reset strictly before `t` (ignored at `t_0`).
pub fn irs_price(swap: &Swap, curve: &HullWhite, t: f64, r_t: f64, r_reset: f64) -> Result<f64> {
    swap.validate()?;
    let (t0, tn) = (swap.start, swap.maturity());
    if !(t >= t0 - RESET_TOL && t <= tn + RESET_TOL) {
        return Err(Error::OutsideSchedule { t, start: t0, end: tn });
    }
    let n_per = swap.periods;
    let d = swap.delta;
    let s = swap.fixed_rate;
    let disc = |from: f64, to: f64, r: f64| 1.0 / (1.0 + (to - from) * curve.simple_rate(from, to, r));
    let value = match swap.reset_index(t) {
        Some(0) => {
            1.0 - 1.0 / (1.0 + n_per as f64 * d * curve.simple_rate(t0, tn, r_t))
                - d * s
                    * (1..=n_per)
                        .map(|i| 1.0 / (1.0 + i as f64 * d * curve.simple_rate(t0, swap.reset(i), r_t)))
                        .sum::<f64>()
        }
        Some(n) => {
            let tn_reset = swap.reset(n);
            let prev = swap.reset(n - 1);
            let last = curve.simple_rate(prev, tn_reset, r_reset);
            1.0 + d * last
                - 1.0 / (1.0 + (n_per - n) as f64 * d * curve.simple_rate(tn_reset, tn, r_t))
                - d * s
                    * (0..=n_per - n)
                        .map(|i| 1.0 / (1.0 + i as f64 * d * curve.simple_rate(tn_reset, swap.reset(n + i), r_t)))
                        .sum::<f64>()
        }
        None => {
            let n = swap.previous_reset(t).expect("t is past t_0");
            let tn_reset = swap.reset(n);
            let next = swap.reset(n + 1);
            let fixing = curve.simple_rate(tn_reset, next, r_reset);
            (1.0 + d * fixing) * disc(t, next, r_t)
                - disc(t, tn, r_t)
                - d * s * (1..=n_per - n).map(|i| disc(t, swap.reset(n + i), r_t)).sum::<f64>()
        }
    };
    Ok(value * swap.notional)
}
