//! Covariance functions.
//!
//! A [`KernelSpec`] is a declarative description of a kernel: a stationary
//! radial family (squared exponential or Matérn) with a shared or per-input
//! lengthscale, a linear kernel, or a sum/product of other specs. Besides
//! evaluation, every family provides
//!
//! * the derivative of the kernel with respect to each hyperparameter, used
//!   by evidence maximization, and
//! * the derivative with respect to the first input, used to differentiate
//!   the posterior mean (Greeks).
//!
//! Hyperparameters are exposed as a flat vector in a fixed order
//! ([`KernelSpec::params`]): for a stationary kernel the lengthscale(s)
//! followed by the signal variance, for the linear kernel its scale, and for
//! compositions the concatenation of the children.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{ensure_finite, invalid, Error, Result};

fn unit() -> f64 {
    1.0
}

/// Lengthscale of a stationary kernel, in input units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lengthscale {
    Shared(f64),
    /// One lengthscale per input dimension (ARD).
    PerDim(Vec<f64>),
}

impl Lengthscale {
    fn count(&self) -> usize {
        match self {
            Lengthscale::Shared(_) => 1,
            Lengthscale::PerDim(v) => v.len(),
        }
    }

    #[inline]
    fn get(&self, d: usize) -> f64 {
        match self {
            Lengthscale::Shared(l) => *l,
            Lengthscale::PerDim(v) => v[d],
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Lengthscale::Shared(l) => vec![*l],
            Lengthscale::PerDim(v) => v.clone(),
        }
    }

    fn rebuild(&self, vals: &[f64]) -> Lengthscale {
        match self {
            Lengthscale::Shared(_) => Lengthscale::Shared(vals[0]),
            Lengthscale::PerDim(_) => Lengthscale::PerDim(vals.to_vec()),
        }
    }
}

/// Declarative covariance function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    #[serde(alias = "se")]
    SquaredExponential {
        lengthscale: Lengthscale,
        #[serde(default = "unit")]
        variance: f64,
    },
    /// Matérn kernel with smoothness `nu` fixed at construction.
    Matern {
        nu: f64,
        lengthscale: Lengthscale,
        #[serde(default = "unit")]
        variance: f64,
    },
    /// `variance * <x, x'>`.
    Linear {
        #[serde(default = "unit")]
        variance: f64,
    },
    Sum {
        terms: Vec<KernelSpec>,
    },
    Product {
        terms: Vec<KernelSpec>,
    },
}

/// Radial profile `f(ρ)` of a stationary kernel, `ρ` the lengthscale-scaled
/// distance.
#[derive(Debug, Clone, Copy)]
enum Shape {
    Se,
    Matern12,
    Matern32,
    Matern52,
    Matern(f64),
}

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

impl Shape {
    fn matern(nu: f64) -> Shape {
        if (nu - 0.5).abs() < 1e-12 {
            Shape::Matern12
        } else if (nu - 1.5).abs() < 1e-12 {
            Shape::Matern32
        } else if (nu - 2.5).abs() < 1e-12 {
            Shape::Matern52
        } else {
            Shape::Matern(nu)
        }
    }

    #[inline]
    fn value(self, rho: f64) -> f64 {
        match self {
            Shape::Se => (-0.5 * rho * rho).exp(),
            Shape::Matern12 => (-rho).exp(),
            Shape::Matern32 => (1.0 + SQRT3 * rho) * (-SQRT3 * rho).exp(),
            Shape::Matern52 => (1.0 + SQRT5 * rho + 5.0 / 3.0 * rho * rho) * (-SQRT5 * rho).exp(),
            Shape::Matern(nu) => matern_profile(nu, rho),
        }
    }

    /// `f'(ρ)/ρ`, or `None` where the profile is not differentiable (the
    /// exponential kernel at ρ = 0).
    #[inline]
    fn slope_over_rho(self, rho: f64) -> Option<f64> {
        match self {
            Shape::Se => Some(-(-0.5 * rho * rho).exp()),
            Shape::Matern12 => {
                if rho > 0.0 {
                    Some(-(-rho).exp() / rho)
                } else {
                    None
                }
            }
            Shape::Matern32 => Some(-3.0 * (-SQRT3 * rho).exp()),
            Shape::Matern52 => Some(-5.0 / 3.0 * (1.0 + SQRT5 * rho) * (-SQRT5 * rho).exp()),
            Shape::Matern(nu) => {
                if rho < 1e-8 {
                    if nu > 1.0 {
                        Some(-nu / (nu - 1.0))
                    } else {
                        None
                    }
                } else {
                    let h = 1e-6 * rho.max(1e-3);
                    let lo = (rho - h).max(0.0);
                    let d = (matern_profile(nu, rho + h) - matern_profile(nu, lo)) / (rho + h - lo);
                    Some(d / rho)
                }
            }
        }
    }
}

/// Matérn correlation `2^{1-ν}/Γ(ν) z^ν K_ν(z)`, `z = √(2ν) ρ`, evaluated in
/// log space so that large `ν` does not overflow.
pub(crate) fn matern_profile(nu: f64, rho: f64) -> f64 {
    if rho <= 0.0 {
        return 1.0;
    }
    let z = (2.0 * nu).sqrt() * rho;
    let log_k = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * z.ln() + ln_bessel_k(nu, z);
    log_k.exp().min(1.0)
}

/// `ln K_ν(z)` for `z > 0` from `K_ν(z) = ∫₀^∞ exp(-z cosh t) cosh(νt) dt`,
/// integrated with composite Simpson around the peak of the dominant
/// exponent.
pub(crate) fn ln_bessel_k(nu: f64, z: f64) -> f64 {
    let nu = nu.abs();
    let h = |t: f64| -z * t.cosh() + nu * t;
    let t_star = (nu / z).asinh();
    let peak = h(t_star);
    let width = 1.0 / (z * z + nu * nu).sqrt().sqrt().max(1e-3);
    const CUT: f64 = -60.0;

    let mut hi = t_star + width;
    while h(hi) - peak > CUT {
        hi += width;
    }
    let mut lo = t_star;
    while lo > 0.0 && h(lo) - peak > CUT {
        lo = (lo - width).max(0.0);
    }

    let n = 4000usize;
    let step = (hi - lo) / n as f64;
    let integrand = |t: f64| {
        let e = (h(t) - peak).exp();
        0.5 * e * (1.0 + (-2.0 * nu * t).exp())
    };
    let mut acc = integrand(lo) + integrand(hi);
    for i in 1..n {
        let t = lo + step * i as f64;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * integrand(t);
    }
    peak + (acc * step / 3.0).ln()
}

/// Result of [`kernel_grad_hyper`].
#[derive(Debug, Clone)]
pub struct HyperGradient {
    /// `∂K/∂θ` for every hyperparameter in [`KernelSpec::params`] order.
    pub matrices: Vec<DMatrix<f64>>,
    /// True when some family had no analytic gradient and central finite
    /// differences were used instead.
    pub finite_difference: bool,
}

/// Result of [`kernel_grad_input`].
#[derive(Debug, Clone)]
pub struct InputGradient {
    /// Row `i` holds `∂k(x*, X_i)/∂x*`.
    pub gradient: DMatrix<f64>,
    /// Set when some row was evaluated at a point where the kernel is not
    /// differentiable; such rows are returned as zero.
    pub degenerate: bool,
}

impl KernelSpec {
    pub fn se(lengthscale: f64) -> Self {
        KernelSpec::SquaredExponential {
            lengthscale: Lengthscale::Shared(lengthscale),
            variance: 1.0,
        }
    }

    pub fn se_ard(lengthscales: Vec<f64>) -> Self {
        KernelSpec::SquaredExponential {
            lengthscale: Lengthscale::PerDim(lengthscales),
            variance: 1.0,
        }
    }

    pub fn matern(nu: f64, lengthscale: f64) -> Self {
        KernelSpec::Matern {
            nu,
            lengthscale: Lengthscale::Shared(lengthscale),
            variance: 1.0,
        }
    }

    pub fn linear(variance: f64) -> Self {
        KernelSpec::Linear { variance }
    }

    pub fn sum(terms: Vec<KernelSpec>) -> Self {
        KernelSpec::Sum { terms }
    }

    pub fn product(terms: Vec<KernelSpec>) -> Self {
        KernelSpec::Product { terms }
    }

    /// Replaces the signal variance of a stationary or linear kernel.
    /// Compositions are returned unchanged.
    pub fn with_variance(mut self, v: f64) -> Self {
        match &mut self {
            KernelSpec::SquaredExponential { variance, .. }
            | KernelSpec::Matern { variance, .. }
            | KernelSpec::Linear { variance } => *variance = v,
            KernelSpec::Sum { .. } | KernelSpec::Product { .. } => {}
        }
        self
    }

    /// Checks positivity of every hyperparameter and, when `dim` is given,
    /// that per-dimension lengthscales match it.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        let check_ls = |ls: &Lengthscale| -> Result<()> {
            let vals = ls.values();
            if vals.is_empty() || vals.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
                return Err(invalid("lengthscale", "must be finite and > 0"));
            }
            if let (Lengthscale::PerDim(v), Some(p)) = (ls, dim) {
                if v.len() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        found: v.len(),
                    });
                }
            }
            Ok(())
        };
        let check_var = |v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid("variance", "must be finite and > 0"))
            }
        };
        match self {
            KernelSpec::SquaredExponential { lengthscale, variance } => {
                check_ls(lengthscale)?;
                check_var(*variance)
            }
            KernelSpec::Matern {
                nu,
                lengthscale,
                variance,
            } => {
                if !(nu.is_finite() && *nu > 0.0) {
                    return Err(invalid("nu", "must be finite and > 0"));
                }
                check_ls(lengthscale)?;
                check_var(*variance)
            }
            KernelSpec::Linear { variance } => check_var(*variance),
            KernelSpec::Sum { terms } | KernelSpec::Product { terms } => {
                if terms.is_empty() {
                    return Err(invalid("terms", "composition needs at least one term"));
                }
                terms.iter().try_for_each(|t| t.validate(dim))
            }
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            KernelSpec::SquaredExponential { lengthscale, .. } | KernelSpec::Matern { lengthscale, .. } => {
                lengthscale.count() + 1
            }
            KernelSpec::Linear { .. } => 1,
            KernelSpec::Sum { terms } | KernelSpec::Product { terms } => terms.iter().map(|t| t.num_params()).sum(),
        }
    }

    /// Hyperparameter values in natural (positive) units.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.push_params(&mut out);
        out
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        match self {
            KernelSpec::SquaredExponential { lengthscale, variance }
            | KernelSpec::Matern {
                lengthscale, variance, ..
            } => {
                out.extend(lengthscale.values());
                out.push(*variance);
            }
            KernelSpec::Linear { variance } => out.push(*variance),
            KernelSpec::Sum { terms } | KernelSpec::Product { terms } => terms.iter().for_each(|t| t.push_params(out)),
        }
    }

    /// Human-readable names matching [`KernelSpec::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.push_names("", &mut out);
        out
    }

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        match self {
            KernelSpec::SquaredExponential { lengthscale, .. } | KernelSpec::Matern { lengthscale, .. } => {
                match lengthscale {
                    Lengthscale::Shared(_) => out.push(format!("{prefix}lengthscale")),
                    Lengthscale::PerDim(v) => {
                        for d in 0..v.len() {
                            out.push(format!("{prefix}lengthscale[{d}]"));
                        }
                    }
                }
                out.push(format!("{prefix}variance"));
            }
            KernelSpec::Linear { .. } => out.push(format!("{prefix}variance")),
            KernelSpec::Sum { terms } | KernelSpec::Product { terms } => {
                for (i, t) in terms.iter().enumerate() {
                    t.push_names(&format!("{prefix}{i}."), out);
                }
            }
        }
    }

    /// Returns a copy with hyperparameters replaced by `values` (natural
    /// units, [`KernelSpec::params`] order).
    pub fn with_params(&self, values: &[f64]) -> Result<KernelSpec> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                found: values.len(),
            });
        }
        let mut cursor = 0;
        Ok(self.rebuild(values, &mut cursor))
    }

    fn rebuild(&self, values: &[f64], cursor: &mut usize) -> KernelSpec {
        let mut take = |n: usize| {
            let s = &values[*cursor..*cursor + n];
            *cursor += n;
            s
        };
        match self {
            KernelSpec::SquaredExponential { lengthscale, .. } => {
                let ls = lengthscale.rebuild(take(lengthscale.count()));
                KernelSpec::SquaredExponential {
                    lengthscale: ls,
                    variance: take(1)[0],
                }
            }
            KernelSpec::Matern { nu, lengthscale, .. } => {
                let ls = lengthscale.rebuild(take(lengthscale.count()));
                KernelSpec::Matern {
                    nu: *nu,
                    lengthscale: ls,
                    variance: take(1)[0],
                }
            }
            KernelSpec::Linear { .. } => KernelSpec::Linear { variance: take(1)[0] },
            KernelSpec::Sum { terms } => KernelSpec::Sum {
                terms: terms.iter().map(|t| t.rebuild(values, cursor)).collect(),
            },
            KernelSpec::Product { terms } => KernelSpec::Product {
                terms: terms.iter().map(|t| t.rebuild(values, cursor)).collect(),
            },
        }
    }

    /// Expresses the spec in coordinates `z = x / input_scale` (per
    /// dimension) with outputs multiplied by `√var_factor`. Exact for
    /// stationary kernels with per-dimension lengthscales or equal scales;
    /// a shared lengthscale under unequal scales uses the geometric mean.
    /// Linear kernels only pick up the variance factor.
    pub fn rescaled(&self, input_scale: &[f64], var_factor: f64) -> KernelSpec {
        let map_ls = |ls: &Lengthscale| match ls {
            Lengthscale::Shared(l) => {
                let g = if input_scale.is_empty() {
                    1.0
                } else {
                    (input_scale.iter().map(|s| s.ln()).sum::<f64>() / input_scale.len() as f64).exp()
                };
                Lengthscale::Shared(l / g)
            }
            Lengthscale::PerDim(v) => Lengthscale::PerDim(v.iter().zip(input_scale).map(|(l, s)| l / s).collect()),
        };
        match self {
            KernelSpec::SquaredExponential { lengthscale, variance } => KernelSpec::SquaredExponential {
                lengthscale: map_ls(lengthscale),
                variance: variance * var_factor,
            },
            KernelSpec::Matern {
                nu,
                lengthscale,
                variance,
            } => KernelSpec::Matern {
                nu: *nu,
                lengthscale: map_ls(lengthscale),
                variance: variance * var_factor,
            },
            KernelSpec::Linear { variance } => KernelSpec::Linear {
                variance: variance * var_factor,
            },
            KernelSpec::Sum { terms } => KernelSpec::Sum {
                terms: terms.iter().map(|t| t.rescaled(input_scale, var_factor)).collect(),
            },
            KernelSpec::Product { terms } => KernelSpec::Product {
                terms: terms
                    .iter()
                    .enumerate()
                    .map(|(i, t)| t.rescaled(input_scale, if i == 0 { var_factor } else { 1.0 }))
                    .collect(),
            },
        }
    }

    /// Whether every component has an analytic hyperparameter gradient.
    pub fn has_analytic_hyper_gradient(&self) -> bool {
        match self {
            KernelSpec::Matern { nu, .. } => !matches!(Shape::matern(*nu), Shape::Matern(_)),
            KernelSpec::Sum { terms } | KernelSpec::Product { terms } => {
                terms.iter().all(|t| t.has_analytic_hyper_gradient())
            }
            _ => true,
        }
    }

    /// Whether the kernel depends on its inputs only through their difference.
    pub fn is_stationary(&self) -> bool {
        match self {
            KernelSpec::Linear { .. } => false,
            KernelSpec::Sum { terms } | KernelSpec::Product { terms } => terms.iter().all(|t| t.is_stationary()),
            _ => true,
        }
    }

    /// `k(x, x)` for stationary kernels, which is independent of `x`.
    pub fn prior_variance_at(&self, x: &[f64]) -> f64 {
        self.eval_unchecked(x, x)
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            KernelSpec::SquaredExponential { lengthscale, variance } => {
                variance * Shape::Se.value(scaled_distance(lengthscale, x, y))
            }
            KernelSpec::Matern {
                nu,
                lengthscale,
                variance,
            } => variance * Shape::matern(*nu).value(scaled_distance(lengthscale, x, y)),
            KernelSpec::Linear { variance } => variance * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>(),
            KernelSpec::Sum { terms } => terms.iter().map(|t| t.eval_unchecked(x, y)).sum(),
            KernelSpec::Product { terms } => terms.iter().map(|t| t.eval_unchecked(x, y)).product(),
        }
    }

    /// Accumulates `∂k(x, y)/∂θ` into `out` (length `num_params`). Only
    /// valid when [`Self::has_analytic_hyper_gradient`] holds.
    fn param_grad_pair(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            KernelSpec::SquaredExponential { lengthscale, variance } => {
                stationary_param_grad(Shape::Se, lengthscale, *variance, x, y, out)
            }
            KernelSpec::Matern {
                nu,
                lengthscale,
                variance,
            } => stationary_param_grad(Shape::matern(*nu), lengthscale, *variance, x, y, out),
            KernelSpec::Linear { .. } => {
                out[0] = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            }
            KernelSpec::Sum { terms } => {
                let mut offset = 0;
                for t in terms {
                    let n = t.num_params();
                    t.param_grad_pair(x, y, &mut out[offset..offset + n]);
                    offset += n;
                }
            }
            KernelSpec::Product { terms } => {
                let values: Vec<f64> = terms.iter().map(|t| t.eval_unchecked(x, y)).collect();
                let mut offset = 0;
                for (i, t) in terms.iter().enumerate() {
                    let n = t.num_params();
                    let slot = &mut out[offset..offset + n];
                    t.param_grad_pair(x, y, slot);
                    let others: f64 = values
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(_, v)| v)
                        .product();
                    slot.iter_mut().for_each(|g| *g *= others);
                    offset += n;
                }
            }
        }
    }

    /// Accumulates `∂k(x*, y)/∂x*` into `out` (length p). Returns true when
    /// the point is degenerate (gradient undefined; contribution left zero).
    fn input_grad_pair(&self, xs: &[f64], y: &[f64], out: &mut [f64]) -> bool {
        match self {
            KernelSpec::SquaredExponential { lengthscale, variance } => {
                stationary_input_grad(Shape::Se, lengthscale, *variance, xs, y, out)
            }
            KernelSpec::Matern {
                nu,
                lengthscale,
                variance,
            } => stationary_input_grad(Shape::matern(*nu), lengthscale, *variance, xs, y, out),
            KernelSpec::Linear { variance } => {
                out.iter_mut().zip(y).for_each(|(o, b)| *o = variance * b);
                false
            }
            KernelSpec::Sum { terms } => {
                let mut tmp = vec![0.0; out.len()];
                let mut degenerate = false;
                out.iter_mut().for_each(|o| *o = 0.0);
                for t in terms {
                    degenerate |= t.input_grad_pair(xs, y, &mut tmp);
                    out.iter_mut().zip(&tmp).for_each(|(o, g)| *o += g);
                }
                degenerate
            }
            KernelSpec::Product { terms } => {
                let values: Vec<f64> = terms.iter().map(|t| t.eval_unchecked(xs, y)).collect();
                let mut tmp = vec![0.0; out.len()];
                let mut degenerate = false;
                out.iter_mut().for_each(|o| *o = 0.0);
                for (i, t) in terms.iter().enumerate() {
                    degenerate |= t.input_grad_pair(xs, y, &mut tmp);
                    let others: f64 = values
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(_, v)| v)
                        .product();
                    out.iter_mut().zip(&tmp).for_each(|(o, g)| *o += g * others);
                }
                degenerate
            }
        }
    }
}

#[inline]
fn scaled_distance(ls: &Lengthscale, x: &[f64], y: &[f64]) -> f64 {
    match ls {
        Lengthscale::Shared(l) => {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() / l
        }
        Lengthscale::PerDim(v) => x
            .iter()
            .zip(y)
            .zip(v)
            .map(|((a, b), l)| {
                let d = (a - b) / l;
                d * d
            })
            .sum::<f64>()
            .sqrt(),
    }
}

fn stationary_param_grad(shape: Shape, ls: &Lengthscale, variance: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
    let rho = scaled_distance(ls, x, y);
    let n_ls = ls.count();
    out[n_ls] = shape.value(rho);
    let g = if rho > 0.0 {
        shape.slope_over_rho(rho).unwrap_or(0.0)
    } else {
        0.0
    };
    match ls {
        Lengthscale::Shared(l) => {
            // ∂ρ/∂ℓ = -ρ/ℓ, so ∂k/∂ℓ = -v f'(ρ) ρ/ℓ = -v g ρ²/ℓ
            out[0] = -variance * g * rho * rho / l;
        }
        Lengthscale::PerDim(v) => {
            for d in 0..v.len() {
                let diff = x[d] - y[d];
                out[d] = -variance * g * diff * diff / (v[d] * v[d] * v[d]);
            }
        }
    }
}

fn stationary_input_grad(
    shape: Shape,
    ls: &Lengthscale,
    variance: f64,
    xs: &[f64],
    y: &[f64],
    out: &mut [f64],
) -> bool {
    let rho = scaled_distance(ls, xs, y);
    let g = match shape.slope_over_rho(rho) {
        Some(g) => g,
        None => {
            out.iter_mut().for_each(|o| *o = 0.0);
            return true;
        }
    };
    for d in 0..out.len() {
        let l = ls.get(d);
        out[d] = variance * g * (xs[d] - y[d]) / (l * l);
    }
    false
}

/// Row-major copy of the points of an `n×p` matrix.
pub(crate) fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    x.transpose().as_slice().to_vec()
}

/// `k(x, x')`.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: x2.len(),
        });
    }
    ensure_finite(x, "kernel input")?;
    ensure_finite(x2, "kernel input")?;
    Ok(spec.eval_unchecked(x, x2))
}

/// Cross-covariance matrix between the rows of `x` (n×p) and `x2` (m×p).
pub fn kernel_matrix(spec: &KernelSpec, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != x2.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: x2.ncols(),
        });
    }
    ensure_finite(x.as_slice(), "kernel input")?;
    ensure_finite(x2.as_slice(), "kernel input")?;
    let p = x.ncols();
    let a = row_major(x);
    let b = row_major(x2);
    Ok(cross_rows(spec, &a, &b, p))
}

pub(crate) fn cross_rows(spec: &KernelSpec, a: &[f64], b: &[f64], p: usize) -> DMatrix<f64> {
    let n = a.len().checked_div(p).unwrap_or(0);
    let m = b.len().checked_div(p).unwrap_or(0);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &a[i * p..(i + 1) * p];
            (0..m)
                .map(|j| spec.eval_unchecked(xi, &b[j * p..(j + 1) * p]))
                .collect()
        })
        .collect();
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

/// Symmetric Gram matrix of the rows of `x`.
pub fn gram(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_finite(x.as_slice(), "kernel input")?;
    let p = x.ncols();
    Ok(gram_rows(spec, &row_major(x), p))
}

pub(crate) fn gram_rows(spec: &KernelSpec, a: &[f64], p: usize) -> DMatrix<f64> {
    let n = a.len().checked_div(p).unwrap_or(0);
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        let xj = &a[j * p..(j + 1) * p];
        for i in j..n {
            let v = spec.eval_unchecked(&a[i * p..(i + 1) * p], xj);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `∂K/∂θ` for every hyperparameter θ of `spec` (natural units).
///
/// Families without an analytic gradient (Matérn with ν outside
/// {1/2, 3/2, 5/2}) fall back to central differences with step `1e-6·θ`.
pub fn kernel_grad_hyper(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<HyperGradient> {
    ensure_finite(x.as_slice(), "kernel input")?;
    Ok(hyper_grad_rows(spec, &row_major(x), x.ncols()))
}

pub(crate) fn hyper_grad_rows(spec: &KernelSpec, a: &[f64], p: usize) -> HyperGradient {
    let n = a.len().checked_div(p).unwrap_or(0);
    let np = spec.num_params();
    if !spec.has_analytic_hyper_gradient() {
        let theta = spec.params();
        let matrices = (0..np)
            .map(|k| {
                let h = 1e-6 * theta[k];
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[k] += h;
                dn[k] -= h;
                let ku = gram_rows(&spec.with_params(&up).expect("same arity"), a, p);
                let kd = gram_rows(&spec.with_params(&dn).expect("same arity"), a, p);
                (ku - kd) / (2.0 * h)
            })
            .collect();
        return HyperGradient {
            matrices,
            finite_difference: true,
        };
    }
    let mut matrices = vec![DMatrix::zeros(n, n); np];
    let mut buf = vec![0.0; np];
    for j in 0..n {
        let xj = &a[j * p..(j + 1) * p];
        for i in j..n {
            spec.param_grad_pair(&a[i * p..(i + 1) * p], xj, &mut buf);
            for (m, g) in matrices.iter_mut().zip(&buf) {
                m[(i, j)] = *g;
                m[(j, i)] = *g;
            }
        }
    }
    HyperGradient {
        matrices,
        finite_difference: false,
    }
}

/// `∂k(x*, X_i)/∂x*` for every row `X_i` of `x` (n×p).
pub fn kernel_grad_input(spec: &KernelSpec, x_star: &[f64], x: &DMatrix<f64>) -> Result<InputGradient> {
    if x_star.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: x_star.len(),
        });
    }
    ensure_finite(x_star, "kernel input")?;
    ensure_finite(x.as_slice(), "kernel input")?;
    Ok(input_grad_rows(spec, x_star, &row_major(x), x.ncols()))
}

pub(crate) fn input_grad_rows(spec: &KernelSpec, x_star: &[f64], a: &[f64], p: usize) -> InputGradient {
    let n = a.len().checked_div(p).unwrap_or(0);
    let mut gradient = DMatrix::zeros(n, p);
    let mut buf = vec![0.0; p];
    let mut degenerate = false;
    for i in 0..n {
        degenerate |= spec.input_grad_pair(x_star, &a[i * p..(i + 1) * p], &mut buf);
        for d in 0..p {
            gradient[(i, d)] = buf[d];
        }
    }
    InputGradient { gradient, degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn se_point_values() {
        let k = KernelSpec::se(1.0);
        assert_eq!(eval_kernel(&k, &[0.3, 0.2], &[0.3, 0.2]).unwrap(), 1.0);
        let v = eval_kernel(&k, &[0.0], &[1.0]).unwrap();
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn matern_half_is_exponential() {
        let k = KernelSpec::matern(0.5, 1.0);
        let v = eval_kernel(&k, &[0.0, 0.0], &[0.6, 0.8]).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
        // the generic Bessel route agrees with the closed form
        for rho in [0.1, 0.5, 1.0, 2.5, 7.0] {
            let generic = matern_profile(0.5, rho);
            assert!(close(generic, (-rho).exp(), 1e-10), "rho={rho}");
        }
        for rho in [0.1, 1.0, 3.0] {
            let g32 = matern_profile(1.5, rho);
            assert!(close(g32, Shape::Matern32.value(rho), 1e-10));
            let g52 = matern_profile(2.5, rho);
            assert!(close(g52, Shape::Matern52.value(rho), 1e-10));
        }
    }

    #[test]
    fn matern_approaches_se_as_nu_grows() {
        let grid: Vec<f64> = (0..40).map(|i| 0.1 * i as f64).collect();
        let gap = |nu: f64| {
            grid.iter()
                .map(|&r| (matern_profile(nu, r) - (-0.5 * r * r).exp()).abs())
                .fold(0.0, f64::max)
        };
        let g25 = gap(25.0);
        let g100 = gap(100.0);
        assert!(g100 < g25, "{g100} !< {g25}");
        assert!(g100 < 5e-3);
    }

    #[test]
    fn gram_of_three_grid_points() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let k = gram(&KernelSpec::se(1.0), &x).unwrap();
        let e1 = (-0.5f64).exp();
        let e2 = (-2.0f64).exp();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, e1, e2, e1, 1.0, e1, e2, e1, 1.0]);
        assert!((k - want).amax() < 1e-15);
        assert!((e2 - 0.1353).abs() < 1e-4);
    }

    #[test]
    fn single_point_gram_is_signal_variance() {
        let x = DMatrix::from_row_slice(1, 2, &[0.4, -1.0]);
        let k = kernel_matrix(&KernelSpec::se(0.7).with_variance(2.5), &x, &x).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert_eq!(k[(0, 0)], 2.5);
    }

    #[test]
    fn identical_rows_give_identical_gram_rows() {
        let x = DMatrix::from_row_slice(3, 1, &[0.2, 0.9, 0.2]);
        let k = gram(&KernelSpec::matern(2.5, 0.3), &x).unwrap();
        assert_eq!(k.row(0), k.row(2));
    }

    #[test]
    fn dimension_mismatch_and_non_finite() {
        let k = KernelSpec::se(1.0);
        assert!(matches!(
            eval_kernel(&k, &[0.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert_eq!(
            eval_kernel(&k, &[f64::NAN], &[0.0]),
            Err(Error::NonFinite("kernel input"))
        );
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 3);
        assert!(kernel_matrix(&k, &a, &b).is_err());
    }

    #[test]
    fn se_lengthscale_gradient_closed_form() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let g = kernel_grad_hyper(&KernelSpec::se(1.0), &x).unwrap();
        assert!(!g.finite_difference);
        assert_eq!(g.matrices[0][(0, 0)], 0.0);
        assert!((g.matrices[0][(0, 1)] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn se_input_gradient_closed_form() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let g = kernel_grad_input(&KernelSpec::se(1.0), &[0.0], &x).unwrap();
        assert_eq!(g.gradient[(0, 0)], 0.0);
        assert!((g.gradient[(1, 0)] - (-0.5f64).exp()).abs() < 1e-15);
        assert!(!g.degenerate);
    }

    #[test]
    fn exponential_kernel_flags_coincident_points() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let g = kernel_grad_input(&KernelSpec::matern(0.5, 1.0), &[0.0], &x).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.gradient[(0, 0)], 0.0);
        assert!((g.gradient[(1, 0)] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn param_round_trip() {
        let k = KernelSpec::sum(vec![
            KernelSpec::linear(0.5),
            KernelSpec::se_ard(vec![0.2, 0.3]).with_variance(2.0),
        ]);
        assert_eq!(k.params(), vec![0.5, 0.2, 0.3, 2.0]);
        assert_eq!(
            k.param_names(),
            vec!["0.variance", "1.lengthscale[0]", "1.lengthscale[1]", "1.variance"]
        );
        let k2 = k.with_params(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(k2.params(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(k.with_params(&[1.0]).is_err());
        assert!(k.validate(Some(2)).is_ok());
        assert!(k.validate(Some(3)).is_err());
        assert!(KernelSpec::se(-1.0).validate(None).is_err());
        assert!(KernelSpec::matern(0.0, 1.0).validate(None).is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let k = KernelSpec::sum(vec![
            KernelSpec::linear(0.5),
            KernelSpec::product(vec![KernelSpec::matern(2.5, 0.4), KernelSpec::se_ard(vec![0.1, 0.2])]),
        ]);
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            kernel: KernelSpec,
        }
        let text = toml::to_string(&Wrap { kernel: k.clone() }).unwrap();
        let back: Wrap = toml::from_str(&text).unwrap();
        assert_eq!(back.kernel, k);
        let parsed: Wrap = toml::from_str("[kernel]\ntype = \"squared_exponential\"\nlengthscale = 0.3\n").unwrap();
        assert_eq!(parsed.kernel, KernelSpec::se(0.3));
    }

    fn spec_zoo() -> Vec<KernelSpec> {
        vec![
            KernelSpec::se(0.7).with_variance(1.3),
            KernelSpec::se_ard(vec![0.5, 1.4]),
            KernelSpec::matern(0.5, 0.9),
            KernelSpec::matern(1.5, 0.6).with_variance(0.4),
            KernelSpec::matern(2.5, 1.1),
            KernelSpec::matern(3.7, 0.8),
            KernelSpec::linear(0.8),
            KernelSpec::sum(vec![KernelSpec::linear(0.3), KernelSpec::se(0.5)]),
            KernelSpec::product(vec![KernelSpec::matern(2.5, 0.7), KernelSpec::se_ard(vec![1.0, 0.4])]),
        ]
    }

    /// Central finite difference oracle on the hyperparameters.
    fn fd_hyper(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Vec<f64> {
        let theta = spec.params();
        (0..theta.len())
            .map(|k| {
                let h = 1e-5 * theta[k];
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[k] += h;
                dn[k] -= h;
                let fu = spec.with_params(&up).unwrap().eval_unchecked(x, y);
                let fd = spec.with_params(&dn).unwrap().eval_unchecked(x, y);
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    fn fd_input(spec: &KernelSpec, xs: &[f64], y: &[f64]) -> Vec<f64> {
        (0..xs.len())
            .map(|d| {
                let h = 1e-6;
                let mut up = xs.to_vec();
                let mut dn = xs.to_vec();
                up[d] += h;
                dn[d] -= h;
                (spec.eval_unchecked(&up, y) - spec.eval_unchecked(&dn, y)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let pts = [
            ([0.1, 0.2], [0.4, -0.3]),
            ([1.0, 0.0], [0.2, 0.5]),
            ([-0.3, 0.7], [0.35, 0.1]),
        ];
        for spec in spec_zoo() {
            for (x, y) in &pts {
                let mut an = vec![0.0; spec.num_params()];
                if spec.has_analytic_hyper_gradient() {
                    spec.param_grad_pair(x, y, &mut an);
                    let fd = fd_hyper(&spec, x, y);
                    for (a, f) in an.iter().zip(&fd) {
                        assert!((a - f).abs() <= 1e-5 * f.abs().max(1e-3), "{spec:?}: {a} vs {f}");
                    }
                }
                let mut gi = vec![0.0; 2];
                let degenerate = spec.input_grad_pair(x, y, &mut gi);
                assert!(!degenerate);
                let fd = fd_input(&spec, x, y);
                for (a, f) in gi.iter().zip(&fd) {
                    assert!((a - f).abs() <= 1e-5 * f.abs().max(1e-3), "{spec:?}: {a} vs {f}");
                }
            }
        }
    }

    #[test]
    fn generic_matern_uses_flagged_finite_differences() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.4, 1.1]);
        let spec = KernelSpec::matern(3.7, 0.8);
        let g = kernel_grad_hyper(&spec, &x).unwrap();
        assert!(g.finite_difference);
        let a = row_major(&x);
        for i in 0..3 {
            for j in 0..3 {
                let fd = fd_hyper(&spec, &a[i..i + 1], &a[j..j + 1]);
                for (m, f) in g.matrices.iter().zip(&fd) {
                    assert!((m[(i, j)] - f).abs() <= 1e-5 * f.abs().max(1e-3));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn kernels_are_symmetric(
            x in proptest::collection::vec(-3.0f64..3.0, 2),
            y in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            for spec in spec_zoo() {
                let a = spec.eval_unchecked(&x, &y);
                let b = spec.eval_unchecked(&y, &x);
                prop_assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn gram_is_psd(pts in proptest::collection::vec(-2.0f64..2.0, 2..=100)) {
            let n = pts.len() / 2;
            let x = DMatrix::from_row_slice(n, 2, &pts[..2 * n]);
            for spec in spec_zoo() {
                let mut k = gram(&spec, &x).unwrap();
                let scale = k.diagonal().iter().cloned().fold(0.0, f64::max).max(1.0);
                for i in 0..n { k[(i, i)] += 1e-10 * scale; }
                let eig = k.symmetric_eigenvalues();
                let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assert!(min >= -1e-9 * scale, "{:?}: {}", spec, min);
            }
        }
    }
}
