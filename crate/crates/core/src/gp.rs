//! Single-output GP regression: evidence maximization, prediction,
//! input-gradient prediction and rank-1 online conditioning.
//!
//! A fitted [`GpModel`] works internally in rescaled coordinates: inputs are
//! mapped affinely to the unit box and targets are centered and divided by
//! their standard deviation. Hyperparameters stored on the model refer to
//! those internal units; all public inputs and outputs are in original units.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::linalg::{cho_inverse, cho_solve, cholesky_jittered, cholesky_with_jitter, log_det};
use crate::optim::{minimize, Bounds, OptimizerCfg};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Affine maps between original and internal coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_mean: f64,
    pub output_scale: f64,
}

impl Scaling {
    /// Centering only.
    pub fn centering(p: usize, y: &[f64]) -> Scaling {
        Scaling {
            input_offset: vec![0.0; p],
            input_scale: vec![1.0; p],
            output_mean: mean(y),
            output_scale: 1.0,
        }
    }

    /// Unit-box inputs, standardized outputs. Degenerate ranges keep unit
    /// scale.
    pub fn unit_box(x: &DMatrix<f64>, y: &[f64]) -> Scaling {
        let p = x.ncols();
        let mut input_offset = vec![0.0; p];
        let mut input_scale = vec![1.0; p];
        for d in 0..p {
            let col = x.column(d);
            let lo = col.min();
            let hi = col.max();
            input_offset[d] = lo;
            if hi > lo {
                input_scale[d] = hi - lo;
            }
        }
        let m = mean(y);
        let sd = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len().max(1) as f64).sqrt();
        Scaling {
            input_offset,
            input_scale,
            output_mean: m,
            output_scale: if sd > 1e-300 * m.abs().max(1.0) && sd.is_finite() && sd > 0.0 {
                sd
            } else {
                1.0
            },
        }
    }

    fn to_unit_into(&self, x: &[f64], out: &mut [f64]) {
        for d in 0..x.len() {
            out[d] = (x[d] - self.input_offset[d]) / self.input_scale[d];
        }
    }

    fn rows_to_unit(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let p = x.ncols();
        let mut rows = kernels::row_major(x);
        for r in rows.chunks_mut(p.max(1)) {
            let raw = r.to_vec();
            self.to_unit_into(&raw, r);
        }
        rows
    }

    /// Kernel in original units mapped to internal units.
    pub fn kernel_to_internal(&self, k: &KernelSpec) -> KernelSpec {
        let s2 = self.output_scale * self.output_scale;
        k.rescaled(&self.input_scale, 1.0 / s2)
    }

    /// Kernel in internal units mapped back to original units.
    pub fn kernel_to_external(&self, k: &KernelSpec) -> KernelSpec {
        let inv: Vec<f64> = self.input_scale.iter().map(|s| 1.0 / s).collect();
        let s2 = self.output_scale * self.output_scale;
        k.rescaled(&inv, s2)
    }
}

fn mean(y: &[f64]) -> f64 {
    if y.is_empty() {
        0.0
    } else {
        y.iter().sum::<f64>() / y.len() as f64
    }
}

/// Options for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitCfg {
    pub optimizer: OptimizerCfg,
    /// Map inputs to the unit box and standardize outputs before training.
    pub rescale: bool,
    pub optimize_noise: bool,
    /// Lower bound of the noise standard deviation, internal units.
    pub noise_floor: f64,
}

impl Default for FitCfg {
    fn default() -> Self {
        FitCfg {
            optimizer: OptimizerCfg::default(),
            rescale: true,
            optimize_noise: true,
            noise_floor: 1e-6,
        }
    }
}

/// Fitted single-output GP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    /// Kernel in internal units.
    pub kernel: KernelSpec,
    /// Noise standard deviation in internal units.
    pub noise: f64,
    /// Absolute diagonal jitter that was needed to factor the Gram matrix.
    pub jitter: f64,
    pub scaling: Scaling,
    dim: usize,
    /// Training inputs in internal units, row-major.
    x_rows: Vec<f64>,
    /// Training targets in internal units.
    y: DVector<f64>,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    /// Log evidence of the internal-unit data at the stored hyperparameters.
    pub log_evidence: f64,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct GradientPrediction {
    /// Row `i` holds `∂mean/∂x` at the i-th test point.
    pub gradient: DMatrix<f64>,
    pub degenerate: bool,
}

fn check_training(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if x.nrows() == 0 {
        return Err(invalid("X", "needs at least one training row"));
    }
    ensure_finite(x.as_slice(), "training inputs")?;
    ensure_finite(y, "training targets")
}

/// Evidence (and optionally its log-space gradient) on already-transformed
/// data. The gradient is ordered as kernel log-parameters then `log σ`.
fn evidence_core(
    rows: &[f64],
    p: usize,
    y: &DVector<f64>,
    kernel: &KernelSpec,
    sigma: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = y.len();
    let mut k = kernels::gram_rows(kernel, rows, p);
    for i in 0..n {
        k[(i, i)] += sigma * sigma;
    }
    let fac = cholesky_jittered(&k)?;
    // the jitter is proportional to the mean diagonal, so it moves with the
    // hyperparameters and belongs in the gradient
    let mean_diag = k.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let rel = if mean_diag > 0.0 { fac.jitter / mean_diag } else { 0.0 };
    let alpha = cho_solve(&fac.l, y);
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det(&fac.l) - 0.5 * n as f64 * LN_2PI;
    if !value.is_finite() {
        return Err(Error::NonFinite("log evidence"));
    }
    if !want_grad {
        return Ok((value, None));
    }
    let kinv = cho_inverse(&fac.l);
    let mut w = &alpha * alpha.transpose();
    w -= &kinv;
    let hyper = kernels::hyper_grad_rows(kernel, rows, p);
    let theta = kernel.params();
    let tr_w = w.trace();
    let mut grad: Vec<f64> = hyper
        .matrices
        .iter()
        .zip(&theta)
        .map(|(dk, t)| {
            let d_jitter = rel * dk.diagonal().sum() / n as f64;
            0.5 * (w.component_mul(dk).sum() + d_jitter * tr_w) * t
        })
        .collect();
    // ∂(K + σ²I)/∂log σ = 2σ² I
    grad.push(sigma * sigma * tr_w * (1.0 + rel));
    Ok((value, Some(grad)))
}

/// Log marginal likelihood `−½ Yᵀ(K+σ²I)⁻¹Y − ½ log det(K+σ²I) − (n/2) log 2π`
/// of the raw data under a zero prior mean.
pub fn log_evidence(x: &DMatrix<f64>, y: &[f64], kernel: &KernelSpec, sigma: f64) -> Result<f64> {
    check_training(x, y)?;
    kernel.validate(Some(x.ncols()))?;
    let yv = DVector::from_column_slice(y);
    Ok(evidence_core(&kernels::row_major(x), x.ncols(), &yv, kernel, sigma, false)?.0)
}

/// Gradient of [`log_evidence`] with respect to the kernel log-parameters
/// (in [`KernelSpec::params`] order) followed by `log σ`.
pub fn evidence_grad(x: &DMatrix<f64>, y: &[f64], kernel: &KernelSpec, sigma: f64) -> Result<Vec<f64>> {
    check_training(x, y)?;
    kernel.validate(Some(x.ncols()))?;
    let yv = DVector::from_column_slice(y);
    Ok(
        evidence_core(&kernels::row_major(x), x.ncols(), &yv, kernel, sigma, true)?
            .1
            .expect("gradient requested"),
    )
}

pub(crate) fn log_bounds(kernel: &KernelSpec) -> Bounds {
    kernel
        .param_names()
        .iter()
        .map(|n| {
            if n.ends_with("variance") {
                (1e-6f64.ln(), 1e6f64.ln())
            } else {
                (1e-3f64.ln(), 1e3f64.ln())
            }
        })
        .collect()
}

/// Trains hyperparameters by maximizing the evidence and conditions on the
/// data. `kernel0` and `sigma0` are initial values in original units.
pub fn fit(x: &DMatrix<f64>, y: &[f64], kernel0: &KernelSpec, sigma0: f64, cfg: &FitCfg) -> Result<GpModel> {
    check_training(x, y)?;
    if x.nrows() < 2 {
        return Err(invalid("X", "training needs at least two rows"));
    }
    kernel0.validate(Some(x.ncols()))?;
    if !(sigma0.is_finite() && sigma0 >= 0.0) {
        return Err(invalid("noise", "must be finite and >= 0"));
    }
    let scaling = if cfg.rescale {
        Scaling::unit_box(x, y)
    } else {
        Scaling::centering(x.ncols(), y)
    };
    let p = x.ncols();
    let rows = scaling.rows_to_unit(x);
    let yv = DVector::from_iterator(
        y.len(),
        y.iter().map(|v| (v - scaling.output_mean) / scaling.output_scale),
    );
    let k0 = scaling.kernel_to_internal(kernel0);
    let s0 = sigma0 / scaling.output_scale;
    let (kernel, noise) = train(&rows, p, &yv, &k0, s0, cfg)?;
    GpModel::from_internal(kernel, noise, scaling, p, rows, yv)
}

/// Evidence maximization in internal units; returns the trained kernel and
/// noise.
fn train(
    rows: &[f64],
    p: usize,
    y: &DVector<f64>,
    k0: &KernelSpec,
    s0: f64,
    cfg: &FitCfg,
) -> Result<(KernelSpec, f64)> {
    let nk = k0.num_params();
    let mut x0: Vec<f64> = k0.params().iter().map(|v| v.ln()).collect();
    let mut bounds = log_bounds(k0);
    for (v, (lo, hi)) in x0.iter_mut().zip(&bounds) {
        *v = v.clamp(*lo, *hi);
    }
    let floor = cfg.noise_floor.max(1e-12);
    if cfg.optimize_noise {
        x0.push(s0.max(floor).ln().min(10f64.ln()));
        bounds.push((floor.ln(), 10f64.ln()));
    }
    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let params: Vec<f64> = theta[..nk].iter().map(|v| v.exp()).collect();
        let kernel = k0.with_params(&params)?;
        let sigma = if cfg.optimize_noise { theta[nk].exp() } else { s0 };
        let (v, g) = evidence_core(rows, p, y, &kernel, sigma, true)?;
        let mut g = g.expect("gradient requested");
        if !cfg.optimize_noise {
            g.pop();
        }
        Ok((-v, g.into_iter().map(|gi| -gi).collect()))
    };
    let best = minimize(objective, &x0, &bounds, &cfg.optimizer)?;
    let params: Vec<f64> = best.x[..nk].iter().map(|v| v.exp()).collect();
    let kernel = k0.with_params(&params)?;
    let noise = if cfg.optimize_noise { best.x[nk].exp() } else { s0 };
    Ok((kernel, noise))
}

impl GpModel {
    fn from_internal(
        kernel: KernelSpec,
        noise: f64,
        scaling: Scaling,
        dim: usize,
        x_rows: Vec<f64>,
        y: DVector<f64>,
    ) -> Result<GpModel> {
        let n = y.len();
        let mut k = kernels::gram_rows(&kernel, &x_rows, dim);
        for i in 0..n {
            k[(i, i)] += noise * noise;
        }
        let fac = cholesky_jittered(&k)?;
        let alpha = cho_solve(&fac.l, &y);
        let log_evidence = -0.5 * y.dot(&alpha) - 0.5 * log_det(&fac.l) - 0.5 * n as f64 * LN_2PI;
        Ok(GpModel {
            kernel,
            noise,
            jitter: fac.jitter,
            scaling,
            dim,
            x_rows,
            y,
            chol: fac.l,
            alpha,
            log_evidence,
        })
    }

    /// Posterior for fixed hyperparameters given in original units.
    pub fn condition(x: &DMatrix<f64>, y: &[f64], kernel: &KernelSpec, sigma: f64, rescale: bool) -> Result<GpModel> {
        check_training(x, y)?;
        kernel.validate(Some(x.ncols()))?;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(invalid("noise", "must be finite and >= 0"));
        }
        let scaling = if rescale {
            Scaling::unit_box(x, y)
        } else {
            Scaling::centering(x.ncols(), y)
        };
        Self::condition_scaled(
            x,
            y,
            &scaling.kernel_to_internal(kernel),
            sigma / scaling.output_scale,
            scaling,
        )
    }

    /// Posterior with hyperparameters in internal units of `scaling`.
    pub fn condition_scaled(
        x: &DMatrix<f64>,
        y: &[f64],
        kernel: &KernelSpec,
        sigma: f64,
        scaling: Scaling,
    ) -> Result<GpModel> {
        check_training(x, y)?;
        let rows = scaling.rows_to_unit(x);
        let yv = DVector::from_iterator(
            y.len(),
            y.iter().map(|v| (v - scaling.output_mean) / scaling.output_scale),
        );
        Self::from_internal(kernel.clone(), sigma, scaling, x.ncols(), rows, yv)
    }

    /// Retrains on new data starting from this model's hyperparameters
    /// (internal units), with a fresh scaling of the new data.
    pub fn refit(&self, x: &DMatrix<f64>, y: &[f64], cfg: &FitCfg) -> Result<GpModel> {
        let k0 = self.scaling.kernel_to_external(&self.kernel);
        fit(x, y, &k0, self.noise * self.scaling.output_scale, cfg)
    }

    /// Kernel expressed in original units.
    pub fn kernel_external(&self) -> KernelSpec {
        self.scaling.kernel_to_external(&self.kernel)
    }

    /// Noise standard deviation in original units.
    pub fn noise_external(&self) -> f64 {
        self.noise * self.scaling.output_scale
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    /// Training inputs in original units.
    pub fn train_x(&self) -> DMatrix<f64> {
        let n = self.n_train();
        let p = self.dim;
        DMatrix::from_fn(n, p, |i, d| {
            self.x_rows[i * p + d] * self.scaling.input_scale[d] + self.scaling.input_offset[d]
        })
    }

    /// Training targets in original units.
    pub fn train_y(&self) -> Vec<f64> {
        self.y
            .iter()
            .map(|v| v * self.scaling.output_scale + self.scaling.output_mean)
            .collect()
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `(K+σ²I)⁻¹Y` in internal units.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    fn check_dim(&self, p: usize) -> Result<()> {
        if p != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: p,
            });
        }
        Ok(())
    }

    /// Mean and variance at a single point given in original units.
    pub fn predict_point(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_dim(x.len())?;
        ensure_finite(x, "test input")?;
        let mut z = vec![0.0; self.dim];
        self.scaling.to_unit_into(x, &mut z);
        let (m, v) = self.moments_unit(&z, true);
        Ok((m, v))
    }

    /// Posterior mean at a single point, skipping the variance solve.
    pub fn predict_mean_point(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        ensure_finite(x, "test input")?;
        let mut z = vec![0.0; self.dim];
        self.scaling.to_unit_into(x, &mut z);
        Ok(self.moments_unit(&z, false).0)
    }

    fn kstar(&self, z: &[f64]) -> DVector<f64> {
        let p = self.dim;
        DVector::from_iterator(
            self.n_train(),
            (0..self.n_train()).map(|i| self.kernel.eval_unchecked(z, &self.x_rows[i * p..(i + 1) * p])),
        )
    }

    fn moments_unit(&self, z: &[f64], want_var: bool) -> (f64, f64) {
        let ks = self.kstar(z);
        let s = self.scaling.output_scale;
        let mean = ks.dot(&self.alpha) * s + self.scaling.output_mean;
        if !want_var {
            return (mean, 0.0);
        }
        let v = self
            .chol
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let var = (self.kernel.eval_unchecked(z, z) - v.norm_squared()).max(0.0) * s * s;
        (mean, var)
    }

    /// Posterior mean and latent-function variance at the rows of `xs`.
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<Prediction> {
        self.check_dim(xs.ncols())?;
        ensure_finite(xs.as_slice(), "test input")?;
        let m = xs.nrows();
        let p = self.dim;
        let zs = self.scaling.rows_to_unit(xs);
        let kst = kernels::cross_rows(&self.kernel, &self.x_rows, &zs, p); // n×m
        let s = self.scaling.output_scale;
        let mean = (kst.transpose() * &self.alpha).map(|v| v * s + self.scaling.output_mean);
        let v = self
            .chol
            .solve_lower_triangular(&kst)
            .expect("Cholesky factor has a positive diagonal");
        let variance = DVector::from_iterator(
            m,
            (0..m).map(|j| {
                let z = &zs[j * p..(j + 1) * p];
                (self.kernel.eval_unchecked(z, z) - v.column(j).norm_squared()).max(0.0) * s * s
            }),
        );
        Ok(Prediction { mean, variance })
    }

    /// Posterior mean only.
    pub fn predict_mean(&self, xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dim(xs.ncols())?;
        ensure_finite(xs.as_slice(), "test input")?;
        let zs = self.scaling.rows_to_unit(xs);
        let kst = kernels::cross_rows(&self.kernel, &self.x_rows, &zs, self.dim);
        let s = self.scaling.output_scale;
        Ok((kst.transpose() * &self.alpha).map(|v| v * s + self.scaling.output_mean))
    }

    /// `∂mean/∂x` at the rows of `xs`, in original units.
    pub fn predict_gradient(&self, xs: &DMatrix<f64>) -> Result<GradientPrediction> {
        self.check_dim(xs.ncols())?;
        ensure_finite(xs.as_slice(), "test input")?;
        let p = self.dim;
        let zs = self.scaling.rows_to_unit(xs);
        let mut gradient = DMatrix::zeros(xs.nrows(), p);
        let mut degenerate = false;
        for j in 0..xs.nrows() {
            let g = kernels::input_grad_rows(&self.kernel, &zs[j * p..(j + 1) * p], &self.x_rows, p);
            degenerate |= g.degenerate;
            let dz = g.gradient.transpose() * &self.alpha;
            for d in 0..p {
                gradient[(j, d)] = dz[d] * self.scaling.output_scale / self.scaling.input_scale[d];
            }
        }
        Ok(GradientPrediction { gradient, degenerate })
    }

    /// Conditions on one more observation by extending the Cholesky factor.
    /// Hyperparameters and scaling maps are kept.
    pub fn online_update(&self, x: &[f64], y: f64) -> Result<GpModel> {
        self.check_dim(x.len())?;
        ensure_finite(x, "update input")?;
        ensure_finite(&[y], "update target")?;
        let p = self.dim;
        let n = self.n_train();
        let mut z = vec![0.0; p];
        self.scaling.to_unit_into(x, &mut z);
        let yz = (y - self.scaling.output_mean) / self.scaling.output_scale;
        let ks = self.kstar(&z);
        let c = self.kernel.eval_unchecked(&z, &z) + self.noise * self.noise + self.jitter;
        let l = self
            .chol
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let d2 = c - l.norm_squared();
        let duplicate = self.noise == 0.0
            && self
                .x_rows
                .chunks(p.max(1))
                .any(|r| r.iter().zip(&z).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs())));
        if duplicate || d2 <= 0.0 {
            // a noise-free repeat of a training input: accept only a
            // consistent target and leave the posterior untouched
            let predicted = ks.dot(&self.alpha);
            if (predicted - yz).abs() > 1e-6 * (1.0 + yz.abs()) {
                return Err(Error::InconsistentObservation {
                    observed: y,
                    predicted: predicted * self.scaling.output_scale + self.scaling.output_mean,
                });
            }
            return Ok(self.clone());
        }
        let mut chol = DMatrix::zeros(n + 1, n + 1);
        chol.view_mut((0, 0), (n, n)).copy_from(&self.chol);
        for j in 0..n {
            chol[(n, j)] = l[j];
        }
        chol[(n, n)] = d2.sqrt();
        let mut x_rows = self.x_rows.clone();
        x_rows.extend_from_slice(&z);
        let yv = DVector::from_iterator(n + 1, self.y.iter().cloned().chain(std::iter::once(yz)));
        let alpha = cho_solve(&chol, &yv);
        let log_evidence = -0.5 * yv.dot(&alpha) - 0.5 * log_det(&chol) - 0.5 * (n + 1) as f64 * LN_2PI;
        Ok(GpModel {
            kernel: self.kernel.clone(),
            noise: self.noise,
            jitter: self.jitter,
            scaling: self.scaling.clone(),
            dim: p,
            x_rows,
            y: yv,
            chol,
            alpha,
            log_evidence,
        })
    }

    /// Full refactorization on the stored data, with the stored jitter.
    /// Used to cross-check incremental updates.
    pub fn rebuild(&self) -> Result<GpModel> {
        let n = self.n_train();
        let mut k = kernels::gram_rows(&self.kernel, &self.x_rows, self.dim);
        for i in 0..n {
            k[(i, i)] += self.noise * self.noise;
        }
        let l = cholesky_with_jitter(&k, self.jitter).ok_or(Error::IllConditioned { jitter: self.jitter })?;
        let alpha = cho_solve(&l, &self.y);
        let log_evidence = -0.5 * self.y.dot(&alpha) - 0.5 * log_det(&l) - 0.5 * n as f64 * LN_2PI;
        Ok(GpModel {
            chol: l,
            alpha,
            log_evidence,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricers::{bs_price, OptionSide};
    use proptest::prelude::*;

    fn toy(n: usize) -> (DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_fn(n, 2, |i, d| {
            ((i * 7 + d * 3) % 11) as f64 / 10.0 + 0.05 * d as f64 * i as f64
        });
        let y = (0..n)
            .map(|i| (3.0 * x[(i, 0)]).sin() + x[(i, 1)] * x[(i, 1)])
            .collect();
        (x, y)
    }

    /// Dense oracle: explicit inverse and determinant of the Gram matrix
    /// with the same relative diagonal jitter the factorization adds.
    fn dense_evidence(x: &DMatrix<f64>, y: &[f64], k: &KernelSpec, s: f64) -> f64 {
        let n = y.len();
        let mut g = kernels::gram(k, x).unwrap();
        for i in 0..n {
            g[(i, i)] += s * s;
        }
        let jitter = crate::linalg::BASE_JITTER * g.diagonal().mean();
        for i in 0..n {
            g[(i, i)] += jitter;
        }
        let inv = g.clone().try_inverse().unwrap();
        let yv = DVector::from_column_slice(y);
        -0.5 * (yv.transpose() * inv * &yv)[0] - 0.5 * g.determinant().ln() - 0.5 * n as f64 * LN_2PI
    }

    #[test]
    fn scalar_evidence() {
        let x = DMatrix::from_element(1, 1, 0.3);
        let v = log_evidence(&x, &[0.0], &KernelSpec::se(1.0), 0.0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-9);
    }

    #[test]
    fn duplicate_rows_with_noise_are_fine() {
        let x = DMatrix::from_column_slice(3, 1, &[0.1, 0.1, 0.5]);
        let v = log_evidence(&x, &[1.0, 1.1, 0.3], &KernelSpec::se(0.4), 0.1).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn evidence_matches_dense_oracle() {
        let (x, y) = toy(15);
        for k in [
            KernelSpec::se(0.4).with_variance(1.7),
            KernelSpec::matern(2.5, 0.3),
            KernelSpec::se_ard(vec![0.3, 0.9]),
        ] {
            let a = log_evidence(&x, &y, &k, 0.05).unwrap();
            let b = dense_evidence(&x, &y, &k, 0.05);
            assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn evidence_gradient_matches_finite_differences() {
        let (x, y) = toy(12);
        let k = KernelSpec::sum(vec![
            KernelSpec::se_ard(vec![0.3, 0.7]).with_variance(1.3),
            KernelSpec::linear(0.2),
        ]);
        let s = 0.08;
        let g = evidence_grad(&x, &y, &k, s).unwrap();
        let theta: Vec<f64> = k
            .params()
            .iter()
            .map(|v| v.ln())
            .chain(std::iter::once(f64::ln(s)))
            .collect();
        let eval = |t: &[f64]| {
            let nk = t.len() - 1;
            let kk = k
                .with_params(&t[..nk].iter().map(|v| v.exp()).collect::<Vec<_>>())
                .unwrap();
            log_evidence(&x, &y, &kk, t[nk].exp()).unwrap()
        };
        for i in 0..theta.len() {
            let h = 1e-5;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn noise_component_is_negative_on_clean_data() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64 / 9.0);
        let y: Vec<f64> = (0..10).map(|i| (i as f64 / 3.0).sin()).collect();
        let g = evidence_grad(&x, &y, &KernelSpec::se(0.3), 1e-3).unwrap();
        assert!(*g.last().unwrap() < 0.0);
        let e0 = log_evidence(&x, &y, &KernelSpec::se(0.3), 1e-3).unwrap();
        let e1 = log_evidence(&x, &y, &KernelSpec::se(0.3), 2e-3).unwrap();
        assert!(e1 < e0);
    }

    #[test]
    fn noise_free_interpolation() {
        let (x, y) = toy(20);
        let m = GpModel::condition(&x, &y, &KernelSpec::se(0.5), 0.0, true).unwrap();
        let pred = m.predict(&x).unwrap();
        for i in 0..y.len() {
            assert!((pred.mean[i] - y[i]).abs() < 1e-6);
            assert!(pred.variance[i] <= 1e-8);
        }
    }

    #[test]
    fn single_point_posterior_by_hand() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let m = GpModel::condition(&x, &[2.0], &KernelSpec::se(1.0), 0.0, false).unwrap();
        // centering removes the mean, so compare against the centered algebra
        let (mean, var) = m.predict_point(&[0.7]).unwrap();
        let k = (-0.5f64 * 0.49).exp();
        assert!((mean - 2.0).abs() < 1e-12);
        assert!((var - (1.0 - k * k)).abs() < 1e-9);

        // zero-mean target to check the k(x*,x₁)·y₁ form directly
        let m =
            GpModel::condition_scaled(&x, &[0.0], &KernelSpec::se(1.0), 0.0, Scaling::centering(1, &[0.0])).unwrap();
        let (mean, _) = m.predict_point(&[0.7]).unwrap();
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn extrapolation_variance_grows() {
        let x = DMatrix::from_fn(20, 1, |i, _| i as f64 / 19.0);
        let y: Vec<f64> = (0..20)
            .map(|i| 2.0 * i as f64 / 19.0 + (i as f64).sin() * 0.1)
            .collect();
        let k = KernelSpec::sum(vec![KernelSpec::linear(1.0), KernelSpec::se(0.2)]);
        let m = fit(&x, &y, &k, 0.01, &FitCfg::default()).unwrap();
        let xs = DMatrix::from_fn(10, 1, |i, _| 1.05 + 0.2 * i as f64);
        let v = m.predict(&xs).unwrap().variance;
        for i in 1..v.len() {
            assert!(v[i] > v[i - 1]);
        }
    }

    #[test]
    fn fit_bs_calls_in_sample() {
        let spots: Vec<f64> = (0..50).map(|i| 50.0 + 100.0 * i as f64 / 49.0).collect();
        let y: Vec<f64> = spots
            .iter()
            .map(|s| bs_price(OptionSide::Call, *s, 100.0, 0.01, 2.0, 0.3).unwrap().price)
            .collect();
        let x = DMatrix::from_column_slice(50, 1, &spots);
        let m = fit(&x, &y, &KernelSpec::se(20.0), 1e-3, &FitCfg::default()).unwrap();
        let pred = m.predict_mean(&x).unwrap();
        let scale = y.iter().cloned().fold(0.0, f64::max);
        for i in 0..50 {
            assert!((pred[i] - y[i]).abs() <= 1e-3 * scale);
        }
    }

    #[test]
    fn optimizer_ends_at_stationary_point() {
        let x = DMatrix::from_fn(25, 1, |i, _| i as f64 / 24.0);
        let y: Vec<f64> = (0..25)
            .map(|i| (6.0 * i as f64 / 24.0).sin() + 0.05 * ((i * 37 % 11) as f64 / 11.0 - 0.5))
            .collect();
        let cfg = FitCfg {
            rescale: false,
            ..Default::default()
        };
        let k0 = KernelSpec::se(0.3);
        let m = fit(&x, &y, &k0, 0.1, &cfg).unwrap();
        let yc: Vec<f64> = y.iter().map(|v| v - m.scaling.output_mean).collect();
        let g = evidence_grad(&x, &yc, &m.kernel, m.noise).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-4, "{g:?}");
        let start = log_evidence(&x, &yc, &k0, 0.1).unwrap();
        assert!(m.log_evidence >= start);
    }

    #[test]
    fn constant_targets() {
        let x = DMatrix::from_fn(8, 1, |i, _| i as f64);
        let y = vec![3.5; 8];
        let m = fit(&x, &y, &KernelSpec::se(1.0), 0.0, &FitCfg::default()).unwrap();
        let xs = DMatrix::from_fn(5, 1, |i, _| 0.3 + 1.7 * i as f64);
        let p = m.predict(&xs).unwrap();
        assert!(p.mean.iter().all(|v| (v - 3.5).abs() < 1e-9));
        assert!(m.predict(&x).unwrap().variance.iter().all(|v| *v < 1e-4));
        let g = m.predict_gradient(&xs).unwrap();
        assert!(g.gradient.amax() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_difference_of_mean() {
        let (x, y) = toy(20);
        let m = GpModel::condition(&x, &y, &KernelSpec::matern(2.5, 0.4).with_variance(2.0), 0.01, true).unwrap();
        let xs = DMatrix::from_row_slice(2, 2, &[0.31, 0.42, 0.77, 0.05]);
        let g = m.predict_gradient(&xs).unwrap();
        for j in 0..2 {
            for d in 0..2 {
                let h = 1e-6;
                let mut a = xs.row(j).transpose().as_slice().to_vec();
                let mut b = a.clone();
                a[d] += h;
                b[d] -= h;
                let fd = (m.predict_mean_point(&a).unwrap() - m.predict_mean_point(&b).unwrap()) / (2.0 * h);
                assert!((g.gradient[(j, d)] - fd).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rescaling_is_transparent() {
        let (mut x, y) = toy(15);
        x.column_mut(0).iter_mut().for_each(|v| *v = 80.0 + 40.0 * *v);
        let k = KernelSpec::se_ard(vec![12.0, 0.4]).with_variance(0.8);
        let raw = GpModel::condition(&x, &y, &k, 0.01, false).unwrap();
        let scaled = GpModel::condition(&x, &y, &k, 0.01, true).unwrap();
        let xs = DMatrix::from_row_slice(3, 2, &[85.0, 0.2, 101.0, 0.7, 119.0, 0.5]);
        let (a, b) = (raw.predict(&xs).unwrap(), scaled.predict(&xs).unwrap());
        assert!((a.mean - b.mean).amax() < 1e-8);
        assert!((a.variance - b.variance).amax() < 1e-8);
        let (ga, gb) = (
            raw.predict_gradient(&xs).unwrap(),
            scaled.predict_gradient(&xs).unwrap(),
        );
        assert!((ga.gradient - gb.gradient).amax() < 1e-8);
    }

    #[test]
    fn online_update_matches_rebuild() {
        let (x, y) = toy(25);
        let mut m =
            GpModel::condition(&x.rows(0, 20).into_owned(), &y[..20], &KernelSpec::se(0.3), 0.02, true).unwrap();
        for i in 20..25 {
            let xi: Vec<f64> = x.row(i).iter().cloned().collect();
            m = m.online_update(&xi, y[i]).unwrap();
        }
        let full = m.rebuild().unwrap();
        let xs = DMatrix::from_row_slice(2, 2, &[0.2, 0.3, 0.9, 1.1]);
        let (a, b) = (m.predict(&xs).unwrap(), full.predict(&xs).unwrap());
        assert!((a.mean - b.mean).amax() < 1e-8);
        assert!((a.variance - b.variance).amax() < 1e-8);
        assert!((m.log_evidence - full.log_evidence).abs() < 1e-8);
    }

    #[test]
    fn online_update_interpolates_and_rejects_conflicts() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.5, 1.0]);
        let m = GpModel::condition(&x, &[0.0, 1.0, 0.0], &KernelSpec::se(0.3), 0.0, true).unwrap();
        let u = m.online_update(&[0.25], 0.7).unwrap();
        assert!((u.predict_point(&[0.25]).unwrap().0 - 0.7).abs() < 1e-6);
        assert!(matches!(
            m.online_update(&[0.5], 3.0),
            Err(Error::InconsistentObservation { .. })
        ));
        let same = m.online_update(&[0.5], 1.0).unwrap();
        let xs = DMatrix::from_column_slice(3, 1, &[0.1, 0.6, 0.8]);
        let (a, b) = (m.predict(&xs).unwrap(), same.predict(&xs).unwrap());
        assert!((a.mean - b.mean).amax() < 1e-12);
    }

    #[test]
    fn model_round_trips_through_json() {
        let (x, y) = toy(10);
        let m = GpModel::condition(&x, &y, &KernelSpec::se(0.5), 0.01, true).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: GpModel = serde_json::from_str(&text).unwrap();
        let xs = DMatrix::from_row_slice(1, 2, &[0.3, 0.3]);
        assert_eq!(m.predict(&xs).unwrap().mean, back.predict(&xs).unwrap().mean);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn online_update_never_increases_variance(
            xn in -0.5f64..1.5, yn in -2.0f64..2.0,
            probes in proptest::collection::vec(-1.0f64..2.0, 5),
        ) {
            let x = DMatrix::from_column_slice(4, 1, &[0.0, 0.3, 0.6, 1.0]);
            let m = GpModel::condition(&x, &[0.1, 0.5, -0.2, 0.3], &KernelSpec::se(0.25), 0.05, true).unwrap();
            let u = m.online_update(&[xn], yn).unwrap();
            let xs = DMatrix::from_column_slice(5, 1, &probes);
            let (a, b) = (m.predict(&xs).unwrap(), u.predict(&xs).unwrap());
            for i in 0..5 {
                prop_assert!(b.variance[i] <= a.variance[i] + 1e-12);
            }
        }

        #[test]
        fn cholesky_reconstructs_gram(pts in proptest::collection::vec(0.0f64..1.0, 4..20)) {
            let n = pts.len();
            let x = DMatrix::from_column_slice(n, 1, &pts);
            let y: Vec<f64> = pts.iter().map(|v| v.sin()).collect();
            let m = GpModel::condition(&x, &y, &KernelSpec::matern(1.5, 0.3), 0.1, true).unwrap();
            let mut k = kernels::gram_rows(&m.kernel, &m.x_rows, 1);
            for i in 0..n { k[(i, i)] += m.noise * m.noise + m.jitter; }
            let l = m.cholesky();
            prop_assert!((l * l.transpose() - &k).amax() <= 1e-10 * k.amax());
            let r = &k * m.alpha() - &m.y;
            prop_assert!(r.amax() <= 1e-8 * m.y.amax().max(1.0));
        }
    }
}
