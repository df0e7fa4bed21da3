//! Matrix-variate GP with separable covariance `K′ ⊗ Ω`: one input kernel
//! shared by all outputs and a task covariance `Ω = bbᵀ + ω²I`.
//!
//! Targets are stored as an `n×d` matrix; `vec(Y)` stacks row by row, so
//! entry `(i, l)` sits at position `i·d + l` and has covariance
//! `K′_{ii'} Ω_{ll'}` with entry `(i', l')`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::gp::log_bounds;
use crate::kernels::{self, KernelSpec};
use crate::linalg::{cho_inverse, cho_solve_mat, cholesky_jittered, log_det};
use crate::optim::{minimize, OptimizerCfg};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-column output maps and unit-box input maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScaling {
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl MultiScaling {
    /// Column centering; with `rescale`, inputs mapped to the unit box and
    /// each output column divided by its range.
    pub fn new(x: &DMatrix<f64>, y: &DMatrix<f64>, rescale: bool) -> MultiScaling {
        let p = x.ncols();
        let d = y.ncols();
        let mut s = MultiScaling {
            input_offset: vec![0.0; p],
            input_scale: vec![1.0; p],
            output_mean: (0..d).map(|l| y.column(l).mean()).collect(),
            output_scale: vec![1.0; d],
        };
        if rescale {
            for k in 0..p {
                let (lo, hi) = (x.column(k).min(), x.column(k).max());
                s.input_offset[k] = lo;
                if hi > lo {
                    s.input_scale[k] = hi - lo;
                }
            }
            for l in 0..d {
                let (lo, hi) = (y.column(l).min(), y.column(l).max());
                if hi > lo {
                    s.output_scale[l] = hi - lo;
                }
            }
        }
        s
    }

    fn rows_to_unit(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let p = x.ncols();
        let mut rows = kernels::row_major(x);
        for r in rows.chunks_mut(p.max(1)) {
            for k in 0..p {
                r[k] = (r[k] - self.input_offset[k]) / self.input_scale[k];
            }
        }
        rows
    }

    fn y_to_unit(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, l| {
            (y[(i, l)] - self.output_mean[l]) / self.output_scale[l]
        })
    }
}

/// Options for [`fit_multi`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgpCfg {
    pub optimizer: OptimizerCfg,
    pub rescale: bool,
    /// Initial input-side noise standard deviation, internal units.
    pub noise: f64,
    pub optimize_noise: bool,
    pub noise_floor: f64,
}

impl Default for MgpCfg {
    fn default() -> Self {
        MgpCfg {
            optimizer: OptimizerCfg::default(),
            rescale: true,
            noise: 1e-3,
            optimize_noise: true,
            noise_floor: 1e-6,
        }
    }
}

/// Fitted multi-output GP (hyperparameters in internal units).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MgpModel {
    pub kernel: KernelSpec,
    pub noise: f64,
    pub b: Vec<f64>,
    pub omega: f64,
    pub jitter: f64,
    pub scaling: MultiScaling,
    dim: usize,
    x_rows: Vec<f64>,
    y: DMatrix<f64>,
    chol: DMatrix<f64>,
    /// `K′⁻¹Y`.
    alpha: DMatrix<f64>,
    pub neg_log_marginal: f64,
}

/// Task covariance `bbᵀ + ω²I`.
pub fn task_covariance(b: &[f64], omega: f64) -> DMatrix<f64> {
    let d = b.len();
    DMatrix::from_fn(d, d, |i, j| b[i] * b[j] + if i == j { omega * omega } else { 0.0 })
}

struct Terms {
    value: f64,
    kinv: Option<DMatrix<f64>>,
    alpha: DMatrix<f64>,
    l: DMatrix<f64>,
    jitter: f64,
}

/// Negative log marginal likelihood on internal data; keeps the pieces
/// needed for the kernel gradient when `keep` is set.
fn nlml_core(
    rows: &[f64],
    p: usize,
    y: &DMatrix<f64>,
    kernel: &KernelSpec,
    sigma: f64,
    b: &[f64],
    omega: f64,
    keep: bool,
) -> Result<Terms> {
    let (n, d) = (y.nrows(), y.ncols());
    let mut k = kernels::gram_rows(kernel, rows, p);
    for i in 0..n {
        k[(i, i)] += sigma * sigma;
    }
    let fac = cholesky_jittered(&k)?;
    let alpha = cho_solve_mat(&fac.l, y);
    let g = y.transpose() * &alpha;
    let om = task_covariance(b, omega);
    let om_fac = cholesky_jittered(&om)?;
    let tr = cho_solve_mat(&om_fac.l, &g).trace();
    let value = 0.5 * (n * d) as f64 * LN_2PI
        + 0.5 * d as f64 * log_det(&fac.l)
        + 0.5 * n as f64 * log_det(&om_fac.l)
        + 0.5 * tr;
    if !value.is_finite() {
        return Err(Error::NonFinite("multi-output likelihood"));
    }
    Ok(Terms {
        value,
        kinv: keep.then(|| cho_inverse(&fac.l)),
        alpha,
        l: fac.l,
        jitter: fac.jitter,
    })
}

/// Negative log marginal likelihood of `vec(Y) ~ N(0, K′ ⊗ Ω)` with
/// `K′ = K + σ²I` and `Ω = bbᵀ + ω²I`, on raw data.
pub fn neg_log_marginal_multi(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    kernel: &KernelSpec,
    sigma: f64,
    b: &[f64],
    omega: f64,
) -> Result<f64> {
    check(x, y)?;
    if b.len() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: y.ncols(),
            found: b.len(),
        });
    }
    kernel.validate(Some(x.ncols()))?;
    Ok(nlml_core(&kernels::row_major(x), x.ncols(), y, kernel, sigma, b, omega, false)?.value)
}

fn check(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: y.nrows(),
        });
    }
    ensure_finite(x.as_slice(), "training inputs")?;
    ensure_finite(y.as_slice(), "training targets")
}

/// Layout of the optimization vector: kernel log-params, [log σ], b, log ω.
struct Layout {
    nk: usize,
    noise: bool,
    d: usize,
}

impl Layout {
    fn b_start(&self) -> usize {
        self.nk + usize::from(self.noise)
    }
    fn omega_idx(&self) -> usize {
        self.b_start() + self.d
    }
}

/// Jointly trains the input kernel, noise and task covariance.
pub fn fit_multi(x: &DMatrix<f64>, y: &DMatrix<f64>, kernel0: &KernelSpec, cfg: &MgpCfg) -> Result<MgpModel> {
    check(x, y)?;
    let (n, d, p) = (y.nrows(), y.ncols(), x.ncols());
    if d < 2 {
        return Err(invalid("Y", "multi-output fit needs at least two columns"));
    }
    if n < 2 {
        return Err(invalid("X", "training needs at least two rows"));
    }
    kernel0.validate(Some(p))?;
    let scaling = MultiScaling::new(x, y, cfg.rescale);
    let rows = scaling.rows_to_unit(x);
    let yu = scaling.y_to_unit(y);
    // a top-level kernel variance trades off exactly against the scale of
    // Ω, so it is pinned to one and Ω carries the output scale
    let mut k0 = kernel0.rescaled(&scaling.input_scale, 1.0);
    let names = k0.param_names();
    if let Some(iv) = names.iter().position(|n| n == "variance") {
        let mut th = k0.params();
        th[iv] = 1.0;
        k0 = k0.with_params(&th)?;
    }
    let free: Vec<usize> = (0..names.len()).filter(|&k| names[k] != "variance").collect();
    let theta0 = k0.params();

    // task covariance initialized from the leading eigenpair of the sample
    // covariance of the columns
    let cov = yu.transpose() * &yu / n as f64;
    let eig = cov.clone().symmetric_eigen();
    let top = eig.eigenvalues.imax();
    let lam = eig.eigenvalues[top].max(1e-6);
    let v = eig.eigenvectors.column(top);
    let b0: Vec<f64> = v.iter().map(|e| e * lam.sqrt()).collect();
    let rest = (cov.trace() - lam).max(0.0) / (d - 1) as f64;
    let omega0 = rest.sqrt().max(1e-2 * lam.sqrt());

    let lay = Layout {
        nk: free.len(),
        noise: cfg.optimize_noise,
        d,
    };
    let all_bounds = log_bounds(&k0);
    let mut bounds: Vec<(f64, f64)> = free.iter().map(|&k| all_bounds[k]).collect();
    let mut x0: Vec<f64> = free.iter().map(|&k| theta0[k].ln()).collect();
    for (v, (lo, hi)) in x0.iter_mut().zip(&bounds) {
        *v = v.clamp(*lo, *hi);
    }
    let floor = cfg.noise_floor.max(1e-12);
    if cfg.optimize_noise {
        x0.push(cfg.noise.max(floor).ln());
        bounds.push((floor.ln(), 10f64.ln()));
    }
    x0.extend(&b0);
    bounds.extend(std::iter::repeat_n((-1e3, 1e3), d));
    x0.push(omega0.ln());
    bounds.push((1e-4f64.ln(), 1e3f64.ln()));

    let unpack = |t: &[f64]| -> Result<(KernelSpec, f64, Vec<f64>, f64)> {
        let mut th = theta0.clone();
        for (&k, v) in free.iter().zip(&t[..lay.nk]) {
            th[k] = v.exp();
        }
        let kernel = k0.with_params(&th)?;
        let sigma = if lay.noise { t[lay.nk].exp() } else { cfg.noise };
        let b = t[lay.b_start()..lay.b_start() + d].to_vec();
        Ok((kernel, sigma, b, t[lay.omega_idx()].exp()))
    };

    let objective = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (kernel, sigma, b, omega) = unpack(t)?;
        let terms = nlml_core(&rows, p, &yu, &kernel, sigma, &b, omega, true)?;
        let mut grad = vec![0.0; t.len()];
        // kernel side: ½ tr[(d K′⁻¹ − A) ∂K′], A = αΩ⁻¹αᵀ
        let om = task_covariance(&b, omega);
        let om_inv = om.try_inverse().ok_or(Error::NotPositiveSemidefinite)?;
        let a = &terms.alpha * om_inv * terms.alpha.transpose();
        let w = terms.kinv.expect("kept") * d as f64 - a;
        let hyper = kernels::hyper_grad_rows(&kernel, &rows, p);
        let th = kernel.params();
        for (slot, &k) in free.iter().enumerate() {
            grad[slot] = 0.5 * w.component_mul(&hyper.matrices[k]).sum() * th[k];
        }
        if lay.noise {
            grad[lay.nk] = sigma * sigma * w.trace();
        }
        // task side by central differences; G = YᵀK′⁻¹Y is fixed here
        let g = yu.transpose() * &terms.alpha;
        let task_nll = |b: &[f64], omega: f64| -> f64 {
            let om = task_covariance(b, omega);
            match om.cholesky() {
                Some(c) => {
                    let l = c.l();
                    0.5 * n as f64 * log_det(&l) + 0.5 * cho_solve_mat(&l, &g).trace()
                }
                None => f64::INFINITY,
            }
        };
        for l in 0..d {
            let h = 1e-6 * b[l].abs().max(1e-3);
            let mut up = b.clone();
            let mut dn = b.clone();
            up[l] += h;
            dn[l] -= h;
            grad[lay.b_start() + l] = (task_nll(&up, omega) - task_nll(&dn, omega)) / (2.0 * h);
        }
        let h = 1e-6;
        let lo = t[lay.omega_idx()];
        grad[lay.omega_idx()] = (task_nll(&b, (lo + h).exp()) - task_nll(&b, (lo - h).exp())) / (2.0 * h);
        Ok((terms.value, grad))
    };

    let best = minimize(objective, &x0, &bounds, &cfg.optimizer)?;
    let (kernel, sigma, b, omega) = unpack(&best.x)?;
    MgpModel::from_internal(kernel, sigma, b, omega, scaling, p, rows, yu)
}

/// Multi-output predictive moments in original units.
#[derive(Debug, Clone)]
pub struct MultiPrediction {
    /// `M̂`, `m×d`.
    pub mean: DMatrix<f64>,
    /// `Σ̂`, `m×m` input-side covariance (dimensionless).
    pub sigma: DMatrix<f64>,
    /// Task covariance in original output units.
    pub omega: DMatrix<f64>,
}

impl MgpModel {
    #[allow(clippy::too_many_arguments)]
    fn from_internal(
        kernel: KernelSpec,
        noise: f64,
        b: Vec<f64>,
        omega: f64,
        scaling: MultiScaling,
        dim: usize,
        x_rows: Vec<f64>,
        y: DMatrix<f64>,
    ) -> Result<MgpModel> {
        let t = nlml_core(&x_rows, dim, &y, &kernel, noise, &b, omega, false)?;
        Ok(MgpModel {
            kernel,
            noise,
            b,
            omega,
            jitter: t.jitter,
            scaling,
            dim,
            x_rows,
            y,
            chol: t.l,
            alpha: t.alpha,
            neg_log_marginal: t.value,
        })
    }

    /// Posterior for fixed hyperparameters. `kernel`, `noise`, `b` and
    /// `omega` are in the internal units of the chosen scaling.
    pub fn condition(
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        kernel: &KernelSpec,
        noise: f64,
        b: &[f64],
        omega: f64,
        rescale: bool,
    ) -> Result<MgpModel> {
        check(x, y)?;
        if b.len() != y.ncols() {
            return Err(Error::DimensionMismatch {
                expected: y.ncols(),
                found: b.len(),
            });
        }
        let scaling = MultiScaling::new(x, y, rescale);
        let rows = scaling.rows_to_unit(x);
        let yu = scaling.y_to_unit(y);
        Self::from_internal(kernel.clone(), noise, b.to_vec(), omega, scaling, x.ncols(), rows, yu)
    }

    pub fn outputs(&self) -> usize {
        self.y.ncols()
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Internal-unit task covariance `bbᵀ + ω²I`.
    pub fn task_covariance(&self) -> DMatrix<f64> {
        task_covariance(&self.b, self.omega)
    }

    /// Task covariance in original output units.
    pub fn task_covariance_external(&self) -> DMatrix<f64> {
        let om = self.task_covariance();
        let s = &self.scaling.output_scale;
        DMatrix::from_fn(om.nrows(), om.ncols(), |i, j| om[(i, j)] * s[i] * s[j])
    }

    pub fn predict_multi(&self, xs: &DMatrix<f64>) -> Result<MultiPrediction> {
        if xs.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: xs.ncols(),
            });
        }
        ensure_finite(xs.as_slice(), "test input")?;
        let zs = self.scaling.rows_to_unit(xs);
        let kst = kernels::cross_rows(&self.kernel, &self.x_rows, &zs, self.dim); // n×m
        let mu = kst.transpose() * &self.alpha;
        let mean = DMatrix::from_fn(mu.nrows(), mu.ncols(), |i, l| {
            mu[(i, l)] * self.scaling.output_scale[l] + self.scaling.output_mean[l]
        });
        let v = self
            .chol
            .solve_lower_triangular(&kst)
            .expect("Cholesky factor has a positive diagonal");
        let kss = kernels::gram_rows(&self.kernel, &zs, self.dim);
        let mut sigma = kss - v.transpose() * &v;
        let m = sigma.nrows();
        for i in 0..m {
            sigma[(i, i)] = sigma[(i, i)].max(0.0);
            for j in 0..i {
                let s = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
                sigma[(i, j)] = s;
                sigma[(j, i)] = s;
            }
        }
        Ok(MultiPrediction {
            mean,
            sigma,
            omega: self.task_covariance_external(),
        })
    }

    /// Posterior of the weighted sum `π = Σ_l w_l f_l`: mean `M̂w` and
    /// covariance `(wᵀΩw) Σ̂`.
    pub fn portfolio_posterior(&self, w: &[f64], xs: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if w.len() != self.outputs() {
            return Err(Error::DimensionMismatch {
                expected: self.outputs(),
                found: w.len(),
            });
        }
        ensure_finite(w, "portfolio weights")?;
        let pred = self.predict_multi(xs)?;
        let wv = DVector::from_column_slice(w);
        let mean = &pred.mean * &wv;
        let scale = (wv.transpose() * &pred.omega * &wv)[0];
        Ok((mean, pred.sigma * scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::GpModel;
    use proptest::prelude::*;

    fn data(n: usize, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let y = DMatrix::from_fn(n, d, |i, l| ((l + 1) as f64 * 2.0 * x[(i, 0)]).sin() + 0.1 * l as f64);
        (x, y)
    }

    fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, d) = (a.nrows(), b.nrows());
        let (m, e) = (a.ncols(), b.ncols());
        DMatrix::from_fn(n * d, m * e, |r, c| a[(r / d, c / e)] * b[(r % d, c % e)])
    }

    fn vec_rows(y: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_column_slice(y.transpose().as_slice())
    }

    #[test]
    fn scalar_likelihood() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let y = DMatrix::from_element(1, 1, 0.0);
        let v = neg_log_marginal_multi(&x, &y, &KernelSpec::se(1.0), 0.0, &[0.0], 1.0).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-9);
    }

    #[test]
    fn likelihood_matches_dense_kronecker() {
        let (x, y) = data(5, 3);
        let k = KernelSpec::se(0.4).with_variance(1.3);
        let (sigma, b, omega) = (0.1, [0.7, -0.4, 0.2], 0.3);
        let v = neg_log_marginal_multi(&x, &y, &k, sigma, &b, omega).unwrap();
        let mut kp = kernels::gram(&k, &x).unwrap();
        for i in 0..5 {
            kp[(i, i)] += sigma * sigma;
        }
        let jitter = crate::linalg::BASE_JITTER * kp.diagonal().mean();
        for i in 0..5 {
            kp[(i, i)] += jitter;
        }
        let mut om = task_covariance(&b, omega);
        let oj = crate::linalg::BASE_JITTER * om.diagonal().mean();
        for i in 0..3 {
            om[(i, i)] += oj;
        }
        let c = kron(&kp, &om);
        let yv = vec_rows(&y);
        let dense = 0.5 * 15.0 * LN_2PI
            + 0.5 * c.determinant().ln()
            + 0.5 * (yv.transpose() * c.try_inverse().unwrap() * &yv)[0];
        assert!((v - dense).abs() <= 1e-8 * dense.abs(), "{v} vs {dense}");
    }

    #[test]
    fn likelihood_invariant_under_relabeling() {
        let (x, y) = data(6, 3);
        let k = KernelSpec::matern(2.5, 0.5);
        let b = [0.5, 0.1, -0.3];
        let a = neg_log_marginal_multi(&x, &y, &k, 0.05, &b, 0.2).unwrap();
        let perm = [2usize, 0, 1];
        let yp = DMatrix::from_fn(6, 3, |i, l| y[(i, perm[l])]);
        let bp: Vec<f64> = perm.iter().map(|&l| b[l]).collect();
        let c = neg_log_marginal_multi(&x, &yp, &k, 0.05, &bp, 0.2).unwrap();
        assert!((a - c).abs() < 1e-10);
    }

    #[test]
    fn prediction_matches_dense_vectorized_gp() {
        let (x, y) = data(5, 3);
        let k = KernelSpec::se(0.35);
        let (sigma, b, omega) = (0.05, [0.8, 0.3, -0.5], 0.4);
        let m = MgpModel::condition(&x, &y, &k, sigma, &b, omega, false).unwrap();
        let xs = DMatrix::from_column_slice(2, 1, &[0.15, 0.8]);
        let pred = m.predict_multi(&xs).unwrap();

        // dense oracle on the centered targets
        let yc = DMatrix::from_fn(5, 3, |i, l| y[(i, l)] - m.scaling.output_mean[l]);
        let om = task_covariance(&b, omega);
        let mut kp = kernels::gram(&k, &x).unwrap();
        for i in 0..5 {
            kp[(i, i)] += sigma * sigma + m.jitter;
        }
        let big = kron(&kp, &om);
        let inv = big.try_inverse().unwrap();
        let cross = kron(&kernels::kernel_matrix(&k, &xs, &x).unwrap(), &om);
        let mean = &cross * &inv * vec_rows(&yc);
        let cov = kron(&kernels::gram(&k, &xs).unwrap(), &om) - &cross * &inv * cross.transpose();
        for i in 0..2 {
            for l in 0..3 {
                assert!((pred.mean[(i, l)] - m.scaling.output_mean[l] - mean[i * 3 + l]).abs() < 1e-8);
            }
        }
        let sep = kron(&pred.sigma, &pred.omega);
        assert!((sep - cov).amax() < 1e-8);
    }

    #[test]
    fn single_output_reduces_to_gp() {
        let (x, y) = data(8, 1);
        let (b, omega) = (0.6, 0.8);
        let om = b * b + omega * omega;
        let m = MgpModel::condition(&x, &y, &KernelSpec::se(0.3), 0.1, &[b], omega, false).unwrap();
        let g = GpModel::condition(
            &x,
            y.as_slice(),
            &KernelSpec::se(0.3).with_variance(om),
            0.1 * om.sqrt(),
            false,
        )
        .unwrap();
        let xs = DMatrix::from_column_slice(3, 1, &[0.05, 0.5, 0.93]);
        let (mp, gp) = (m.predict_multi(&xs).unwrap(), g.predict(&xs).unwrap());
        for i in 0..3 {
            assert!((mp.mean[(i, 0)] - gp.mean[i]).abs() < 1e-10);
            assert!((mp.sigma[(i, i)] * mp.omega[(0, 0)] - gp.variance[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn interpolates_training_rows() {
        let (x, y) = data(6, 2);
        let m = MgpModel::condition(&x, &y, &KernelSpec::se(0.3), 0.0, &[0.5, 0.5], 0.5, true).unwrap();
        let p = m.predict_multi(&x).unwrap();
        assert!((p.mean - y).amax() < 1e-6);
        assert!((p.sigma.clone() - p.sigma.transpose()).amax() < 1e-10);
        assert!(p.sigma.diagonal().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn identical_columns_give_rank_one_task_covariance() {
        let x = DMatrix::from_fn(20, 1, |i, _| i as f64 / 19.0);
        let y = DMatrix::from_fn(20, 2, |i, _| (4.0 * x[(i, 0)]).sin());
        let m = fit_multi(&x, &y, &KernelSpec::se(0.3), &MgpCfg::default()).unwrap();
        let om = m.task_covariance();
        assert!(om[(0, 1)] / om[(0, 0)].max(om[(1, 1)]) >= 0.9, "{om}");
    }

    #[test]
    fn independent_columns_give_weak_task_correlation() {
        let n = 200;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let z0 = crate::paths::normal_stream(8, 0, 0, n);
        let z1 = crate::paths::normal_stream(8, 0, 1, n);
        let y = DMatrix::from_fn(n, 2, |i, l| if l == 0 { z0[i] } else { z1[i] });
        let cfg = MgpCfg {
            optimizer: OptimizerCfg {
                restarts: 2,
                ..OptimizerCfg::default()
            },
            ..MgpCfg::default()
        };
        let m = fit_multi(&x, &y, &KernelSpec::se(0.3), &cfg).unwrap();
        let om = m.task_covariance();
        let rho = om[(0, 1)] / (om[(0, 0)] * om[(1, 1)]).sqrt();
        let c = y.column(0).map(|v| v - y.column(0).mean());
        let d = y.column(1).map(|v| v - y.column(1).mean());
        let sample = c.dot(&d) / (c.norm() * d.norm());
        assert!(rho.abs() <= 0.1, "{om}");
        assert!((rho - sample).abs() < 0.03, "{rho} vs {sample}");
    }

    #[test]
    fn portfolio_weights() {
        let (x, y) = data(6, 2);
        let m = MgpModel::condition(&x, &y, &KernelSpec::se(0.3), 0.01, &[0.7, -0.2], 0.3, true).unwrap();
        let xs = DMatrix::from_column_slice(4, 1, &[0.1, 0.33, 0.6, 0.9]);
        let pred = m.predict_multi(&xs).unwrap();
        let (mean, cov) = m.portfolio_posterior(&[0.0, 1.0], &xs).unwrap();
        assert!((mean - pred.mean.column(1)).amax() < 1e-12);
        assert!((cov - &pred.sigma * pred.omega[(1, 1)]).amax() < 1e-12);

        // perfectly correlated tasks with equal scale hedge out
        let yy = DMatrix::from_fn(6, 2, |i, _| y[(i, 0)]);
        let m = MgpModel::condition(&x, &yy, &KernelSpec::se(0.3), 0.01, &[0.8, 0.8], 1e-4, true).unwrap();
        let (_, cov) = m.portfolio_posterior(&[1.0, -1.0], &xs).unwrap();
        assert!(cov.amax() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn portfolio_mean_is_linear_and_cov_psd(
            w1 in proptest::collection::vec(-3.0f64..3.0, 3),
            w2 in proptest::collection::vec(-3.0f64..3.0, 3),
            c in -2.0f64..2.0,
        ) {
            let (x, y) = data(7, 3);
            let m = MgpModel::condition(&x, &y, &KernelSpec::se(0.3), 0.02, &[0.5, 0.2, -0.4], 0.3, true).unwrap();
            let xs = DMatrix::from_column_slice(3, 1, &[0.2, 0.45, 0.7]);
            let w: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + c * b).collect();
            let (m1, _) = m.portfolio_posterior(&w1, &xs).unwrap();
            let (m2, _) = m.portfolio_posterior(&w2, &xs).unwrap();
            let (mw, cov) = m.portfolio_posterior(&w, &xs).unwrap();
            let lin = m1 + m2 * c;
            prop_assert!((mw - lin).amax() < 1e-9);
            let eig = cov.symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-10 * cov.amax().max(1.0));
        }
    }
}
