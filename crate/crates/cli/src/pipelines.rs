//! Pipeline implementations. Each one fills an [`Output`] with named
//! tables; nothing touches the filesystem until the run has succeeded.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use gpxva::credit::{sample_gamma1_prior, IntensityModel};
use gpxva::gp::FitCfg;
use gpxva::paths::{simulate_gbm, simulate_hw_fx, sub_seed, PathSet, TimeGrid};
use gpxva::pricers::{bs_price, heston_price_cos, CosCfg, OptionSide};
use gpxva::xva::{
    cva0_independent, cva0_intensity, cva1_distribution, cva_var, epe_profile, exposure_cube, ks_statistic,
    path_intensities, quantile, train_grid_mgp_valuer, train_grid_valuer, train_path_valuer, write_epe, CvaReport,
    Discount, ExactValuer, ExposureCube, Instrument, Market, Portfolio, SurrogateCfg, UqReport, Valuer,
};
use gpxva::{fit, MgpCfg, OptimizerCfg};
use nalgebra::DMatrix;

use crate::config::{Config, Counts, Design, Invalid, Pipeline, SurrogateKind};

/// Sub-seed tags under the root seed.
pub mod tags {
    pub const VALUATION_PATHS: u64 = 1;
    pub const TRAINING_PATHS: u64 = 2;
    pub const OUTER_PATHS: u64 = 3;
    /// Followed by the outer path index.
    pub const INNER_PATHS: u64 = 4;
    pub const PRIOR: u64 = 5;
    pub const OPTIMIZER: u64 = 6;
}

#[derive(Debug)]
pub enum Failure {
    Invalid(Invalid),
    Numeric(gpxva::Error),
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Failure::Invalid(e)
    }
}

impl From<gpxva::Error> for Failure {
    fn from(e: gpxva::Error) -> Self {
        match e {
            gpxva::Error::InvalidParameter { name, reason } => Failure::Invalid(Invalid {
                field: name.into(),
                reason,
            }),
            e => Failure::Numeric(e),
        }
    }
}

fn invalid(field: &str, reason: &str) -> Failure {
    Failure::Invalid(Invalid {
        field: field.into(),
        reason: reason.into(),
    })
}

/// Named report tables in write order.
#[derive(Debug, Default)]
pub struct Output {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Output {
    fn put(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    fn put_with<F>(&mut self, name: &str, f: F)
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf).expect("writing to memory");
        self.put(name, buf);
    }
}

pub struct Ctx<'a> {
    pub cfg: &'a Config,
    pub counts: Counts,
    pub dump_paths: bool,
}

pub fn run(ctx: &Ctx) -> Result<Output, Failure> {
    let mut out = Output::default();
    match ctx.cfg.pipeline {
        Pipeline::FitGp => fit_gp(ctx, &mut out)?,
        Pipeline::PriceSurface => price_surface(ctx, &mut out)?,
        Pipeline::Greeks => greeks(ctx, &mut out)?,
        Pipeline::Epe => exposure(ctx, &mut out, false)?,
        Pipeline::Cva0 | Pipeline::IrsPortfolio => exposure(ctx, &mut out, true)?,
        Pipeline::Cva1Var => cva1(ctx, &mut out)?,
        Pipeline::Uq => uq(ctx, &mut out)?,
    }
    Ok(out)
}

fn seed(ctx: &Ctx, tags: &[u64]) -> u64 {
    sub_seed(ctx.cfg.seed, tags)
}

fn fit_cfg(ctx: &Ctx) -> FitCfg {
    FitCfg {
        optimizer: OptimizerCfg {
            seed: seed(ctx, &[tags::OPTIMIZER]),
            ..ctx.cfg.gp.optimizer.clone()
        },
        rescale: ctx.cfg.gp.rescale,
        ..FitCfg::default()
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

fn bs_market(p: &Portfolio) -> Result<(f64, f64), Failure> {
    match p.market {
        Market::BlackScholes { r, vol } => Ok((r, vol)),
        Market::RatesFx(_) => Err(invalid("market.type", "this pipeline needs a black_scholes market")),
    }
}

fn options(p: &Portfolio) -> Result<Vec<(usize, OptionSide, f64, f64)>, Failure> {
    p.positions
        .iter()
        .enumerate()
        .map(|(k, pos)| match pos.instrument {
            Instrument::Option { side, strike, maturity } => Ok((k, side, strike, maturity)),
            Instrument::Swap(_) => Err(invalid("positions", "this pipeline needs option positions")),
        })
        .collect()
}

/// Test grid strictly inside the training range.
fn test_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo, hi, n + 2)[1..=n].to_vec()
}

fn fit_gp(ctx: &Ctx, out: &mut Output) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let p = cfg.portfolio()?;
    let gp = &cfg.gp;
    let train = linspace(gp.lo, gp.hi, ctx.counts.points);
    let test = test_grid(gp.lo, gp.hi, ctx.counts.test_points);
    let mut hyper = String::from("position,parameter,value\n");
    let mut table = String::from("position,spot,exact,gp_mean,gp_sd\n");
    for k in 0..p.positions.len() {
        let y = train
            .iter()
            .map(|s| p.position_value(k, 0.0, &[*s]))
            .collect::<gpxva::Result<Vec<_>>>()?;
        let m = fit(&column(&train), &y, &gp.kernel, gp.noise, &fit_cfg(ctx))?;
        let kernel = m.kernel_external();
        for (name, v) in kernel.param_names().iter().zip(kernel.params()) {
            writeln!(hyper, "{k},{name},{v}").unwrap();
        }
        writeln!(hyper, "{k},noise,{}", m.noise_external()).unwrap();
        writeln!(hyper, "{k},log_evidence,{}", m.log_evidence).unwrap();
        let pred = m.predict(&column(&test))?;
        for (i, s) in test.iter().enumerate() {
            let exact = p.position_value(k, 0.0, &[*s])?;
            writeln!(table, "{k},{s},{exact},{},{}", pred.mean[i], pred.variance[i].sqrt()).unwrap();
        }
        out.put(
            &format!("gp_model_{k}.json"),
            serde_json::to_vec_pretty(&m).expect("model serializes"),
        );
    }
    out.put("hyperparameters.csv", hyper.into_bytes());
    out.put("fit.csv", table.into_bytes());
    Ok(())
}

fn price_surface(ctx: &Ctx, out: &mut Output) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let gp = &cfg.gp;
    let train = linspace(gp.lo, gp.hi, ctx.counts.points);
    let test = test_grid(gp.lo, gp.hi, ctx.counts.test_points);
    let mut table = String::new();
    if let Some(h) = &cfg.heston {
        table.push_str("maturity,spot,exact,gp_mean,gp_sd\n");
        let cos = CosCfg::default();
        for &t in &cfg.surface.times {
            if t <= 0.0 {
                return Err(invalid("surface.times", "Heston maturities must be > 0"));
            }
            let price = |s: f64| {
                let q = gpxva::pricers::HestonParams {
                    s0: s,
                    maturity: t,
                    ..*h
                };
                heston_price_cos(&q, OptionSide::Call, &cos)
            };
            let y = train.iter().map(|s| price(*s)).collect::<gpxva::Result<Vec<_>>>()?;
            let m = fit(&column(&train), &y, &gp.kernel, gp.noise, &fit_cfg(ctx))?;
            let pred = m.predict(&column(&test))?;
            for (i, s) in test.iter().enumerate() {
                writeln!(
                    table,
                    "{t},{s},{},{},{}",
                    price(*s)?,
                    pred.mean[i],
                    pred.variance[i].sqrt()
                )
                .unwrap();
            }
        }
    } else {
        table.push_str("time,spot,exact,gp_mean,gp_sd\n");
        let p = cfg.portfolio()?;
        let times = cfg.surface.times.clone();
        let valuer = train_grid_valuer(&p, &times, gp.lo, gp.hi, ctx.counts.points, &surrogate_cfg(ctx))?;
        let exact = ExactValuer::new(p.clone(), times.clone())?;
        let n = p.positions.len();
        for (i, t) in times.iter().enumerate() {
            for s in &test {
                let state = vec![*s; n];
                let g = valuer.value(i, &state, true)?;
                let e = exact.value(i, &state, false)?;
                writeln!(table, "{t},{s},{},{},{}", e.value, g.value, g.variance.sqrt()).unwrap();
            }
        }
    }
    out.put("price_surface.csv", table.into_bytes());
    Ok(())
}

fn greeks(ctx: &Ctx, out: &mut Output) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let p = cfg.portfolio()?;
    let (r, vol) = bs_market(&p)?;
    let spot = cfg.simulation.spot;
    let n = ctx.counts.points;
    let mut table = String::from("position,greek,x,gp,exact,error\n");
    let central = |lo: f64, hi: f64| {
        let w = hi - lo;
        linspace(lo + 0.1 * w, hi - 0.1 * w, ctx.counts.test_points)
    };
    for (k, side, strike, maturity) in options(&p)? {
        let quote = |s: f64, v: f64| bs_price(side, s, strike, r, maturity, v);
        let (lo, hi) = (cfg.gp.lo, cfg.gp.hi);
        let xs = linspace(lo, hi, n);
        let y = xs
            .iter()
            .map(|s| Ok(quote(*s, vol)?.price))
            .collect::<gpxva::Result<Vec<_>>>()?;
        let m = fit(&column(&xs), &y, &cfg.gp.kernel, cfg.gp.noise, &fit_cfg(ctx))?;
        let probe = central(lo, hi);
        let g = m.predict_gradient(&column(&probe))?;
        for (i, s) in probe.iter().enumerate() {
            let exact = quote(*s, vol)?.delta;
            let v = g.gradient[(i, 0)];
            writeln!(table, "{k},delta,{s},{v},{exact},{}", v - exact).unwrap();
        }
        let (lo, hi) = (cfg.surface.vol_lo, cfg.surface.vol_hi);
        let vs = linspace(lo, hi, n);
        let y = vs
            .iter()
            .map(|v| Ok(quote(spot, *v)?.price))
            .collect::<gpxva::Result<Vec<_>>>()?;
        let kernel = gpxva::KernelSpec::se(0.25 * (hi - lo));
        let m = fit(&column(&vs), &y, &kernel, cfg.gp.noise, &fit_cfg(ctx))?;
        let probe = central(lo, hi);
        let g = m.predict_gradient(&column(&probe))?;
        for (i, v) in probe.iter().enumerate() {
            let exact = quote(spot, *v)?.vega;
            let gv = g.gradient[(i, 0)];
            writeln!(table, "{k},vega,{v},{gv},{exact},{}", gv - exact).unwrap();
        }
    }
    out.put("greeks.csv", table.into_bytes());
    Ok(())
}

fn surrogate_cfg(ctx: &Ctx) -> SurrogateCfg {
    SurrogateCfg {
        kernel: ctx.cfg.gp.kernel.clone(),
        noise: ctx.cfg.gp.noise,
        fit: fit_cfg(ctx),
        warm_iterations: ctx.counts.warm_iterations,
        fit_subsample: ctx.counts.fit_subsample,
    }
}

struct Setup {
    portfolio: Portfolio,
    grid: TimeGrid,
    surrogate: Box<dyn Valuer>,
    exact: ExactValuer,
    discount: Discount,
}

fn simulate(ctx: &Ctx, p: &Portfolio, grid: &TimeGrid, n: usize, seed: u64) -> gpxva::Result<PathSet> {
    match &p.market {
        Market::BlackScholes { r, vol } => simulate_gbm(ctx.cfg.simulation.spot, *r, *vol, grid, n, seed),
        Market::RatesFx(m) => simulate_hw_fx(m, grid, n, seed),
    }
}

fn setup(ctx: &Ctx) -> Result<Setup, Failure> {
    let cfg = ctx.cfg;
    let portfolio = cfg.portfolio()?;
    let horizon = cfg.simulation.horizon.unwrap_or_else(|| portfolio.horizon());
    let grid = TimeGrid::new(horizon, ctx.counts.steps, ctx.counts.substeps)?;
    let times = grid.times();
    let gp = &cfg.gp;
    let surrogate: Box<dyn Valuer> = match (gp.valuer, gp.design) {
        (SurrogateKind::Gp, Design::Grid) => Box::new(train_grid_valuer(
            &portfolio,
            &times,
            gp.lo,
            gp.hi,
            ctx.counts.points,
            &surrogate_cfg(ctx),
        )?),
        (SurrogateKind::Gp, Design::Paths) => {
            let training = simulate(
                ctx,
                &portfolio,
                &grid,
                ctx.counts.training_paths,
                seed(ctx, &[tags::TRAINING_PATHS]),
            )?;
            Box::new(train_path_valuer(&portfolio, &training, &surrogate_cfg(ctx))?)
        }
        (SurrogateKind::Mgp, _) => {
            let mcfg = MgpCfg {
                optimizer: fit_cfg(ctx).optimizer,
                rescale: gp.rescale,
                ..MgpCfg::default()
            };
            Box::new(train_grid_mgp_valuer(
                &portfolio,
                &times,
                gp.lo,
                gp.hi,
                ctx.counts.points,
                &gp.kernel,
                &mcfg,
            )?)
        }
    };
    let exact = ExactValuer::new(portfolio.clone(), times)?;
    let discount = match &portfolio.market {
        Market::BlackScholes { r, .. } => Discount::Flat { rate: *r },
        Market::RatesFx(_) => Discount::Factor { name: "int_r0".into() },
    };
    Ok(Setup {
        portfolio,
        grid,
        surrogate,
        exact,
        discount,
    })
}

fn intensity(ctx: &Ctx) -> IntensityModel {
    let c = &ctx.cfg.credit;
    IntensityModel {
        gamma0: c.gamma0,
        gamma1: c.gamma1,
        s_ref: c.s_ref.unwrap_or(ctx.cfg.simulation.spot),
        recovery: c.recovery,
    }
}

/// CVA₀ with a flat hazard when one is configured, otherwise with the
/// spot-driven intensity.
fn cva0(ctx: &Ctx, cube: &ExposureCube, paths: &PathSet) -> Result<CvaReport, Failure> {
    let c = &ctx.cfg.credit;
    if let Some(h) = c.hazard {
        let t = &cube.times;
        let dp: Vec<f64> = (1..t.len())
            .map(|i| (-h * t[i - 1]).exp() - (-h * t[i]).exp())
            .collect();
        return Ok(cva0_independent(cube, &dp, c.recovery)?);
    }
    let f = paths
        .factor("S")
        .map_err(|_| invalid("credit.hazard", "without a spot factor a flat hazard is required"))?;
    let gammas = path_intensities(&intensity(ctx), paths, f)?;
    Ok(cva0_intensity(cube, &gammas, c.recovery)?)
}

fn dump_cube(out: &mut Output, name: &str, cube: &ExposureCube) {
    let mut s = String::from("date,path,value,discount,sd\n");
    for i in 0..cube.n_dates() {
        for j in 0..cube.n_paths {
            writeln!(
                s,
                "{i},{j},{},{},{}",
                cube.value(i, j),
                cube.discount(i, j),
                cube.std_dev(i, j)
            )
            .unwrap();
        }
    }
    out.put(name, s.into_bytes());
}

fn exposure(ctx: &Ctx, out: &mut Output, with_cva: bool) -> Result<(), Failure> {
    let s = setup(ctx)?;
    let paths = simulate(
        ctx,
        &s.portfolio,
        &s.grid,
        ctx.counts.paths,
        seed(ctx, &[tags::VALUATION_PATHS]),
    )?;
    let gp = exposure_cube(s.surrogate.as_ref(), &s.portfolio, &paths, 0.0, &s.discount, true)?;
    let ex = exposure_cube(&s.exact, &s.portfolio, &paths, 0.0, &s.discount, false)?;
    if ctx.dump_paths {
        out.put_with("paths.csv", |w| paths.write_csv(w));
        dump_cube(out, "exposure_gp.csv", &gp);
        dump_cube(out, "exposure_reval.csv", &ex);
    }
    if !with_cva {
        out.put_with("epe_gp.csv", |w| write_epe(&epe_profile(&gp), w));
        out.put_with("epe_reval.csv", |w| write_epe(&epe_profile(&ex), w));
        return Ok(());
    }
    let rg = cva0(ctx, &gp, &paths)?;
    let re = cva0(ctx, &ex, &paths)?;
    out.put_with("cva_gp.csv", |w| rg.write_metrics(w));
    out.put_with("cva_reval.csv", |w| re.write_metrics(w));
    out.put_with("epe_gp.csv", |w| rg.write_epe(w));
    out.put_with("epe_reval.csv", |w| re.write_epe(w));
    let mut cmp = String::from("metric,value\n");
    writeln!(cmp, "gap,{}", rg.cva - re.cva).unwrap();
    writeln!(cmp, "gap_relative,{}", (rg.cva - re.cva) / re.cva).unwrap();
    writeln!(cmp, "gap_in_std_errors,{}", (rg.cva - re.cva) / re.std_error).unwrap();
    writeln!(cmp, "gp_inside_reval_ci,{}", rg.cva >= re.ci_lo && rg.cva <= re.ci_hi).unwrap();
    out.put("comparison.csv", cmp.into_bytes());
    Ok(())
}

fn cva1(ctx: &Ctx, out: &mut Output) -> Result<(), Failure> {
    let s = setup(ctx)?;
    bs_market(&s.portfolio)?;
    let c = ctx.cfg;
    let dt = s.grid.dt();
    let offset = (c.nested.horizon / dt).round() as usize;
    if ((offset as f64) * dt - c.nested.horizon).abs() > 1e-9 || offset == 0 || offset >= s.grid.steps {
        return Err(invalid(
            "nested.horizon",
            "must be a stored date strictly inside the simulation horizon",
        ));
    }
    let (r, vol) = bs_market(&s.portfolio)?;
    let outer = simulate(
        ctx,
        &s.portfolio,
        &s.grid,
        ctx.counts.outer,
        seed(ctx, &[tags::OUTER_PATHS]),
    )?;
    let inner_grid = TimeGrid::new(
        s.grid.horizon - c.nested.horizon,
        s.grid.steps - offset,
        s.grid.substeps,
    )?;
    let inner = |j: usize| {
        let s1 = outer.value(0, j, offset);
        simulate_gbm(
            s1,
            r,
            vol,
            &inner_grid,
            ctx.counts.inner,
            seed(ctx, &[tags::INNER_PATHS, j as u64]),
        )
    };
    let model = intensity(ctx);
    let run = |v: &dyn Valuer| {
        cva1_distribution(
            v,
            &s.portfolio,
            offset,
            c.nested.horizon,
            ctx.counts.outer,
            inner,
            &s.discount,
            &model,
            "S",
            c.credit.recovery,
        )
    };
    let gp1 = run(s.surrogate.as_ref())?;
    let ex1 = run(&s.exact)?;
    let paths = simulate(
        ctx,
        &s.portfolio,
        &s.grid,
        ctx.counts.paths,
        seed(ctx, &[tags::VALUATION_PATHS]),
    )?;
    let gp0 = cva0(
        ctx,
        &exposure_cube(s.surrogate.as_ref(), &s.portfolio, &paths, 0.0, &s.discount, false)?,
        &paths,
    )?;
    let ex0 = cva0(
        ctx,
        &exposure_cube(&s.exact, &s.portfolio, &paths, 0.0, &s.discount, false)?,
        &paths,
    )?;
    let alpha = c.nested.alpha;
    let mut table = String::from("outer,cva1_gp,cva1_reval\n");
    for (j, (a, b)) in gp1.iter().zip(&ex1).enumerate() {
        writeln!(table, "{j},{a},{b}").unwrap();
    }
    out.put("cva1.csv", table.into_bytes());
    let mut m = String::from("metric,value\n");
    writeln!(m, "cva0_gp,{}", gp0.cva).unwrap();
    writeln!(m, "cva0_reval,{}", ex0.cva).unwrap();
    writeln!(m, "alpha,{alpha}").unwrap();
    writeln!(m, "var_gp,{}", cva_var(&gp1, gp0.cva, alpha)?).unwrap();
    writeln!(m, "var_reval,{}", cva_var(&ex1, ex0.cva, alpha)?).unwrap();
    writeln!(m, "ks,{}", ks_statistic(&gp1, &ex1)?).unwrap();
    out.put("cva_var.csv", m.into_bytes());
    Ok(())
}

fn uq(ctx: &Ctx, out: &mut Output) -> Result<(), Failure> {
    let s = setup(ctx)?;
    bs_market(&s.portfolio)?;
    let c = &ctx.cfg.credit;
    let paths = simulate(
        ctx,
        &s.portfolio,
        &s.grid,
        ctx.counts.paths,
        seed(ctx, &[tags::VALUATION_PATHS]),
    )?;
    let draws = sample_gamma1_prior(
        c.prior_center,
        c.prior_scale,
        ctx.counts.draws,
        seed(ctx, &[tags::PRIOR]),
    )?;
    let s_ref = c.s_ref.unwrap_or(ctx.cfg.simulation.spot);
    let run = |v: &dyn Valuer| -> Result<UqReport, Failure> {
        let cube = exposure_cube(v, &s.portfolio, &paths, 0.0, &s.discount, false)?;
        Ok(gpxva::xva::uq_cva(
            &cube,
            &paths,
            "S",
            s_ref,
            &draws,
            c.target_survival,
            c.gamma0_max,
            c.recovery,
        )?)
    };
    let gp = run(s.surrogate.as_ref())?;
    let ex = run(&s.exact)?;
    out.put_with("uq_gp.csv", |w| gp.write_csv(w));
    out.put_with("uq_reval.csv", |w| ex.write_csv(w));
    let mut m = String::from("metric,value\n");
    for (name, rep) in [("gp", &gp), ("reval", &ex)] {
        writeln!(m, "failures_{name},{}", rep.failures).unwrap();
        let v = rep.cvas();
        if !v.is_empty() {
            for q in [0.05, 0.5, 0.95] {
                writeln!(m, "q{:02}_{name},{}", (q * 100.0) as u32, quantile(&v, q)?).unwrap();
            }
        }
    }
    if !gp.cvas().is_empty() && !ex.cvas().is_empty() {
        writeln!(m, "ks,{}", ks_statistic(&gp.cvas(), &ex.cvas())?).unwrap();
    }
    out.put("uq_summary.csv", m.into_bytes());
    Ok(())
}
