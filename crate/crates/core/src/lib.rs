//! Gaussian-process surrogates for derivative valuation and counterparty
//! credit risk.

pub mod credit;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod mgp;
pub mod optim;
pub mod paths;
pub mod pricers;
pub mod xva;

pub use error::{Error, Result};
pub use gp::{fit, FitCfg, GpModel};
pub use kernels::{KernelSpec, Lengthscale};
pub use mgp::{fit_multi, MgpCfg, MgpModel};
pub use optim::OptimizerCfg;
