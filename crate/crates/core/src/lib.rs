//! Numerical laboratory for differential equations driven by fractional
//! Brownian motion with Hurst parameter in (1/4, 1).
//!
//! The crate samples fBm exactly on uniform grids, integrates the flow, its
//! Jacobian and the bracket-transport (β) system along piecewise-linear
//! drivers, assembles Malliavin matrices in the Cameron–Martin space, and
//! estimates small-ball probabilities, inverse moments and the small-time
//! smoothing exponent of `P_t f(x) = E f(X_t^x)`.
//!
//! Module map:
//!
//! * [`words`] – index alphabet, concatenation and enumeration order.
//! * [`fbm`] – covariance, exact samplers (circulant / Cholesky), path norms.
//! * [`cm_space`] – Cameron–Martin inner products of step functions.
//! * [`vfields`] – symbolic vector fields, Lie brackets, structure functions.
//! * [`flow`] – co-integration of `X`, `J`, `J^{-1}` and β.
//! * [`signature`] – iterated integrals via Chen's relation.
//! * [`matrices`] – Malliavin / Gram matrices, inverse moments, small balls.
//! * [`smoothing`] – Monte Carlo semigroup derivatives and exponent fits.
//! * [`cli`] – configuration files, manifests and the `fbmlab` commands.

pub mod cli;
pub mod cm_space;
mod error;
pub mod fbm;
pub mod flow;
pub mod matrices;
pub mod mc;
pub mod signature;
pub mod smoothing;
pub mod stats;
pub mod vfields;
pub mod words;

pub use error::{Error, Result};
pub use fbm::{FbmPath, FbmSampler, SamplingMethod};
pub use flow::{FlowBundle, System};
pub use words::{Word, WordBasis};
