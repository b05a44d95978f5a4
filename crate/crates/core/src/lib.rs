//! Distributionally robust chance-constrained approximate AC optimal power flow.
//!
//! The pipeline runs from a network case and a set of historical wind forecast
//! errors to an operating strategy: nominal setpoints, AGC participation factors
//! and regulating reserves. Uncertainty is handled through a Wasserstein ball
//! around the empirical error distribution; every chance constraint is replaced
//! by a finite set of linear vertex constraints sized from the data.
//!
//! Module map:
//! - [`case_io`]: case parsing, validation and admittance assembly.
//! - [`acgrid`]: exact AC power flow and the AGC/AVR response to a disturbance.
//! - [`linresponse`]: linear response matrices of voltages, reactive outputs and flows.
//! - [`wasserstein`]: sample standardization, the constant `C` and the ball radius.
//! - [`chance`]: hypercube sizing and robust counterparts of chance constraints.
//! - [`costdro`]: worst-case expected cost, exact and upper bound.
//! - [`opfcore`]: the interior-point solver and the constraint enforcement loop.
//! - [`rivals`]: benchmark formulations (RO, moment DRO, Gaussian SP, DC).
//! - [`simlab`]: sample generation and Monte Carlo evaluation.
//! - [`cli`]: the command-line front end.

pub mod acgrid;
pub mod case_io;
pub mod chance;
pub mod cli;
pub mod costdro;
pub mod error;
pub mod linalg;
pub mod linresponse;
pub mod opfcore;
pub mod rivals;
pub mod simlab;
pub mod wasserstein;

pub use error::{Error, Result};
