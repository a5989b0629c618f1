//! Control-function estimation of survival models with dependent censoring.
//!
//! The log survival time `T` and a dependent censoring time `C` follow
//! transformed linear models with bivariate normal errors; an endogenous
//! treatment `Z` is handled through a control function `V` estimated from an
//! instrument in a first stage. Independent (administrative) censoring `A`
//! is allowed. The crate provides the two-step estimator with sandwich
//! inference, a parametric-bootstrap goodness-of-fit test, a competing-risks
//! extension and a simulation kit.

pub mod cmprsk;
pub mod data;
pub mod dist;
pub mod error;
pub mod estimator;
pub mod firststage;
pub mod gof;
pub mod io;
pub mod likelihood;
pub mod optim;
pub mod quad;
pub mod simkit;
pub mod transform;

pub use error::{Error, Result};
