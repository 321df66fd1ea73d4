//! Numerical stochastic homogenization with variance-reduced Monte Carlo.
//!
//! The crate solves periodic corrector problems on truncated boxes
//! `Q_N = (0, N)^d`, forms the apparent homogenized matrix `A*_N` of each
//! random configuration, and estimates `E[A*_N]` by plain Monte Carlo,
//! antithetic pairs, defect-expansion control variates, or selection of
//! special quasirandom configurations.

pub mod antithetic;
pub mod cache;
pub mod control_variate;
pub mod error;
pub mod homog;
pub mod matrix;
pub mod mc;
pub mod pde;
pub mod rfield;
pub mod sqs;
pub mod stream;

pub use error::{Error, Result};
pub use matrix::SmallMatrix;
pub use antithetic::run_antithetic;
pub use control_variate::{run_cv, CvOptions, DefectCoefficients, RhoMode};
pub use homog::{homogenized_matrix, HomogenizedMatrix};
pub use mc::{run_mc, variance_ratio, EstimatorReport, Method, RunParams, SampleTable};
pub use pde::SolverSettings;
pub use rfield::{FieldSpec, Law, PerturbationSpec, UnitCellField, XLaw};
pub use sqs::{run_sqs, Selection, SqsOptions, SqsTables};
