//! Shape-based myocardial infarction classification on synthetic
//! biventricular anatomy.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: float64 tensors, a reverse-mode autodiff tape, Adam.
//! - [`pointnet`]: the permutation-invariant point-cloud classifier.
//! - [`anatomy`]: parametric ED/ES ventricle generator and the slice
//!   acquisition simulator (contour sampling, misalignment, registration).
//! - [`clinical`]: cavity volumes, ejection fraction, logistic benchmarks.
//! - [`harness`]: stratified folds, AUROC, the 8-cell experiment tables and
//!   the best/worst case report.

pub mod clinical;
pub mod error;
pub mod rng;
pub mod anatomy;
pub mod harness;
pub mod pointnet;
pub mod tensor;

pub use error::{Error, Result};
