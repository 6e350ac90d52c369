//! Joint tumor segmentation and deformable registration of paired 2D slices.
//!
//! The library minimizes a five-term variational energy coupling a selective
//! segmentation map `theta` with a dense displacement field `u` that warps a
//! template image onto a reference image. Two minimization modes are provided:
//! direct first-order descent on the fields, and a per-instance deep-image-prior
//! mode where two small encoder-decoder networks generate `theta` and `u`.
//!
//! Modules follow the processing pipeline: [`preprocess`] makes a slice pair
//! comparable, [`geodesic`] turns user markers into a distance prior,
//! [`energy`] evaluates the loss and its gradients, [`optim`] runs the
//! minimization, [`metrics`] scores the result, and [`report`] renders
//! tables and charts. [`phantom`] generates synthetic pairs with known ground
//! truth so the whole chain is testable without patient data.

pub mod energy;
pub mod error;
pub mod geodesic;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nnet;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod report;

pub use error::{Error, Result};
pub use image::{DisplacementField, Image2D, SliceStack};
