//! Scan-specific reconstruction of isotropic volumes from motion-corrupted
//! stacks of thick MR slices.

pub mod acquisition;
pub mod decoder;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod net;
pub mod nifti;
pub mod pipeline;
pub mod rigid;
pub mod simulate;
pub mod srr;
pub mod svr;
pub mod volume;

pub use error::{Error, Result};
