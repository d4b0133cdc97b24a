//! Label-driven deformable registration of 3D image pairs.
//!
//! A 3D convolutional network predicts a dense displacement field (DDF)
//! from a moving/fixed image pair. Training never sees voxel-level
//! correspondence: the only supervision is the overlap between warped
//! moving label masks and their fixed counterparts, measured with a
//! multiscale soft Dice. Everything needed to run that loop on a CPU is
//! here:
//!
//! - [`volume`]: grids, label masks, displacement fields and their file format.
//! - [`spatial`]: trilinear warping with exact gradients, affine fields,
//!   composition, summand aggregation, augmentation and inspection maps.
//! - [`loss`]: soft/multiscale Dice, multiscale cross-entropy and the
//!   deformation regularizers.
//! - [`net`]: layer primitives with hand-written backward passes and the
//!   registration network.
//! - [`train`]: two-stage minibatch sampling, Adam and the training loop.
//! - [`harness`]: synthetic phantoms, TRE/DSC evaluation and the file-level
//!   commands used by the `weakreg` binary.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod net;
pub mod real;
pub mod spatial;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
pub use volume::{AffineParams, DisplacementField, GridMeta, LabelMask, Volume};
