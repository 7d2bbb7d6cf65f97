//! Deformable inter-subject registration of multi-channel volumes, driven by
//! block-wise graph-cut optimization over a Gaussian resampling pyramid, with
//! the cohort evaluation toolkit used to score registrations: Dice and
//! Hausdorff overlap, label error frequency maps, Jacobian determinant maps,
//! streaming mean/std aggregation, voxel-wise correlation, and paired
//! significance testing.
//!
//! The registration input is a [`ChannelStack`]: intensity channels (fat and
//! water fractions) optionally augmented with binary tissue-mask channels,
//! each carrying its own weight in the sum-of-squared-distances data term.

pub mod cohortstats;
pub mod energy;
mod error;
pub mod mincut;
pub mod phantom;
pub mod pyramid;
pub mod register;
pub mod volgrid;
pub mod warp;

pub use error::{Error, Result};
pub use pyramid::{Channel, ChannelKind, ChannelStack, Pyramid};
pub use volgrid::{DisplacementField, GridMeta, LabelVolume, ScalarVolume, Volume};
