//! Quality control for large batches of co-registered CT head series.
//!
//! The crate is organised around the stages a series passes through:
//!
//! * [`volume`]: NIfTI-1 I/O, grid geometry, orientation and localiser
//!   screening, resampling.
//! * [`presence`]: per-slice information presence and z-profile heat maps.
//! * [`completeness`]: assignment of a z-profile to a coverage subgroup.
//! * [`ssim`]: template similarity scoring and grouped inspection flags.
//! * [`superimpose`]: thresholded mask batches, voxel attribution and the
//!   append-only annotation log.
//! * [`roi`]: artery regions of interest and their transfer to native space.
//! * [`pipeline`]: staged orchestration, the rejection ledger and reports.
//!
//! [`phantom`] generates the synthetic head volumes and ROI fixtures used by
//! the tests and the `ctqc synth` command.

// `!(a > b)` checks below also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod completeness;
pub mod error;
pub mod phantom;
pub mod pipeline;
pub mod presence;
pub mod roi;
pub mod ssim;
pub mod superimpose;
pub mod volume;

pub use error::{Error, Result};
