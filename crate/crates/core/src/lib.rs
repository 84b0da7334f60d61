//! Core library for `neuroens`: an end-to-end toolkit for classifying
//! synthetic structural brain volumes with an ensemble of small
//! convolutional networks.
//!
//! The crate is organized along the experiment pipeline:
//!
//! - [`volume`] — 3D volumes, NIfTI-1 I/O, resampling, slice extraction,
//!   and dataset manifests.
//! - [`phantom`] — seeded generation of ellipsoid head phantoms with
//!   class-dependent gray-matter shell thickness.
//! - [`preprocess`] — registration, bias-field correction, tissue
//!   segmentation, masking, and Gaussian smoothing.
//! - [`augment`] — deterministic 2D augmentation (mirror / rotate / pad)
//!   with per-class target counts.
//! - [`nn`] — a from-scratch tensor engine: conv / pool / dense layers,
//!   losses, optimizers, and finite-difference gradient checking.
//! - [`models`] — network builders (custom CNN, VGG16, AlexNet), symbolic
//!   shape inference, and checkpoint serialization.
//! - [`eval`] — confusion counts, threshold metrics, ROC curves, and AUC.
//! - [`pipeline`] — subject-level splits, k-fold plans, training loops,
//!   majority voting, and the experiment runner.
//!
//! Everything is seeded and single-threaded-deterministic; the parallel
//! paths (bounded by the `NEUROENS_THREADS` environment variable) reduce
//! in a fixed order so results do not depend on the worker count.

pub mod augment;
pub mod eval;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod util;
pub mod volume;
