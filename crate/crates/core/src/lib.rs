//! Boundary-weighted volumetric segmentation toolkit for BOLD MRI time series.
//!
//! The crate covers the full pipeline for segmenting a thin, highly deformable
//! organ in 4D (3D+time) MRI:
//!
//! 1. **volume** / **nifti** / **manifest** — in-memory volumes, label maps and
//!    time series, NIfTI-1 file I/O, and the JSON manifest that ties a series
//!    together on disk.
//! 2. **preprocess** — percentile normalization, interleave splitting, linear
//!    resampling, and crop/pad shape standardization.
//! 3. **boundary** — exact signed distance transforms, the convolutional
//!    boundary-band approximation, and per-voxel weight maps.
//! 4. **losses** — the benchmarked training objectives (cross-entropy, focal,
//!    soft Dice, SDT regression, soft-Hausdorff, Heaviside shape loss) with
//!    analytic gradients, plus boundary-weighted variants of each.
//! 5. **augment** — stochastic training-time augmentation including the
//!    hyperoxia-simulating placental intensity shift.
//! 6. **model** / **trainer** / **inference** — a 4-level volumetric
//!    encoder-decoder with hand-rolled forward/backward passes, the training
//!    loop with subject-wise sampling, and whole-volume prediction with
//!    largest-component post-processing.
//! 7. **metrics** / **analysis** — Dice, HD95, ASSD, BOLD error, oxygenation
//!    and temporal consistency, hyperoxia response, and figure generation.
//! 8. **phantom** — a synthetic thin-shell BOLD phantom generator with dense
//!    ground truth, used for desk-scale benchmarking.

pub mod analysis;
pub mod augment;
pub mod boundary;
pub mod error;
pub mod inference;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod phantom;
pub mod plot;
pub mod preprocess;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Cohort, LabelMap, Phase, Plurality, SubjectRecord, TimeSeries, Volume};
