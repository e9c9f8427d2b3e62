//! Canonical in-memory representation of volumes, label maps, and time series.
//!
//! All types are immutable after construction and safe to share across
//! threads. Invariants are checked by the constructors; the fields stay
//! public for ergonomic read access.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid-frame metadata carried through from a NIfTI header. Never used to
/// resample; stored so that saved outputs keep the source geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d
    pub quatern: [f32; 3],
    /// qoffset_x, qoffset_y, qoffset_z
    pub qoffset: [f32; 3],
    /// srow_x, srow_y, srow_z
    pub srow: [[f32; 4]; 3],
    /// pixdim[0], the qform handedness flag
    pub qfac: f32,
}

/// A 3D scalar intensity grid with physical voxel spacing in mm.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Voxel edge lengths in mm, one per axis.
    pub spacing: [f32; 3],
    pub orientation: Option<Orientation>,
}

impl Volume {
    /// Build a volume, validating dimensions, spacing, and finiteness.
    pub fn new(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        let dims = data.dim();
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(Error::InvalidArgument(format!(
                "volume dimensions must all be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "volume contains NaN or Inf values".to_string(),
            ));
        }
        Ok(Volume {
            data,
            spacing,
            orientation: None,
        })
    }

    pub fn with_orientation(mut self, orientation: Option<Orientation>) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }
}

/// A binary placenta mask paired with the spacing of its source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub data: Array3<u8>,
    pub spacing: [f32; 3],
}

impl LabelMap {
    /// Build a label map, validating that every voxel is exactly 0 or 1.
    pub fn new(data: Array3<u8>, spacing: [f32; 3]) -> Result<Self> {
        if data.iter().any(|v| *v > 1) {
            return Err(Error::InvalidArgument(
                "label map contains values other than 0 and 1".to_string(),
            ));
        }
        if spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(LabelMap { data, spacing })
    }

    pub fn from_mask(mask: &Array3<bool>, spacing: [f32; 3]) -> Self {
        LabelMap {
            data: mask.mapv(|b| b as u8),
            spacing,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|v| *v == 1)
    }

    /// View of the mask as f32 (0.0 / 1.0), e.g. for saving as a volume.
    pub fn to_volume(&self) -> Volume {
        Volume {
            data: self.data.mapv(f32::from),
            spacing: self.spacing,
            orientation: None,
        }
    }

    /// Check shape and spacing agreement with a paired volume.
    pub fn matches(&self, volume: &Volume) -> bool {
        self.shape() == volume.shape() && self.spacing == volume.spacing
    }
}

/// Oxygenation phase of one frame in the experimental paradigm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "normoxia1")]
    Normoxia1,
    #[serde(rename = "hyperoxia")]
    Hyperoxia,
    #[serde(rename = "normoxia2")]
    Normoxia2,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Normoxia1 => "normoxia1",
            Phase::Hyperoxia => "hyperoxia",
            Phase::Normoxia2 => "normoxia2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normoxia1" => Ok(Phase::Normoxia1),
            "hyperoxia" => Ok(Phase::Hyperoxia),
            "normoxia2" => Ok(Phase::Normoxia2),
            other => Err(Error::InvalidArgument(format!(
                "unknown phase {other:?}; expected normoxia1, hyperoxia, or normoxia2"
            ))),
        }
    }

    fn block_index(&self) -> usize {
        match self {
            Phase::Normoxia1 => 0,
            Phase::Hyperoxia => 1,
            Phase::Normoxia2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cohort {
    #[serde(rename = "control")]
    Control,
    #[serde(rename = "FGR")]
    Fgr,
    #[serde(rename = "highBMI")]
    HighBmi,
}

impl Cohort {
    pub fn as_str(&self) -> &'static str {
        match self {
            Cohort::Control => "control",
            Cohort::Fgr => "FGR",
            Cohort::HighBmi => "highBMI",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "control" => Ok(Cohort::Control),
            "FGR" => Ok(Cohort::Fgr),
            "highBMI" => Ok(Cohort::HighBmi),
            other => Err(Error::InvalidArgument(format!(
                "unknown cohort {other:?}; expected control, FGR, or highBMI"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Plurality {
    #[serde(rename = "singleton")]
    Singleton,
    #[serde(rename = "twin")]
    Twin,
}

impl Plurality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Plurality::Singleton => "singleton",
            Plurality::Twin => "twin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "singleton" => Ok(Plurality::Singleton),
            "twin" => Ok(Plurality::Twin),
            other => Err(Error::InvalidArgument(format!(
                "unknown plurality {other:?}; expected singleton or twin"
            ))),
        }
    }
}

/// Per-subject demographic record used for stratified splitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub cohort: Cohort,
    pub plurality: Plurality,
    /// Gestational age as (weeks, days), when known.
    pub gestational_age: Option<(u32, u32)>,
}

/// An ordered BOLD frame sequence with per-frame oxygenation phase and a
/// sparse set of ground-truth labels.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    pub subject_id: String,
    pub frames: Vec<Volume>,
    pub phase: Vec<Phase>,
    /// Frame index -> label; sorted by construction.
    pub labels: BTreeMap<usize, LabelMap>,
}

impl TimeSeries {
    pub fn new(
        subject_id: impl Into<String>,
        frames: Vec<Volume>,
        phase: Vec<Phase>,
        labels: BTreeMap<usize, LabelMap>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument(
                "time series must contain at least one frame".to_string(),
            ));
        }
        if phase.len() != frames.len() {
            return Err(Error::InvalidArgument(format!(
                "phase annotation length {} does not match frame count {}",
                phase.len(),
                frames.len()
            )));
        }
        let shape = frames[0].shape();
        let spacing = frames[0].spacing;
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != shape || f.spacing != spacing {
                return Err(Error::InvalidArgument(format!(
                    "frame {i} has shape {:?} spacing {:?}, expected {:?} {:?}",
                    f.shape(),
                    f.spacing,
                    shape,
                    spacing
                )));
            }
        }
        // Phases must form a contiguous normoxia1 -> hyperoxia -> normoxia2
        // partition (blocks may be empty).
        let mut current = 0usize;
        for (i, p) in phase.iter().enumerate() {
            let b = p.block_index();
            if b < current {
                return Err(Error::InvalidArgument(format!(
                    "phase annotation is not a contiguous three-block partition at frame {i}"
                )));
            }
            current = b;
        }
        for (&idx, label) in &labels {
            if idx >= frames.len() {
                return Err(Error::InvalidArgument(format!(
                    "label index {idx} out of range for {} frames",
                    frames.len()
                )));
            }
            if !label.matches(&frames[idx]) {
                return Err(Error::InvalidArgument(format!(
                    "label at frame {idx} does not match frame shape/spacing"
                )));
            }
        }
        Ok(TimeSeries {
            subject_id: subject_id.into(),
            frames,
            phase,
            labels,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Frame indices belonging to the given phase.
    pub fn frames_in_phase(&self, phase: Phase) -> Vec<usize> {
        self.phase
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == phase)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Centrally crop or pad a volume to a target shape.
///
/// Excess is split evenly per axis with the extra voxel on the high-index
/// side; padding uses `fill`. Total function: any input shape maps to
/// exactly the target shape.
pub fn crop_or_pad(volume: &Volume, target: [usize; 3], fill: f32) -> Result<Volume> {
    if target.iter().any(|t| *t < 1) {
        return Err(Error::InvalidArgument(format!(
            "crop_or_pad target dims must be >= 1, got {target:?}"
        )));
    }
    let data = crop_or_pad_array(&volume.data, target, fill);
    Ok(Volume {
        data,
        spacing: volume.spacing,
        orientation: volume.orientation.clone(),
    })
}

/// Label-map variant of [`crop_or_pad`]; padding is background.
pub fn crop_or_pad_label(label: &LabelMap, target: [usize; 3]) -> Result<LabelMap> {
    if target.iter().any(|t| *t < 1) {
        return Err(Error::InvalidArgument(format!(
            "crop_or_pad target dims must be >= 1, got {target:?}"
        )));
    }
    let data = crop_or_pad_array(&label.data, target, 0u8);
    Ok(LabelMap {
        data,
        spacing: label.spacing,
    })
}

fn crop_or_pad_array<T: Copy>(data: &Array3<T>, target: [usize; 3], fill: T) -> Array3<T> {
    let src = data.dim();
    let src = [src.0, src.1, src.2];
    // Per axis: range copied from the source and its offset in the output.
    let mut src_lo = [0usize; 3];
    let mut dst_lo = [0usize; 3];
    let mut copy = [0usize; 3];
    for a in 0..3 {
        if src[a] >= target[a] {
            // crop: remove floor(excess/2) from the low side
            src_lo[a] = (src[a] - target[a]) / 2;
            dst_lo[a] = 0;
            copy[a] = target[a];
        } else {
            // pad: floor(pad/2) on the low side, remainder on the high side
            src_lo[a] = 0;
            dst_lo[a] = (target[a] - src[a]) / 2;
            copy[a] = src[a];
        }
    }
    let mut out = Array3::from_elem((target[0], target[1], target[2]), fill);
    for i in 0..copy[0] {
        for j in 0..copy[1] {
            for k in 0..copy[2] {
                out[[dst_lo[0] + i, dst_lo[1] + j, dst_lo[2] + k]] =
                    data[[src_lo[0] + i, src_lo[1] + j, src_lo[2] + k]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp_volume(shape: (usize, usize, usize)) -> Volume {
        let mut idx = 0f32;
        let data = Array3::from_shape_fn(shape, |_| {
            idx += 1.0;
            idx
        });
        Volume::new(data, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn volume_rejects_nan_and_bad_spacing() {
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        data[[0, 0, 0]] = f32::NAN;
        assert!(Volume::new(data, [1.0, 1.0, 1.0]).is_err());
        let data = Array3::<f32>::zeros((2, 2, 2));
        assert!(Volume::new(data.clone(), [0.0, 1.0, 1.0]).is_err());
        assert!(Volume::new(data, [1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn labelmap_rejects_nonbinary() {
        let mut data = Array3::<u8>::zeros((2, 2, 2));
        data[[1, 1, 1]] = 2;
        assert!(LabelMap::new(data, [1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn crop_or_pad_identity_at_target() {
        let v = ramp_volume((6, 5, 4));
        let out = crop_or_pad(&v, [6, 5, 4], 0.0).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn crop_or_pad_margins_match_centering_rule() {
        // 100x100x70 -> 112x112x80: pad 6/6, 6/6, 5/5
        let v = ramp_volume((10, 10, 7));
        let out = crop_or_pad(&v, [12, 12, 8], -1.0).unwrap();
        assert_eq!(out.shape(), [12, 12, 8]);
        // low margins: floor(2/2)=1, floor(2/2)=1, floor(1/2)=0
        assert_eq!(out.data[[0, 0, 0]], -1.0);
        assert_eq!(out.data[[1, 1, 0]], v.data[[0, 0, 0]]);
        // extra voxel on the high side along z: z in [0, 7) copies from src z
        assert_eq!(out.data[[1, 1, 7]], -1.0);
        assert_eq!(out.data[[1, 1, 6]], v.data[[0, 0, 6]]);
    }

    #[test]
    fn crop_of_pad_is_identity() {
        let v = ramp_volume((5, 7, 6));
        let padded = crop_or_pad(&v, [9, 8, 11], 0.0).unwrap();
        let back = crop_or_pad(&padded, [5, 7, 6], 0.0).unwrap();
        assert_eq!(back.data, v.data);
    }

    #[test]
    fn phase_partition_validated() {
        let frame = ramp_volume((2, 2, 2));
        let ok = TimeSeries::new(
            "s",
            vec![frame.clone(), frame.clone(), frame.clone()],
            vec![Phase::Normoxia1, Phase::Hyperoxia, Phase::Normoxia2],
            BTreeMap::new(),
        );
        assert!(ok.is_ok());
        let bad = TimeSeries::new(
            "s",
            vec![frame.clone(), frame.clone(), frame],
            vec![Phase::Hyperoxia, Phase::Normoxia1, Phase::Normoxia2],
            BTreeMap::new(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn labels_validated_against_frames() {
        let frame = ramp_volume((2, 2, 2));
        let mut labels = BTreeMap::new();
        labels.insert(
            5usize,
            LabelMap::new(Array3::zeros((2, 2, 2)), [1.0, 1.0, 1.0]).unwrap(),
        );
        let err = TimeSeries::new(
            "s",
            vec![frame.clone()],
            vec![Phase::Normoxia1],
            labels,
        );
        assert!(err.is_err());
    }
}
