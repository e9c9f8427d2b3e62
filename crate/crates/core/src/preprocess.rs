//! Deterministic intensity normalization, interleave handling, and shape
//! standardization applied before training and inference.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::volume::{crop_or_pad, Volume};

/// Scale a volume so its p-th percentile intensity becomes 1.
///
/// The percentile is taken over all voxels, background included, and no
/// values are thresholded or clipped. Fails if the percentile value is not
/// positive (e.g. an all-zero volume).
pub fn normalize_percentile(volume: &Volume, p: f64) -> Result<Volume> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in [0, 100], got {p}"
        )));
    }
    let values: Vec<f64> = volume.data.iter().map(|v| *v as f64).collect();
    let q = stats::percentile(&values, p);
    if !(q > 0.0) {
        return Err(Error::Degenerate(format!(
            "{p}th percentile intensity is {q}; cannot normalize"
        )));
    }
    let q = q as f32;
    let data = volume.data.mapv(|v| v / q);
    Ok(Volume {
        data,
        spacing: volume.spacing,
        orientation: volume.orientation.clone(),
    })
}

/// Which half of an interleaved acquisition to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterleaveHalf {
    #[serde(rename = "even")]
    Even,
    #[serde(rename = "odd")]
    Odd,
}

/// Split an interleaved volume into its even- and odd-slice halves along
/// `axis`. Spacing along the axis doubles (e.g. 3 mm -> 6 mm).
pub fn deinterleave(volume: &Volume, axis: usize) -> Result<(Volume, Volume)> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!(
            "deinterleave axis {axis} out of range (0..=2)"
        )));
    }
    let shape = volume.shape();
    if shape[axis] < 2 {
        return Err(Error::InvalidArgument(format!(
            "deinterleave needs >= 2 slices along axis {axis}, got {}",
            shape[axis]
        )));
    }
    let n_even = shape[axis].div_ceil(2);
    let n_odd = shape[axis] / 2;
    let mut spacing = volume.spacing;
    spacing[axis] *= 2.0;

    let slice_half = |offset: usize, n: usize| -> Array3<f32> {
        let mut out_shape = shape;
        out_shape[axis] = n;
        Array3::from_shape_fn((out_shape[0], out_shape[1], out_shape[2]), |(i, j, k)| {
            let mut idx = [i, j, k];
            idx[axis] = 2 * idx[axis] + offset;
            volume.data[[idx[0], idx[1], idx[2]]]
        })
    };
    let even = Volume {
        data: slice_half(0, n_even),
        spacing,
        orientation: volume.orientation.clone(),
    };
    let odd = Volume {
        data: slice_half(1, n_odd),
        spacing,
        orientation: volume.orientation.clone(),
    };
    Ok((even, odd))
}

/// Inverse of [`deinterleave`]: merge two half-volumes back into an
/// alternating-slice volume. Halves may differ by one slice along the axis
/// (the even half holds the extra slice).
pub fn interleave(even: &Volume, odd: &Volume, axis: usize) -> Result<Volume> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!(
            "interleave axis {axis} out of range (0..=2)"
        )));
    }
    let se = even.shape();
    let so = odd.shape();
    for a in 0..3 {
        if a != axis && se[a] != so[a] {
            return Err(Error::shape("interleave halves", &so, &se));
        }
    }
    if se[axis] != so[axis] && se[axis] != so[axis] + 1 {
        return Err(Error::InvalidArgument(format!(
            "interleave halves must have equal slice counts (or even = odd + 1), got {} and {}",
            se[axis], so[axis]
        )));
    }
    let mut shape = se;
    shape[axis] = se[axis] + so[axis];
    let mut spacing = even.spacing;
    spacing[axis] /= 2.0;
    let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| {
        let mut idx = [i, j, k];
        let s = idx[axis];
        idx[axis] = s / 2;
        if s % 2 == 0 {
            even.data[[idx[0], idx[1], idx[2]]]
        } else {
            odd.data[[idx[0], idx[1], idx[2]]]
        }
    });
    Ok(Volume {
        data,
        spacing,
        orientation: even.orientation.clone(),
    })
}

/// Trilinear resampling onto a grid with the requested voxel spacing.
///
/// Node-centered convention: samples sit at `i * spacing` along each axis
/// and the output grid spans the same physical extent. Out-of-range
/// positions clamp to the edge, so no intensities are fabricated at borders.
pub fn resample_linear(volume: &Volume, target_spacing: [f32; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let shape = volume.shape();
    let mut out_shape = [0usize; 3];
    for a in 0..3 {
        let extent = (shape[a] - 1) as f64 * volume.spacing[a] as f64;
        out_shape[a] = (extent / target_spacing[a] as f64 + 1e-9).floor() as usize + 1;
    }
    let data = Array3::from_shape_fn((out_shape[0], out_shape[1], out_shape[2]), |(i, j, k)| {
        let pos = [
            i as f64 * target_spacing[0] as f64 / volume.spacing[0] as f64,
            j as f64 * target_spacing[1] as f64 / volume.spacing[1] as f64,
            k as f64 * target_spacing[2] as f64 / volume.spacing[2] as f64,
        ];
        sample_trilinear_clamped(&volume.data, pos)
    });
    Volume::new(data, target_spacing).map(|v| v.with_orientation(volume.orientation.clone()))
}

/// Trilinear sample at a (possibly fractional) voxel position, clamping to
/// the grid edge.
pub(crate) fn sample_trilinear_clamped(data: &Array3<f32>, pos: [f64; 3]) -> f32 {
    let dims = data.dim();
    let dims = [dims.0, dims.1, dims.2];
    let mut lo = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let p = pos[a].clamp(0.0, (dims[a] - 1) as f64);
        let fl = p.floor();
        lo[a] = fl as usize;
        frac[a] = p - fl;
        if lo[a] == dims[a] - 1 {
            frac[a] = 0.0;
        }
    }
    let hi = [
        (lo[0] + 1).min(dims[0] - 1),
        (lo[1] + 1).min(dims[1] - 1),
        (lo[2] + 1).min(dims[2] - 1),
    ];
    let mut acc = 0f64;
    for (ci, wi) in [(lo[0], 1.0 - frac[0]), (hi[0], frac[0])] {
        if wi == 0.0 {
            continue;
        }
        for (cj, wj) in [(lo[1], 1.0 - frac[1]), (hi[1], frac[1])] {
            if wj == 0.0 {
                continue;
            }
            for (ck, wk) in [(lo[2], 1.0 - frac[2]), (hi[2], frac[2])] {
                if wk == 0.0 {
                    continue;
                }
                acc += wi * wj * wk * data[[ci, cj, ck]] as f64;
            }
        }
    }
    acc as f32
}

/// Parameters of the standard preprocessing pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    /// Normalization percentile.
    pub percentile: f64,
    /// Output shape; must be divisible by 16 for the 4-level network.
    pub target_shape: [usize; 3],
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            percentile: 90.0,
            target_shape: [112, 112, 80],
        }
    }
}

/// Percentile normalization followed by crop/pad to the target shape.
pub fn standard_pipeline(volume: &Volume, params: &PipelineParams) -> Result<Volume> {
    let normalized = normalize_percentile(volume, params.percentile)?;
    crop_or_pad(&normalized, params.target_shape, 0.0)
}
