//! Evaluation measures: overlap, surface distances, BOLD error, and
//! consistency summaries.
//!
//! Surface definition: foreground voxels with at least one background
//! 6-neighbor, out-of-grid counting as background. Distances are measured
//! between voxel centers in mm with anisotropic spacing. HD95 takes the
//! linear-interpolated 95th percentile over the union of both directed
//! surface-to-surface distance sets; ASSD is the mean of the same union.

use ndarray::Array3;

use crate::boundary;
use crate::error::{Error, Result};
use crate::stats;
use crate::volume::{LabelMap, Volume};

/// Dice overlap in percent.
///
/// Both-empty is defined as 100 (identical masks), one-empty as 0, so the
/// metric stays total for failure-case reporting.
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("dice operands", &b.shape(), &a.shape()));
    }
    let mut inter = 0u64;
    let mut sum = 0u64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        inter += u64::from(*x == 1 && *y == 1);
        sum += u64::from(*x == 1) + u64::from(*y == 1);
    }
    if sum == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / sum as f64)
}

/// Foreground voxels with at least one background 6-neighbor
/// (out-of-grid counts as background), in index order.
pub fn surface_voxels(label: &LabelMap) -> Vec<[usize; 3]> {
    let dims = label.data.dim();
    let mut out = Vec::new();
    for ((i, j, k), &v) in label.data.indexed_iter() {
        if v != 1 {
            continue;
        }
        let mut border = false;
        let neighbors: [[isize; 3]; 6] = [
            [-1, 0, 0],
            [1, 0, 0],
            [0, -1, 0],
            [0, 1, 0],
            [0, 0, -1],
            [0, 0, 1],
        ];
        for n in neighbors {
            let ni = i as isize + n[0];
            let nj = j as isize + n[1];
            let nk = k as isize + n[2];
            if ni < 0
                || nj < 0
                || nk < 0
                || ni >= dims.0 as isize
                || nj >= dims.1 as isize
                || nk >= dims.2 as isize
                || label.data[[ni as usize, nj as usize, nk as usize]] == 0
            {
                border = true;
                break;
            }
        }
        if border {
            out.push([i, j, k]);
        }
    }
    out
}

/// Union of both directed surface-to-surface distance sets, in mm.
fn symmetric_surface_distances(a: &LabelMap, b: &LabelMap, spacing: [f32; 3]) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("surface distance operands", &b.shape(), &a.shape()));
    }
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    if sa.is_empty() {
        return Err(Error::EmptySurface(
            "first mask has no surface voxels; masks are not comparable".to_string(),
        ));
    }
    if sb.is_empty() {
        return Err(Error::EmptySurface(
            "second mask has no surface voxels; masks are not comparable".to_string(),
        ));
    }
    let spacing = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64];
    let dims = a.data.dim();

    // exact distance field to each surface, sampled at the other surface
    let site_field = |sites: &[[usize; 3]]| -> Result<Array3<f64>> {
        let mut mask = Array3::from_elem(dims, false);
        for s in sites {
            mask[[s[0], s[1], s[2]]] = true;
        }
        boundary::distance_to_set(&mask, spacing)
    };
    let to_b = site_field(&sb)?;
    let to_a = site_field(&sa)?;

    let mut distances = Vec::with_capacity(sa.len() + sb.len());
    for v in &sa {
        distances.push(to_b[[v[0], v[1], v[2]]]);
    }
    for v in &sb {
        distances.push(to_a[[v[0], v[1], v[2]]]);
    }
    Ok(distances)
}

/// 95th-percentile Hausdorff distance in mm.
pub fn hd95(a: &LabelMap, b: &LabelMap, spacing: [f32; 3]) -> Result<f64> {
    let d = symmetric_surface_distances(a, b, spacing)?;
    Ok(stats::percentile(&d, 95.0))
}

/// Average symmetric surface distance in mm.
pub fn assd(a: &LabelMap, b: &LabelMap, spacing: [f32; 3]) -> Result<f64> {
    let d = symmetric_surface_distances(a, b, spacing)?;
    Ok(stats::mean(&d))
}

/// Mean intensity inside a mask; `None` if the mask is empty.
pub fn mask_mean(volume: &Volume, mask: &LabelMap) -> Option<f64> {
    let mut sum = 0f64;
    let mut n = 0u64;
    for (v, m) in volume.data.iter().zip(mask.data.iter()) {
        if *m == 1 {
            sum += *v as f64;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Percentage error of the mean BOLD signal under a predicted mask relative
/// to the ground-truth mask: `100 * |b_hat - b| / b`.
pub fn bold_error(volume: &Volume, gt: &LabelMap, pred: &LabelMap) -> Result<f64> {
    if gt.shape() != volume.shape() || pred.shape() != volume.shape() {
        return Err(Error::shape(
            "bold_error masks vs volume",
            &gt.shape(),
            &volume.shape(),
        ));
    }
    let b = mask_mean(volume, gt).ok_or_else(|| {
        Error::EmptyMask("ground-truth mask is empty; BOLD error undefined".to_string())
    })?;
    if b == 0.0 {
        return Err(Error::Degenerate(
            "ground-truth mean BOLD signal is zero; relative error undefined".to_string(),
        ));
    }
    let b_hat = mask_mean(volume, pred).ok_or_else(|| {
        Error::EmptyMask("predicted mask is empty; BOLD error undefined".to_string())
    })?;
    Ok(100.0 * (b_hat - b).abs() / b.abs())
}

/// Absolute difference of a metric between the two oxygenation phases.
pub fn oxygenation_consistency(m_normoxia: f64, m_hyperoxia: f64) -> f64 {
    (m_normoxia - m_hyperoxia).abs()
}

/// Dice between consecutive masks: `[dice(m_i, m_{i+1})]`.
pub fn consecutive_dice(masks: &[LabelMap]) -> Result<Vec<f64>> {
    if masks.len() < 2 {
        return Err(Error::InvalidArgument(
            "consecutive_dice needs at least 2 masks".to_string(),
        ));
    }
    let mut out = Vec::with_capacity(masks.len() - 1);
    for pair in masks.windows(2) {
        out.push(dice(&pair[0], &pair[1])?);
    }
    Ok(out)
}
