//! Signed distance transforms, the convolutional boundary-band
//! approximation, and per-voxel boundary weight maps.
//!
//! The band is computed by box-average pooling of the binary label with an
//! odd kernel K (stride 1, zero padding): a voxel whose pooled value lies
//! strictly in (0, 1) sees both classes within Chebyshev distance
//! delta = (K-1)/2 and is declared part of the boundary band. Pooling a
//! binary mask only needs integer window sums, so band membership is decided
//! exactly, with no floating-point dust. The split into inner (foreground)
//! and outer (background) band halves drives the additive weight map
//!
//! ```text
//! w(x) = w_c + w1  on the inner band,
//!        w_c + w2  on the outer band,
//!        w_c       elsewhere.
//! ```
//!
//! Exact distance transforms are also provided: the Euclidean transform is
//! the separable exact lower-envelope method (with optional anisotropic
//! mm spacing), the Chebyshev transform a two-pass sweep over the
//! 26-neighborhood. Sign convention: foreground voxels carry +distance to
//! the nearest background voxel, background voxels -distance to the nearest
//! foreground voxel, so there is no zero level and boundary foreground
//! voxels land in the inner (w1) case.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "euclidean")]
    Euclidean,
    #[serde(rename = "chebyshev")]
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "voxel")]
    Voxel,
    #[serde(rename = "mm")]
    Mm,
}

/// Signed distance to the mask boundary; positive inside.
#[derive(Debug, Clone)]
pub struct DistanceMap {
    pub data: Array3<f64>,
    pub metric: Metric,
    pub units: Units,
}

/// The 2*delta-wide boundary band split into its foreground and background
/// halves.
#[derive(Debug, Clone)]
pub struct BoundaryBand {
    /// Band voxels with y = 1.
    pub inner: LabelMap,
    /// Band voxels with y = 0.
    pub outer: LabelMap,
    /// delta = (K - 1) / 2 in voxels.
    pub half_width: usize,
    pub kernel_size: usize,
}

impl BoundaryBand {
    pub fn is_empty(&self) -> bool {
        self.inner.is_empty() && self.outer.is_empty()
    }
}

/// Boundary weighting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub w1: f64,
    pub w2: f64,
    pub w_c: f64,
    pub kernel_size: usize,
}

/// Per-voxel nonnegative loss weights.
#[derive(Debug, Clone)]
pub struct WeightMap {
    pub data: Array3<f64>,
    pub params: WeightParams,
}

/// Exact signed distance transform of a binary label.
///
/// Errors if the label is all-background or all-foreground (the sign for the
/// absent class is undefined; see [`distance_to_set`] for the unsigned
/// fallback). Millimeter units apply anisotropic spacing and are only
/// supported for the Euclidean metric.
pub fn signed_distance_exact(label: &LabelMap, metric: Metric, units: Units) -> Result<DistanceMap> {
    let shape = label.shape();
    if shape.iter().any(|d| *d < 2) {
        return Err(Error::InvalidArgument(format!(
            "signed distance needs shape >= 2 per axis, got {shape:?}"
        )));
    }
    if label.is_empty() {
        return Err(Error::SingleClassLabel { class: "background" });
    }
    if label.is_full() {
        return Err(Error::SingleClassLabel { class: "foreground" });
    }
    let spacing = match (metric, units) {
        (_, Units::Voxel) => [1.0f64; 3],
        (Metric::Euclidean, Units::Mm) => {
            [label.spacing[0] as f64, label.spacing[1] as f64, label.spacing[2] as f64]
        }
        (Metric::Chebyshev, Units::Mm) => {
            return Err(Error::InvalidArgument(
                "Chebyshev distances are defined in voxel units; mm spacing applies to \
                 the Euclidean metric only"
                    .to_string(),
            ));
        }
    };

    let fg = label.data.mapv(|v| v == 1);
    let bg = label.data.mapv(|v| v == 0);
    let (to_bg, to_fg) = match metric {
        Metric::Euclidean => (
            euclidean_distance_to_set(&bg, spacing),
            euclidean_distance_to_set(&fg, spacing),
        ),
        Metric::Chebyshev => (
            chebyshev_distance_to_set(&bg),
            chebyshev_distance_to_set(&fg),
        ),
    };
    let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |idx| {
        if label.data[idx] == 1 {
            to_bg[idx]
        } else {
            -to_fg[idx]
        }
    });
    Ok(DistanceMap { data, metric, units })
}

/// Unsigned distance from every voxel to the nearest voxel of `sites`
/// (zero on the sites themselves). Euclidean metric with the given spacing.
pub fn distance_to_set(sites: &Array3<bool>, spacing: [f64; 3]) -> Result<Array3<f64>> {
    if !sites.iter().any(|s| *s) {
        return Err(Error::EmptyMask(
            "distance_to_set needs at least one site voxel".to_string(),
        ));
    }
    Ok(euclidean_distance_to_set(sites, spacing))
}

/// Exact Euclidean distance transform: separable lower-envelope method over
/// squared distances, one pass per axis, with anisotropic sample positions.
fn euclidean_distance_to_set(sites: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let dims = sites.dim();
    let mut sq = Array3::from_shape_fn(dims, |idx| if sites[idx] { 0.0 } else { f64::INFINITY });

    // axis 0
    {
        let mut line = vec![0.0f64; dims.0];
        let mut out = vec![0.0f64; dims.0];
        for j in 0..dims.1 {
            for k in 0..dims.2 {
                for i in 0..dims.0 {
                    line[i] = sq[[i, j, k]];
                }
                dt_1d(&line, spacing[0], &mut out);
                for i in 0..dims.0 {
                    sq[[i, j, k]] = out[i];
                }
            }
        }
    }
    // axis 1
    {
        let mut line = vec![0.0f64; dims.1];
        let mut out = vec![0.0f64; dims.1];
        for i in 0..dims.0 {
            for k in 0..dims.2 {
                for j in 0..dims.1 {
                    line[j] = sq[[i, j, k]];
                }
                dt_1d(&line, spacing[1], &mut out);
                for j in 0..dims.1 {
                    sq[[i, j, k]] = out[j];
                }
            }
        }
    }
    // axis 2
    {
        let mut line = vec![0.0f64; dims.2];
        let mut out = vec![0.0f64; dims.2];
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                for k in 0..dims.2 {
                    line[k] = sq[[i, j, k]];
                }
                dt_1d(&line, spacing[2], &mut out);
                for k in 0..dims.2 {
                    sq[[i, j, k]] = out[k];
                }
            }
        }
    }
    sq.mapv(f64::sqrt)
}

/// 1-D squared-distance transform of a sampled function: for each sample
/// position q*s, the minimum over i of f[i] + (q*s - i*s)^2, computed via
/// the lower envelope of the parabola family.
fn dt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    // v[k]: abscissa index of the k-th parabola in the envelope
    // z[k]: left boundary of the k-th parabola's active interval
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let xq = q as f64 * s;
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let xp = p as f64 * s;
            // intersection of parabolas rooted at xp and xq
            let sect = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * xq - 2.0 * xp);
            if sect <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = sect;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = q as f64 * s;
        while z[k + 1] < xq {
            k += 1;
        }
        let xp = v[k] as f64 * s;
        *o = (xq - xp) * (xq - xp) + f[v[k]];
    }
}

/// Exact Chebyshev (chessboard) distance transform: forward and backward
/// raster sweeps over the 26-neighborhood half-masks.
fn chebyshev_distance_to_set(sites: &Array3<bool>) -> Array3<f64> {
    let dims = sites.dim();
    let big = u32::MAX / 2;
    let mut d = Array3::from_shape_fn(dims, |idx| if sites[idx] { 0u32 } else { big });

    let offsets: Vec<[isize; 3]> = {
        let mut v = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dz, dy, dx) != (0, 0, 0) {
                        v.push([dz, dy, dx]);
                    }
                }
            }
        }
        v
    };
    let earlier = |o: &[isize; 3]| {
        o[0] < 0 || (o[0] == 0 && (o[1] < 0 || (o[1] == 0 && o[2] < 0)))
    };
    let forward: Vec<[isize; 3]> = offsets.iter().copied().filter(earlier).collect();
    let backward: Vec<[isize; 3]> = offsets.iter().copied().filter(|o| !earlier(o)).collect();

    let mut sweep = |order_fwd: bool, mask: &[[isize; 3]]| {
        let idxs: Vec<usize> = if order_fwd {
            (0..dims.0).collect()
        } else {
            (0..dims.0).rev().collect()
        };
        let jdxs: Vec<usize> = if order_fwd {
            (0..dims.1).collect()
        } else {
            (0..dims.1).rev().collect()
        };
        let kdxs: Vec<usize> = if order_fwd {
            (0..dims.2).collect()
        } else {
            (0..dims.2).rev().collect()
        };
        for &i in &idxs {
            for &j in &jdxs {
                for &k in &kdxs {
                    let mut best = d[[i, j, k]];
                    for o in mask {
                        let ni = i as isize + o[0];
                        let nj = j as isize + o[1];
                        let nk = k as isize + o[2];
                        if ni < 0
                            || nj < 0
                            || nk < 0
                            || ni >= dims.0 as isize
                            || nj >= dims.1 as isize
                            || nk >= dims.2 as isize
                        {
                            continue;
                        }
                        let cand = d[[ni as usize, nj as usize, nk as usize]] + 1;
                        if cand < best {
                            best = cand;
                        }
                    }
                    d[[i, j, k]] = best;
                }
            }
        }
    };
    sweep(true, &forward);
    sweep(false, &backward);
    d.mapv(|v| v as f64)
}

/// Integer box-filter window sums of a binary label: for each voxel, the
/// number of foreground voxels in the centered K^3 window (zero padding).
fn window_sums(label: &Array3<u8>, k: usize) -> Array3<i64> {
    let dims = label.dim();
    let r = (k - 1) / 2;
    // 3D inclusive prefix sums with a one-voxel zero border.
    let mut prefix = Array3::<i64>::zeros((dims.0 + 1, dims.1 + 1, dims.2 + 1));
    for i in 0..dims.0 {
        for j in 0..dims.1 {
            for kk in 0..dims.2 {
                let v = label[[i, j, kk]] as i64;
                prefix[[i + 1, j + 1, kk + 1]] = v
                    + prefix[[i, j + 1, kk + 1]]
                    + prefix[[i + 1, j, kk + 1]]
                    + prefix[[i + 1, j + 1, kk]]
                    - prefix[[i, j, kk + 1]]
                    - prefix[[i, j + 1, kk]]
                    - prefix[[i + 1, j, kk]]
                    + prefix[[i, j, kk]];
            }
        }
    }
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize) as usize;
    Array3::from_shape_fn(dims, |(i, j, kk)| {
        let lo = [
            clamp(i as isize - r as isize, dims.0),
            clamp(j as isize - r as isize, dims.1),
            clamp(kk as isize - r as isize, dims.2),
        ];
        let hi = [
            clamp(i as isize + r as isize + 1, dims.0),
            clamp(j as isize + r as isize + 1, dims.1),
            clamp(kk as isize + r as isize + 1, dims.2),
        ];
        prefix[[hi[0], hi[1], hi[2]]]
            - prefix[[lo[0], hi[1], hi[2]]]
            - prefix[[hi[0], lo[1], hi[2]]]
            - prefix[[hi[0], hi[1], lo[2]]]
            + prefix[[lo[0], lo[1], hi[2]]]
            + prefix[[lo[0], hi[1], lo[2]]]
            + prefix[[hi[0], lo[1], lo[2]]]
            - prefix[[lo[0], lo[1], lo[2]]]
    })
}

/// Boundary band from box-average pooling with an odd kernel K.
///
/// A voxel is in the band iff its pooled value lies strictly in (0, 1);
/// with zero padding this is `0 < window sum < K^3` on integer counts.
/// An all-background or all-foreground label has no boundary and yields an
/// empty band.
pub fn boundary_band_conv(label: &LabelMap, k: usize) -> Result<BoundaryBand> {
    if k % 2 == 0 || k < 3 {
        return Err(Error::InvalidArgument(format!(
            "pooling kernel must be odd and >= 3, got {k}"
        )));
    }
    let dims = label.data.dim();
    let half_width = (k - 1) / 2;
    if label.is_empty() || label.is_full() {
        let zero = Array3::<u8>::zeros(dims);
        return Ok(BoundaryBand {
            inner: LabelMap::new(zero.clone(), label.spacing)?,
            outer: LabelMap::new(zero, label.spacing)?,
            half_width,
            kernel_size: k,
        });
    }
    let full = (k * k * k) as i64;
    let sums = window_sums(&label.data, k);
    let mut inner = Array3::<u8>::zeros(dims);
    let mut outer = Array3::<u8>::zeros(dims);
    for ((idx, &s), &y) in sums.indexed_iter().zip(label.data.iter()) {
        if s > 0 && s < full {
            if y == 1 {
                inner[idx] = 1;
            } else {
                outer[idx] = 1;
            }
        }
    }
    Ok(BoundaryBand {
        inner: LabelMap::new(inner, label.spacing)?,
        outer: LabelMap::new(outer, label.spacing)?,
        half_width,
        kernel_size: k,
    })
}

/// Assemble the per-voxel weight map `w_c + w_delta` from the boundary band.
pub fn weight_map(label: &LabelMap, k: usize, w1: f64, w2: f64, w_c: f64) -> Result<WeightMap> {
    if w1 < 0.0 || w2 < 0.0 || w_c < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "weights must be nonnegative, got w1={w1} w2={w2} w_c={w_c}"
        )));
    }
    let band = boundary_band_conv(label, k)?;
    let dims = label.data.dim();
    let mut data = Array3::from_elem(dims, w_c);
    for (idx, v) in band.inner.data.indexed_iter() {
        if *v == 1 {
            data[idx] = w_c + w1;
        }
    }
    for (idx, v) in band.outer.data.indexed_iter() {
        if *v == 1 {
            data[idx] = w_c + w2;
        }
    }
    Ok(WeightMap {
        data,
        params: WeightParams {
            w1,
            w2,
            w_c,
            kernel_size: k,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn label_from(data: Array3<u8>) -> LabelMap {
        LabelMap::new(data, [1.0, 1.0, 1.0]).unwrap()
    }

    /// Random blob mask: union of a few random balls.
    pub(crate) fn random_blob(shape: usize, rng: &mut impl Rng) -> LabelMap {
        let n_balls = rng.random_range(1..=3);
        let mut data = Array3::<u8>::zeros((shape, shape, shape));
        for _ in 0..n_balls {
            let c = [
                rng.random_range(0.25 * shape as f64..0.75 * shape as f64),
                rng.random_range(0.25 * shape as f64..0.75 * shape as f64),
                rng.random_range(0.25 * shape as f64..0.75 * shape as f64),
            ];
            let r = rng.random_range(shape as f64 / 8.0..shape as f64 / 4.0);
            for ((i, j, k), v) in data.indexed_iter_mut() {
                let d2 = (i as f64 - c[0]).powi(2)
                    + (j as f64 - c[1]).powi(2)
                    + (k as f64 - c[2]).powi(2);
                if d2 <= r * r {
                    *v = 1;
                }
            }
        }
        if !data.iter().any(|v| *v == 1) {
            data[[shape / 2, shape / 2, shape / 2]] = 1;
        }
        label_from(data)
    }

    /// O(n^2) brute-force signed distance for the oracle tests.
    fn brute_force_signed(label: &LabelMap, metric: Metric) -> Array3<f64> {
        let dims = label.data.dim();
        let fg: Vec<[f64; 3]> = label
            .data
            .indexed_iter()
            .filter(|(_, v)| **v == 1)
            .map(|((i, j, k), _)| [i as f64, j as f64, k as f64])
            .collect();
        let bg: Vec<[f64; 3]> = label
            .data
            .indexed_iter()
            .filter(|(_, v)| **v == 0)
            .map(|((i, j, k), _)| [i as f64, j as f64, k as f64])
            .collect();
        let dist = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
            let d = [(a[0] - b[0]).abs(), (a[1] - b[1]).abs(), (a[2] - b[2]).abs()];
            match metric {
                Metric::Euclidean => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(),
                Metric::Chebyshev => d[0].max(d[1]).max(d[2]),
            }
        };
        Array3::from_shape_fn(dims, |(i, j, k)| {
            let p = [i as f64, j as f64, k as f64];
            if label.data[[i, j, k]] == 1 {
                bg.iter().map(|q| dist(&p, q)).fold(f64::INFINITY, f64::min)
            } else {
                -fg.iter().map(|q| dist(&p, q)).fold(f64::INFINITY, f64::min)
            }
        })
    }

    #[test]
    fn single_voxel_chebyshev_neighbors() {
        let mut data = Array3::<u8>::zeros((5, 5, 5));
        data[[2, 2, 2]] = 1;
        let label = label_from(data);
        let d = signed_distance_exact(&label, Metric::Chebyshev, Units::Voxel).unwrap();
        // the foreground voxel itself: +1 (nearest background is adjacent)
        assert_eq!(d.data[[2, 2, 2]], 1.0);
        // all 26 neighbors: -1
        for i in 1..=3usize {
            for j in 1..=3usize {
                for k in 1..=3usize {
                    if (i, j, k) != (2, 2, 2) {
                        assert_eq!(d.data[[i, j, k]], -1.0, "at {i},{j},{k}");
                    }
                }
            }
        }
        assert_eq!(d.data[[0, 2, 2]], -2.0);
    }

    #[test]
    fn half_space_euclidean_ramp() {
        // foreground z >= 3 on an 8-slab: |distance| ramps away from the plane
        let data = Array3::from_shape_fn((4, 4, 8), |(_, _, k)| u8::from(k >= 3));
        let label = label_from(data);
        let d = signed_distance_exact(&label, Metric::Euclidean, Units::Voxel).unwrap();
        for k in 0..8usize {
            let expected = if k >= 3 {
                (k - 2) as f64 // distance to nearest background at z=2
            } else {
                -((3 - k) as f64) // distance to nearest foreground at z=3
            };
            assert_eq!(d.data[[1, 2, k]], expected, "slice {k}");
        }
    }

    #[test]
    fn random_blob_matches_brute_force_both_metrics() {
        let mut rng = crate::rng::stream(21, "boundary-test", &[]);
        for trial in 0..4u64 {
            let label = random_blob(12, &mut rng);
            for metric in [Metric::Euclidean, Metric::Chebyshev] {
                let fast = signed_distance_exact(&label, metric, Units::Voxel).unwrap();
                let brute = brute_force_signed(&label, metric);
                for (a, b) in fast.data.iter().zip(brute.iter()) {
                    assert!(
                        (a - b).abs() < 1e-9,
                        "trial {trial} {metric:?}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn anisotropic_euclidean_matches_brute_force() {
        let mut rng = crate::rng::stream(22, "boundary-test", &[]);
        let mut label = random_blob(10, &mut rng);
        label.spacing = [3.0, 3.0, 6.0];
        let fast = signed_distance_exact(&label, Metric::Euclidean, Units::Mm).unwrap();
        // brute force with mm spacing
        let dims = label.data.dim();
        for ((i, j, k), &v) in label.data.indexed_iter() {
            let mut best = f64::INFINITY;
            for ((a, b, c), &w) in label.data.indexed_iter() {
                if w != v {
                    let d2 = (3.0 * (i as f64 - a as f64)).powi(2)
                        + (3.0 * (j as f64 - b as f64)).powi(2)
                        + (6.0 * (k as f64 - c as f64)).powi(2);
                    best = best.min(d2.sqrt());
                }
            }
            let expected = if v == 1 { best } else { -best };
            assert!(
                (fast.data[[i, j, k]] - expected).abs() < 1e-9,
                "at {i},{j},{k} of {dims:?}"
            );
        }
    }

    #[test]
    fn single_class_labels_error() {
        let label = label_from(Array3::zeros((4, 4, 4)));
        assert!(matches!(
            signed_distance_exact(&label, Metric::Euclidean, Units::Voxel),
            Err(Error::SingleClassLabel { .. })
        ));
        let label = label_from(Array3::ones((4, 4, 4)));
        assert!(signed_distance_exact(&label, Metric::Euclidean, Units::Voxel).is_err());
    }

    #[test]
    fn chebyshev_mm_rejected() {
        let mut data = Array3::<u8>::zeros((4, 4, 4));
        data[[2, 2, 2]] = 1;
        let label = label_from(data);
        assert!(signed_distance_exact(&label, Metric::Chebyshev, Units::Mm).is_err());
    }

    #[test]
    fn empty_label_empty_band() {
        let label = label_from(Array3::zeros((6, 6, 6)));
        let band = boundary_band_conv(&label, 3).unwrap();
        assert!(band.is_empty());
        let label = label_from(Array3::ones((6, 6, 6)));
        let band = boundary_band_conv(&label, 5).unwrap();
        assert!(band.is_empty());
    }

    #[test]
    fn single_voxel_band_k3() {
        let mut data = Array3::<u8>::zeros((7, 7, 7));
        data[[3, 3, 3]] = 1;
        let label = label_from(data);
        let band = boundary_band_conv(&label, 3).unwrap();
        assert_eq!(band.half_width, 1);
        assert_eq!(band.inner.count(), 1);
        assert_eq!(band.inner.data[[3, 3, 3]], 1);
        assert_eq!(band.outer.count(), 26);
        for i in 2..=4usize {
            for j in 2..=4usize {
                for k in 2..=4usize {
                    if (i, j, k) != (3, 3, 3) {
                        assert_eq!(band.outer.data[[i, j, k]], 1);
                    }
                }
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let mut data = Array3::<u8>::zeros((4, 4, 4));
        data[[1, 1, 1]] = 1;
        let label = label_from(data);
        assert!(boundary_band_conv(&label, 4).is_err());
        assert!(boundary_band_conv(&label, 1).is_err());
    }

    #[test]
    fn band_equals_chebyshev_sdt_band_in_interior() {
        let mut rng = crate::rng::stream(23, "boundary-test", &[]);
        for _ in 0..6 {
            let label = random_blob(16, &mut rng);
            for k in [3usize, 5] {
                let band = boundary_band_conv(&label, k).unwrap();
                let delta = (k - 1) / 2;
                let sdt = signed_distance_exact(&label, Metric::Chebyshev, Units::Voxel).unwrap();
                let dims = label.data.dim();
                for ((i, j, kk), d) in sdt.data.indexed_iter() {
                    let interior = i >= delta
                        && j >= delta
                        && kk >= delta
                        && i + delta < dims.0
                        && j + delta < dims.1
                        && kk + delta < dims.2;
                    if !interior {
                        continue;
                    }
                    let in_band = band.inner.data[[i, j, kk]] == 1
                        || band.outer.data[[i, j, kk]] == 1;
                    let oracle = d.abs() <= delta as f64;
                    assert_eq!(in_band, oracle, "K={k} at {i},{j},{kk}: d={d}");
                }
            }
        }
    }

    #[test]
    fn band_monotone_in_kernel_size() {
        let mut rng = crate::rng::stream(24, "boundary-test", &[]);
        for _ in 0..4 {
            let label = random_blob(14, &mut rng);
            let small = boundary_band_conv(&label, 3).unwrap();
            let large = boundary_band_conv(&label, 5).unwrap();
            for (idx, v) in small.inner.data.indexed_iter() {
                if *v == 1 {
                    assert_eq!(large.inner.data[idx], 1);
                }
            }
            for (idx, v) in small.outer.data.indexed_iter() {
                if *v == 1 {
                    assert_eq!(large.outer.data[idx], 1);
                }
            }
        }
    }

    #[test]
    fn complement_swaps_bands_in_interior() {
        let mut rng = crate::rng::stream(25, "boundary-test", &[]);
        let label = random_blob(14, &mut rng);
        let complement = label_from(label.data.mapv(|v| 1 - v));
        let k = 5usize;
        let delta = (k - 1) / 2;
        let band = boundary_band_conv(&label, k).unwrap();
        let band_c = boundary_band_conv(&complement, k).unwrap();
        let dims = label.data.dim();
        for ((i, j, kk), _) in label.data.indexed_iter() {
            let interior = i >= delta
                && j >= delta
                && kk >= delta
                && i + delta < dims.0
                && j + delta < dims.1
                && kk + delta < dims.2;
            if !interior {
                continue; // zero padding breaks the symmetry on the frame
            }
            assert_eq!(band.inner.data[[i, j, kk]], band_c.outer.data[[i, j, kk]]);
            assert_eq!(band.outer.data[[i, j, kk]], band_c.inner.data[[i, j, kk]]);
        }
    }

    #[test]
    fn weight_map_three_values() {
        let mut rng = crate::rng::stream(26, "boundary-test", &[]);
        let label = random_blob(16, &mut rng);
        let w = weight_map(&label, 11, 1.0, 40.0, 1.0).unwrap();
        for v in w.data.iter() {
            assert!(
                *v == 1.0 || *v == 2.0 || *v == 41.0,
                "unexpected weight {v}"
            );
        }
        // all three values occur for a proper blob on this grid
        assert!(w.data.iter().any(|v| *v == 2.0));
        assert!(w.data.iter().any(|v| *v == 41.0));
    }

    #[test]
    fn zero_band_weights_reduce_to_class_weighting() {
        let mut rng = crate::rng::stream(27, "boundary-test", &[]);
        let label = random_blob(10, &mut rng);
        let w = weight_map(&label, 3, 0.0, 0.0, 2.5).unwrap();
        assert!(w.data.iter().all(|v| *v == 2.5));
    }

    #[test]
    fn single_voxel_weight_map_hand_example() {
        let mut data = Array3::<u8>::zeros((7, 7, 7));
        data[[3, 3, 3]] = 1;
        let label = label_from(data);
        let w = weight_map(&label, 3, 1.0, 40.0, 0.0).unwrap();
        assert_eq!(w.data[[3, 3, 3]], 1.0);
        let at_w2 = w.data.iter().filter(|v| **v == 40.0).count();
        assert_eq!(at_w2, 26);
        let at_zero = w.data.iter().filter(|v| **v == 0.0).count();
        assert_eq!(at_zero, 7 * 7 * 7 - 27);
    }

    #[test]
    fn weight_map_is_deterministic() {
        let mut rng = crate::rng::stream(28, "boundary-test", &[]);
        let label = random_blob(12, &mut rng);
        let a = weight_map(&label, 5, 1.0, 40.0, 1.0).unwrap();
        let b = weight_map(&label, 5, 1.0, 40.0, 1.0).unwrap();
        assert_eq!(a.data, b.data);
    }
}
