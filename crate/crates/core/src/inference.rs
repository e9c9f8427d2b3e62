//! Whole-volume prediction, post-processing, and time-series sweep.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PredictionMode;
use crate::model::{forward_volume, UNet};
use crate::volume::{LabelMap, TimeSeries, Volume};

/// Neighborhood used for connected components (default 26).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    fn offsets(&self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dz, dy, dx) == (0, 0, 0) {
                        continue;
                    }
                    let l1 = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => l1 == 1,
                        Connectivity::Eighteen => l1 <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// A prediction outcome: the post-processed mask plus a warning flag when
/// the raw thresholded prediction was empty.
#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub mask: LabelMap,
    pub empty_prediction: bool,
}

/// Keep the largest foreground component under the given connectivity.
///
/// Ties between equal-sized components go to the one containing the
/// lexicographically smallest voxel. Empty input yields empty output.
pub fn largest_component_with(label: &LabelMap, connectivity: Connectivity) -> Result<LabelMap> {
    let dims = label.data.dim();
    let mut component = Array3::<u32>::zeros(dims);
    let offsets = connectivity.offsets();
    let mut sizes: Vec<usize> = vec![0]; // component 0 = background, unused
    let mut first_voxel: Vec<[usize; 3]> = vec![[0, 0, 0]];
    let mut queue: Vec<[usize; 3]> = Vec::new();

    for ((i, j, k), &v) in label.data.indexed_iter() {
        if v != 1 || component[[i, j, k]] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        first_voxel.push([i, j, k]);
        component[[i, j, k]] = id;
        queue.clear();
        queue.push([i, j, k]);
        while let Some(p) = queue.pop() {
            sizes[id as usize] += 1;
            for o in &offsets {
                let ni = p[0] as isize + o[0];
                let nj = p[1] as isize + o[1];
                let nk = p[2] as isize + o[2];
                if ni < 0
                    || nj < 0
                    || nk < 0
                    || ni >= dims.0 as isize
                    || nj >= dims.1 as isize
                    || nk >= dims.2 as isize
                {
                    continue;
                }
                let n = [ni as usize, nj as usize, nk as usize];
                if label.data[n] == 1 && component[n] == 0 {
                    component[n] = id;
                    queue.push(n);
                }
            }
        }
    }

    if sizes.len() == 1 {
        return LabelMap::new(Array3::zeros(dims), label.spacing);
    }
    // argmax size; ties -> lowest lexicographic first voxel (components are
    // discovered in lexicographic order of their smallest voxel, so the
    // earliest id wins)
    let mut best = 1usize;
    for id in 2..sizes.len() {
        if sizes[id] > sizes[best] {
            best = id;
        }
    }
    let best = best as u32;
    let data = component.mapv(|c| u8::from(c == best));
    LabelMap::new(data, label.spacing)
}

/// [`largest_component_with`] at the default 26-connectivity.
pub fn largest_component(label: &LabelMap) -> Result<LabelMap> {
    largest_component_with(label, Connectivity::TwentySix)
}

/// Threshold a raw network output field into a binary mask.
///
/// Probability mode compares against `threshold`; SDT mode takes the
/// nonnegative (inside) region of the predicted distance field.
pub fn threshold_output(
    field: &Array3<f64>,
    mode: PredictionMode,
    threshold: f64,
    spacing: [f32; 3],
) -> Result<LabelMap> {
    let data = match mode {
        PredictionMode::Probability => field.mapv(|p| u8::from(p >= threshold)),
        PredictionMode::Sdt => field.mapv(|d| u8::from(d >= 0.0)),
    };
    LabelMap::new(data, spacing)
}

/// Predict a mask for one preprocessed volume: forward pass, threshold,
/// largest connected component. An empty thresholded prediction returns an
/// empty mask with the warning flag set.
pub fn predict(net: &UNet, volume: &Volume, threshold: f64) -> Result<PredictOutcome> {
    predict_with(net, volume, threshold, Connectivity::TwentySix)
}

pub fn predict_with(
    net: &UNet,
    volume: &Volume,
    threshold: f64,
    connectivity: Connectivity,
) -> Result<PredictOutcome> {
    let field = forward_volume(net, volume)?;
    let mode = net.config.out_mode.prediction_mode();
    let raw = threshold_output(&field, mode, threshold, volume.spacing)?;
    if raw.is_empty() {
        return Ok(PredictOutcome {
            mask: raw,
            empty_prediction: true,
        });
    }
    let mask = largest_component_with(&raw, connectivity)?;
    Ok(PredictOutcome {
        mask,
        empty_prediction: false,
    })
}

/// Predict every `stride`-th frame of a series independently.
///
/// Frames must already be preprocessed identically. Returns
/// frame index -> outcome, with per-frame warning flags preserved.
pub fn predict_series(
    net: &UNet,
    series: &TimeSeries,
    stride: usize,
    threshold: f64,
) -> Result<BTreeMap<usize, PredictOutcome>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".to_string()));
    }
    let mut out = BTreeMap::new();
    let mut t = 0usize;
    while t < series.num_frames() {
        out.insert(t, predict(net, &series.frames[t], threshold)?);
        t += stride;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OutMode, UNetConfig};
    use ndarray::Array3;

    fn label_from(data: Array3<u8>) -> LabelMap {
        LabelMap::new(data, [1.0, 1.0, 1.0]).unwrap()
    }

    fn blob(dims: (usize, usize, usize), center: [usize; 3], r: usize) -> Array3<u8> {
        Array3::from_shape_fn(dims, |(i, j, k)| {
            let d2 = (i as isize - center[0] as isize).pow(2)
                + (j as isize - center[1] as isize).pow(2)
                + (k as isize - center[2] as isize).pow(2);
            u8::from(d2 <= (r * r) as isize)
        })
    }

    #[test]
    fn single_blob_unchanged() {
        let l = label_from(blob((10, 10, 10), [5, 5, 5], 3));
        let out = largest_component(&l).unwrap();
        assert_eq!(out.data, l.data);
    }

    #[test]
    fn larger_blob_wins() {
        let mut data = blob((16, 16, 16), [4, 4, 4], 3);
        let small = blob((16, 16, 16), [12, 12, 12], 1);
        for (idx, v) in small.indexed_iter() {
            if *v == 1 {
                data[idx] = 1;
            }
        }
        let l = label_from(data);
        let out = largest_component(&l).unwrap();
        assert!(out.count() < l.count());
        assert_eq!(out.data[[4, 4, 4]], 1);
        assert_eq!(out.data[[12, 12, 12]], 0);
    }

    #[test]
    fn tie_goes_to_lexicographically_first() {
        let mut data = Array3::<u8>::zeros((8, 8, 8));
        data[[1, 1, 1]] = 1;
        data[[6, 6, 6]] = 1;
        let l = label_from(data);
        let out = largest_component(&l).unwrap();
        assert_eq!(out.count(), 1);
        assert_eq!(out.data[[1, 1, 1]], 1);
    }

    #[test]
    fn empty_input_empty_output() {
        let l = label_from(Array3::zeros((6, 6, 6)));
        let out = largest_component(&l).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn diagonal_voxels_connected_under_26_not_6() {
        let mut data = Array3::<u8>::zeros((6, 6, 6));
        data[[2, 2, 2]] = 1;
        data[[3, 3, 3]] = 1;
        let l = label_from(data);
        let c26 = largest_component_with(&l, Connectivity::TwentySix).unwrap();
        assert_eq!(c26.count(), 2);
        let c6 = largest_component_with(&l, Connectivity::Six).unwrap();
        assert_eq!(c6.count(), 1);
    }

    /// Independent flood-fill oracle on 26-connectivity.
    fn flood_fill_components(label: &LabelMap) -> Vec<usize> {
        let dims = label.data.dim();
        let mut seen = Array3::<bool>::from_elem(dims, false);
        let mut sizes = Vec::new();
        for ((i, j, k), &v) in label.data.indexed_iter() {
            if v != 1 || seen[[i, j, k]] {
                continue;
            }
            let mut size = 0usize;
            let mut stack = vec![[i, j, k]];
            seen[[i, j, k]] = true;
            while let Some(p) = stack.pop() {
                size += 1;
                for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let n = [
                                p[0] as isize + dz,
                                p[1] as isize + dy,
                                p[2] as isize + dx,
                            ];
                            if n.iter().any(|x| *x < 0)
                                || n[0] >= dims.0 as isize
                                || n[1] >= dims.1 as isize
                                || n[2] >= dims.2 as isize
                            {
                                continue;
                            }
                            let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                            if label.data[n] == 1 && !seen[n] {
                                seen[n] = true;
                                stack.push(n);
                            }
                        }
                    }
                }
            }
            sizes.push(size);
        }
        sizes
    }

    #[test]
    fn random_masks_agree_with_flood_fill_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(90, "inference-test", &[]);
        for _ in 0..5 {
            let data = Array3::from_shape_fn((12, 12, 12), |_| {
                u8::from(rng.random_range(0.0f64..1.0) < 0.25)
            });
            let l = label_from(data);
            let out = largest_component(&l).unwrap();
            let sizes = flood_fill_components(&l);
            let expected_max = sizes.iter().copied().max().unwrap_or(0);
            assert_eq!(out.count(), expected_max);
            // output is a subset of the input and itself connected
            for (a, b) in out.data.iter().zip(l.data.iter()) {
                assert!(*a <= *b);
            }
            if !out.is_empty() {
                let again = largest_component(&out).unwrap();
                assert_eq!(again.count(), out.count());
            }
        }
    }

    #[test]
    fn threshold_modes() {
        let field = Array3::from_shape_fn((4, 4, 4), |(i, _, _)| i as f64 / 4.0 - 0.1);
        let prob = field.mapv(|v| v.clamp(0.0, 1.0));
        let m = threshold_output(&prob, PredictionMode::Probability, 0.5, [1.0; 3]).unwrap();
        // i = 3 gives 0.65 >= 0.5; lower slices stay background
        assert_eq!(m.count(), 16);
        let m_sdt = threshold_output(&field, PredictionMode::Sdt, 0.5, [1.0; 3]).unwrap();
        for ((idx, v), f) in m_sdt.data.indexed_iter().zip(field.iter()) {
            assert_eq!(*v == 1, *f >= 0.0, "{idx:?}");
        }
    }

    #[test]
    fn rethresholding_binary_map_is_identity() {
        let l = label_from(blob((8, 8, 8), [4, 4, 4], 2));
        let as_field = l.data.mapv(|v| v as f64);
        let again =
            threshold_output(&as_field, PredictionMode::Probability, 0.5, [1.0; 3]).unwrap();
        assert_eq!(again.data, l.data);
    }

    #[test]
    fn predict_series_stride_pattern() {
        let cfg = UNetConfig {
            levels: 2,
            base_width: 2,
            in_channels: 1,
            out_mode: OutMode::TwoClassSoftmax,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        let net = UNet::new(cfg, 3).unwrap();
        let frame = Volume::new(Array3::from_elem((8, 8, 8), 0.5), [1.0; 3]).unwrap();
        let frames: Vec<Volume> = (0..10).map(|_| frame.clone()).collect();
        let phase = vec![crate::volume::Phase::Normoxia1; 10];
        let series = TimeSeries::new("s", frames, phase, Default::default()).unwrap();

        let out = predict_series(&net, &series, 2, 0.5).unwrap();
        let keys: Vec<usize> = out.keys().copied().collect();
        assert_eq!(keys, vec![0, 2, 4, 6, 8]);

        let all = predict_series(&net, &series, 1, 0.5).unwrap();
        assert_eq!(all.len(), 10);

        // identical frames give identical masks
        let masks: Vec<&LabelMap> = out.values().map(|o| &o.mask).collect();
        for m in &masks[1..] {
            assert_eq!(m.data, masks[0].data);
        }
        assert!(predict_series(&net, &series, 0, 0.5).is_err());
    }
}
