//! Stochastic training-time augmentation.
//!
//! Spatial transforms (affine, elastic) warp image and label with the same
//! geometric map — trilinear for the image, nearest-neighbor for the label,
//! so labels stay binary. Intensity transforms (noise, global scale,
//! placental shift) never touch the label. The composite applies spatial
//! before intensity transforms, each with its configured probability, and is
//! fully deterministic given the RNG stream.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{LabelMap, Volume};

/// Augmentation magnitudes and per-transform application probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Max |translation| per axis, voxels.
    pub max_translation: f64,
    /// Max |rotation| per axis, degrees.
    pub max_rotation_deg: f64,
    /// Axes eligible for random flips.
    pub flip_axes: Vec<usize>,
    /// Std of additive Gaussian noise (mean 0), normalized units.
    pub noise_sigma: f64,
    /// Elastic deformation control points per axis.
    pub elastic_control_points: usize,
    /// Max |elastic displacement| per control point per axis, voxels.
    pub elastic_max_displacement: f64,
    /// Whole-volume multiplicative shift bound: factor in 1 +/- this.
    pub global_shift_frac: f64,
    /// Additive whole-placenta shift bound, normalized units.
    pub placenta_shift: f64,
    pub enable_affine: bool,
    pub enable_elastic: bool,
    pub enable_noise: bool,
    pub enable_global_shift: bool,
    pub enable_placenta_shift: bool,
    /// Probability of applying each enabled transform.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_translation: 10.0,
            max_rotation_deg: 22.0,
            flip_axes: vec![0, 1, 2],
            noise_sigma: 0.25,
            elastic_control_points: 5,
            elastic_max_displacement: 10.0,
            global_shift_frac: 0.25,
            placenta_shift: 0.15,
            enable_affine: true,
            enable_elastic: true,
            enable_noise: true,
            enable_global_shift: true,
            enable_placenta_shift: true,
            probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Everything disabled; `augment` becomes the identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            enable_affine: false,
            enable_elastic: false,
            enable_noise: false,
            enable_global_shift: false,
            enable_placenta_shift: false,
            ..Default::default()
        }
    }
}

/// An (image, label) training pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Volume,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(image: Volume, label: LabelMap) -> crate::Result<Self> {
        if !label.matches(&image) {
            return Err(crate::Error::shape(
                "sample label vs image",
                &label.shape(),
                &image.shape(),
            ));
        }
        Ok(Sample { image, label })
    }
}

/// Backward warp by an arbitrary source map: image trilinear (zero outside),
/// label nearest-neighbor (background outside).
fn warp_sample(sample: &Sample, src_of: impl Fn([usize; 3]) -> [f64; 3]) -> Sample {
    let dims = sample.image.data.dim();
    let in_bounds = |p: &[f64; 3]| {
        p[0] > -0.5
            && p[1] > -0.5
            && p[2] > -0.5
            && p[0] < dims.0 as f64 - 0.5
            && p[1] < dims.1 as f64 - 0.5
            && p[2] < dims.2 as f64 - 0.5
    };
    let image = Array3::from_shape_fn(dims, |(i, j, k)| {
        let p = src_of([i, j, k]);
        if in_bounds(&p) {
            crate::preprocess::sample_trilinear_clamped(&sample.image.data, p)
        } else {
            0.0
        }
    });
    let label = Array3::from_shape_fn(dims, |(i, j, k)| {
        let p = src_of([i, j, k]);
        if in_bounds(&p) {
            let idx = [
                p[0].round().clamp(0.0, dims.0 as f64 - 1.0) as usize,
                p[1].round().clamp(0.0, dims.1 as f64 - 1.0) as usize,
                p[2].round().clamp(0.0, dims.2 as f64 - 1.0) as usize,
            ];
            sample.label.data[idx]
        } else {
            0
        }
    });
    Sample {
        image: Volume {
            data: image,
            spacing: sample.image.spacing,
            orientation: sample.image.orientation.clone(),
        },
        label: LabelMap {
            data: label,
            spacing: sample.label.spacing,
        },
    }
}

/// Random affine: per-axis translation, rotation about the volume center,
/// and optional axis flips, applied identically to image and label.
pub fn random_affine(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let t: [f64; 3] = std::array::from_fn(|_| {
        rng.random_range(-config.max_translation..=config.max_translation)
    });
    let angles: [f64; 3] = std::array::from_fn(|_| {
        rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg).to_radians()
    });
    let mut flips = [false; 3];
    for &axis in &config.flip_axes {
        if axis < 3 {
            flips[axis] = rng.random_bool(0.5);
        }
    }
    apply_affine(sample, t, angles, flips)
}

/// Deterministic affine warp used by [`random_affine`]; exposed for tests.
pub fn apply_affine(
    sample: &Sample,
    translation: [f64; 3],
    angles_rad: [f64; 3],
    flips: [bool; 3],
) -> Sample {
    let dims = sample.image.data.dim();
    let center = [
        (dims.0 as f64 - 1.0) / 2.0,
        (dims.1 as f64 - 1.0) / 2.0,
        (dims.2 as f64 - 1.0) / 2.0,
    ];
    // rotation matrix R = Rz * Ry * Rx (axis 0 = x by convention here)
    let (sx, cx) = angles_rad[0].sin_cos();
    let (sy, cy) = angles_rad[1].sin_cos();
    let (sz, cz) = angles_rad[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let matmul = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| {
        let mut m = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, bk) in b.iter().enumerate() {
                    m[i][j] += a[i][k] * bk[j];
                }
            }
        }
        m
    };
    let r = matmul(&rz, &matmul(&ry, &rx));
    // backward map: rotate by R^T (inverse), un-translate, un-flip
    let rt = [
        [r[0][0], r[1][0], r[2][0]],
        [r[0][1], r[1][1], r[2][1]],
        [r[0][2], r[1][2], r[2][2]],
    ];
    let dims_f = [dims.0 as f64, dims.1 as f64, dims.2 as f64];
    warp_sample(sample, move |out| {
        let mut p = [
            out[0] as f64 - translation[0] - center[0],
            out[1] as f64 - translation[1] - center[1],
            out[2] as f64 - translation[2] - center[2],
        ];
        p = [
            rt[0][0] * p[0] + rt[0][1] * p[1] + rt[0][2] * p[2],
            rt[1][0] * p[0] + rt[1][1] * p[1] + rt[1][2] * p[2],
            rt[2][0] * p[0] + rt[2][1] * p[1] + rt[2][2] * p[2],
        ];
        let mut src = [p[0] + center[0], p[1] + center[1], p[2] + center[2]];
        for a in 0..3 {
            if flips[a] {
                src[a] = dims_f[a] - 1.0 - src[a];
            }
        }
        src
    })
}

/// A smooth displacement field defined by a coarse control-point grid,
/// trilinearly interpolated to voxel resolution.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    /// [axis][control grid] displacements in voxels.
    pub control: [Array3<f64>; 3],
    pub grid_dims: (usize, usize, usize),
}

impl DisplacementField {
    pub fn zero(control_points: usize) -> Self {
        let n = control_points.max(2);
        DisplacementField {
            control: std::array::from_fn(|_| Array3::zeros((n, n, n))),
            grid_dims: (n, n, n),
        }
    }

    /// Random field with i.i.d. uniform control displacements in
    /// [-max_displacement, +max_displacement].
    pub fn random(control_points: usize, max_displacement: f64, rng: &mut impl Rng) -> Self {
        let n = control_points.max(2);
        let control = std::array::from_fn(|_| {
            Array3::from_shape_fn((n, n, n), |_| {
                rng.random_range(-max_displacement..=max_displacement)
            })
        });
        DisplacementField {
            control,
            grid_dims: (n, n, n),
        }
    }

    /// Displacement at a voxel of a volume with the given dims.
    pub fn at(&self, voxel: [usize; 3], dims: (usize, usize, usize)) -> [f64; 3] {
        let (n0, n1, n2) = self.grid_dims;
        let pos = [
            voxel[0] as f64 / (dims.0 - 1).max(1) as f64 * (n0 - 1) as f64,
            voxel[1] as f64 / (dims.1 - 1).max(1) as f64 * (n1 - 1) as f64,
            voxel[2] as f64 / (dims.2 - 1).max(1) as f64 * (n2 - 1) as f64,
        ];
        std::array::from_fn(|axis| sample_trilinear_f64(&self.control[axis], pos))
    }

    /// Largest |displacement| component over the control grid.
    pub fn max_abs(&self) -> f64 {
        self.control
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn sample_trilinear_f64(data: &Array3<f64>, pos: [f64; 3]) -> f64 {
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
    let mut acc = 0.0;
    for (ci, wi) in [(lo[0], 1.0 - frac[0]), (hi[0], frac[0])] {
        for (cj, wj) in [(lo[1], 1.0 - frac[1]), (hi[1], frac[1])] {
            for (ck, wk) in [(lo[2], 1.0 - frac[2]), (hi[2], frac[2])] {
                let w = wi * wj * wk;
                if w != 0.0 {
                    acc += w * data[[ci, cj, ck]];
                }
            }
        }
    }
    acc
}

/// Warp a sample by a displacement field (backward map:
/// `src = dst + u(dst)`); image trilinear, label nearest.
pub fn apply_displacement(sample: &Sample, field: &DisplacementField) -> Sample {
    let dims = sample.image.data.dim();
    warp_sample(sample, move |out| {
        let u = field.at(out, dims);
        [
            out[0] as f64 + u[0],
            out[1] as f64 + u[1],
            out[2] as f64 + u[2],
        ]
    })
}

/// Random elastic deformation from a coarse control-point grid.
pub fn elastic_deform(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let field = DisplacementField::random(
        config.elastic_control_points,
        config.elastic_max_displacement,
        rng,
    );
    apply_displacement(sample, &field)
}

/// Additive i.i.d. Gaussian noise on the image; label untouched.
pub fn gaussian_noise(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    if config.noise_sigma == 0.0 {
        return sample.clone();
    }
    let normal = Normal::new(0.0, config.noise_sigma).expect("sigma >= 0 checked");
    let image = sample.image.data.mapv(|v| v + normal.sample(rng) as f32);
    Sample {
        image: Volume {
            data: image,
            spacing: sample.image.spacing,
            orientation: sample.image.orientation.clone(),
        },
        label: sample.label.clone(),
    }
}

/// Whole-volume multiplicative intensity shift: `image *= 1 + u`,
/// `u ~ U[-frac, +frac]`.
pub fn intensity_shift_global(
    sample: &Sample,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Sample {
    let u = rng.random_range(-config.global_shift_frac..=config.global_shift_frac);
    let factor = (1.0 + u) as f32;
    Sample {
        image: Volume {
            data: sample.image.data.mapv(|v| v * factor),
            spacing: sample.image.spacing,
            orientation: sample.image.orientation.clone(),
        },
        label: sample.label.clone(),
    }
}

/// Hyperoxia simulation: constant additive shift inside the placenta mask,
/// `s ~ U[-shift, +shift]` in normalized units; outside unchanged.
pub fn intensity_shift_placenta(
    sample: &Sample,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Sample {
    let s = rng.random_range(-config.placenta_shift..=config.placenta_shift) as f32;
    let mut image = sample.image.data.clone();
    for (v, m) in image.iter_mut().zip(sample.label.data.iter()) {
        if *m == 1 {
            *v += s;
        }
    }
    Sample {
        image: Volume {
            data: image,
            spacing: sample.image.spacing,
            orientation: sample.image.orientation.clone(),
        },
        label: sample.label.clone(),
    }
}

/// Full augmentation pipeline in fixed order: affine -> elastic (spatial),
/// then noise -> global shift -> placenta shift (intensity). Each enabled
/// transform fires with `config.probability`.
///
/// The RNG is consumed in a fixed pattern regardless of which transforms
/// fire, so draws stay aligned across configurations.
pub fn augment(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let mut out = sample.clone();
    let gates: [bool; 5] = std::array::from_fn(|_| rng.random_bool(config.probability));
    if config.enable_affine && gates[0] {
        out = random_affine(&out, config, rng);
    }
    if config.enable_elastic && gates[1] {
        out = elastic_deform(&out, config, rng);
    }
    if config.enable_noise && gates[2] {
        out = gaussian_noise(&out, config, rng);
    }
    if config.enable_global_shift && gates[3] {
        out = intensity_shift_global(&out, config, rng);
    }
    if config.enable_placenta_shift && gates[4] {
        out = intensity_shift_placenta(&out, config, rng);
    }
    out
}
