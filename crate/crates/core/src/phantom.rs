//! Synthetic BOLD time-series generator: thin-shell subjects with dense
//! ground truth and a known oxygenation schedule.
//!
//! The phantom is not anatomically realistic; it reproduces the challenge
//! axes that matter for benchmarking — a thin curved shell, low boundary
//! contrast against a distractor blob, intensity nonstationarity from the
//! oxygenation paradigm, and temporally correlated smooth motion. Each
//! subject is a static scene (smooth background texture, distractor blob,
//! shell with its own texture) warped per frame by an AR(1) control-point
//! displacement field; shell intensities scale with `1 + A * s(t)` before
//! acquisition noise, so the noiseless, motion-free hyperoxia response is
//! exactly `A` by construction.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::DisplacementField;
use crate::error::{Error, Result};
use crate::inference;
use crate::rng;
use crate::trainer::Subject;
use crate::volume::{Cohort, LabelMap, Phase, Plurality, SubjectRecord, TimeSeries, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Cubic grid edge; must be divisible by 16 for the 4-level network.
    pub grid: usize,
    /// Shell mid-radius range as a fraction of the grid edge.
    pub radius_frac: [f64; 2],
    /// Shell thickness range in voxels.
    pub thickness: [f64; 2],
    /// Angular extent of the spherical cap, degrees.
    pub angular_extent_deg: [f64; 2],
    pub background_mean: f64,
    /// Amplitude of the smooth background texture field.
    pub background_std: f64,
    pub placenta_mean: f64,
    /// Amplitude of the smooth within-shell texture.
    pub placenta_std: f64,
    /// Adjacent "fetal" blobs tangent to the shell's concave side: count
    /// range, intensity range (close to the shell's, so the contact
    /// boundary is low-contrast), and radius range.
    pub fetus_blobs: [usize; 2],
    pub fetus_intensity: [f64; 2],
    pub fetus_radius_frac: [f64; 2],
    /// Shell-like decoy fragments elsewhere in the volume.
    pub decoy_arcs: [usize; 2],
    /// Frames per series.
    pub frames: usize,
    /// normoxia1 / hyperoxia / normoxia2 block lengths; must sum to frames.
    pub phase_lengths: [usize; 3],
    /// Hyperoxia amplitude A: shell intensity scales by 1 + A at plateau.
    pub hyperoxia_amplitude: f64,
    /// Frames for the linear ramp into (and out of) the plateau.
    pub ramp_time: usize,
    /// Max |displacement| clamp in voxels.
    pub motion_amplitude: f64,
    /// Stationary std of the control-point displacements.
    pub motion_std: f64,
    /// AR(1) temporal correlation of the motion field.
    pub motion_correlation: f64,
    pub motion_control_points: usize,
    /// Acquisition noise std.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            grid: 64,
            radius_frac: [0.28, 0.36],
            thickness: [2.5, 4.0],
            angular_extent_deg: [130.0, 210.0],
            background_mean: 0.35,
            background_std: 0.10,
            placenta_mean: 0.85,
            placenta_std: 0.05,
            fetus_blobs: [1, 1],
            fetus_intensity: [0.70, 0.88],
            fetus_radius_frac: [0.14, 0.22],
            decoy_arcs: [1, 2],
            frames: 30,
            phase_lengths: [10, 10, 10],
            hyperoxia_amplitude: 0.15,
            ramp_time: 3,
            motion_amplitude: 3.0,
            motion_std: 1.2,
            motion_correlation: 0.95,
            motion_control_points: 4,
            noise_sigma: 0.06,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.grid % 16 != 0 {
            return Err(Error::Config(format!(
                "phantom grid must be a positive multiple of 16, got {}",
                self.grid
            )));
        }
        if self.phase_lengths.iter().sum::<usize>() != self.frames {
            return Err(Error::Config(format!(
                "phase lengths {:?} must sum to frames = {}",
                self.phase_lengths, self.frames
            )));
        }
        if self.thickness[0] < 1.0 {
            return Err(Error::Config("shell thickness must be >= 1 voxel".to_string()));
        }
        if self.hyperoxia_amplitude < 0.0 || self.motion_amplitude < 0.0 {
            return Err(Error::Config("amplitudes must be nonnegative".to_string()));
        }
        Ok(())
    }

    pub fn phase_of(&self, t: usize) -> Phase {
        if t < self.phase_lengths[0] {
            Phase::Normoxia1
        } else if t < self.phase_lengths[0] + self.phase_lengths[1] {
            Phase::Hyperoxia
        } else {
            Phase::Normoxia2
        }
    }
}

/// Ground truth that only the generator knows: the oxygenation signal and
/// the per-frame deformation fields.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub signal: Vec<f64>,
    pub fields: Vec<DisplacementField>,
}

/// A generated subject: fully labeled series plus generator ground truth.
#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub record: SubjectRecord,
    pub series: TimeSeries,
    pub truth: PhantomTruth,
}

impl PhantomSubject {
    pub fn into_subject(self) -> Subject {
        Subject {
            record: self.record,
            series: self.series,
        }
    }

    pub fn to_subject(&self) -> Subject {
        Subject {
            record: self.record.clone(),
            series: self.series.clone(),
        }
    }
}

/// Geometry of a spherical-cap shell.
#[derive(Debug, Clone, Copy)]
struct CapGeometry {
    center: [f64; 3],
    axis: [f64; 3],
    r_in: f64,
    r_out: f64,
    cos_half: f64,
}

fn random_axis(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0f64..=1.0),
            rng.random_range(-1.0f64..=1.0),
            rng.random_range(-1.0f64..=1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.2 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn cap_mask(geom: &CapGeometry, grid: usize) -> Array3<u8> {
    Array3::from_shape_fn((grid, grid, grid), |(i, j, k)| {
        let p = [
            i as f64 - geom.center[0],
            j as f64 - geom.center[1],
            k as f64 - geom.center[2],
        ];
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if r < geom.r_in || r > geom.r_out || r == 0.0 {
            return 0u8;
        }
        let cos_angle = (p[0] * geom.axis[0] + p[1] * geom.axis[1] + p[2] * geom.axis[2]) / r;
        u8::from(cos_angle >= geom.cos_half)
    })
}

/// Draw a connected cap shell; retries with widened parameters on
/// degenerate draws and errors after 10 attempts.
fn sample_shape(config: &PhantomConfig, rng: &mut impl Rng) -> Result<(LabelMap, CapGeometry)> {
    let g = config.grid as f64;
    for attempt in 0..10u32 {
        let widen = attempt as f64 * 0.25;
        let r_mid = rng.random_range(config.radius_frac[0]..=config.radius_frac[1]) * g;
        let thickness = rng.random_range(config.thickness[0]..=config.thickness[1]) + widen;
        let extent =
            (rng.random_range(config.angular_extent_deg[0]..=config.angular_extent_deg[1])
                + 20.0 * widen)
                .min(360.0);
        let geom = CapGeometry {
            center: std::array::from_fn(|_| {
                (g - 1.0) / 2.0 + rng.random_range(-2.0f64..=2.0)
            }),
            axis: random_axis(rng),
            r_in: r_mid - thickness / 2.0,
            r_out: r_mid + thickness / 2.0,
            cos_half: ((extent / 2.0).to_radians()).cos(),
        };
        let label = LabelMap::new(cap_mask(&geom, config.grid), [1.0; 3])?;
        if label.is_empty() {
            continue;
        }
        let largest = inference::largest_component(&label)?;
        if largest.count() == label.count() {
            return Ok((label, geom));
        }
    }
    Err(Error::Degenerate(
        "could not draw a connected shell in 10 attempts".to_string(),
    ))
}

/// A randomly oriented spherical-cap shell, guaranteed to be one
/// 26-connected component.
pub fn make_placenta_shape(config: &PhantomConfig, rng: &mut impl Rng) -> Result<LabelMap> {
    sample_shape(config, rng).map(|(label, _)| label)
}

/// Oxygenation signal in [0, 1]: zero through normoxia1, linear ramp over
/// `ramp_time` frames into the hyperoxic plateau, linear decay at the start
/// of normoxia2.
pub fn oxygenation_signal(t: usize, config: &PhantomConfig) -> f64 {
    let [n1, h, _] = config.phase_lengths;
    let ramp = config.ramp_time.max(1) as f64;
    if t < n1 {
        0.0
    } else if t < n1 + h {
        (((t - n1) as f64) / ramp).min(1.0)
    } else {
        let since = (t - n1 - h) as f64;
        (1.0 - since / ramp).max(0.0)
    }
}

/// The static per-subject scene that frames are rendered from.
#[derive(Debug, Clone)]
struct Scene {
    background: Array3<f32>,
    shell_value: Array3<f32>,
    shape: LabelMap,
}

/// Smooth random field from a coarse control grid, in [-amplitude, +amplitude].
fn smooth_field(grid: usize, control: usize, amplitude: f64, rng: &mut impl Rng) -> Array3<f32> {
    let field = DisplacementField::random(control, amplitude, rng);
    Array3::from_shape_fn((grid, grid, grid), |(i, j, k)| {
        field.at([i, j, k], (grid, grid, grid))[0] as f32
    })
}

fn paint_ball(
    background: &mut Array3<f32>,
    center: [f64; 3],
    radius: f64,
    intensity: f32,
) {
    for ((i, j, k), v) in background.indexed_iter_mut() {
        let d2 = (i as f64 - center[0]).powi(2)
            + (j as f64 - center[1]).powi(2)
            + (k as f64 - center[2]).powi(2);
        if d2 <= radius * radius {
            // soft edge over ~1.5 voxels
            let d = d2.sqrt();
            let w = ((radius - d) / 1.5).clamp(0.0, 1.0) as f32;
            *v = *v * (1.0 - w) + intensity * w;
        }
    }
}

fn build_scene(config: &PhantomConfig, rng: &mut impl Rng) -> Result<Scene> {
    let g = config.grid;
    let (shape, geom) = sample_shape(config, rng)?;
    let mut background = smooth_field(g, 4, config.background_std, rng)
        .mapv(|v| (config.background_mean as f32 + v).max(0.01));

    // The "fetus": a ball tangent to the shell's concave side, with
    // intensity close to the shell's — the interface between them is the
    // low-contrast boundary this benchmark is about. Shell voxels are
    // painted after the background, so the overlap region is clipped by
    // the mask and the contact is seamless.
    let n_adjacent = rng.random_range(config.fetus_blobs[0]..=config.fetus_blobs[1]);
    for _ in 0..n_adjacent {
        let r_blob =
            rng.random_range(config.fetus_radius_frac[0]..=config.fetus_radius_frac[1])
                * g as f64;
        let d = (geom.r_in - 0.6 * r_blob).max(0.0);
        let center = [
            geom.center[0] + geom.axis[0] * d,
            geom.center[1] + geom.axis[1] * d,
            geom.center[2] + geom.axis[2] * d,
        ];
        let intensity =
            rng.random_range(config.fetus_intensity[0]..=config.fetus_intensity[1]) as f32;
        paint_ball(&mut background, center, r_blob, intensity);
    }

    // Decoy arcs: shell-like fragments elsewhere in the volume that look
    // locally like the target.
    let n_decoys = rng.random_range(config.decoy_arcs[0]..=config.decoy_arcs[1]);
    for _ in 0..n_decoys {
        let r_mid = rng.random_range(0.15..0.26) * g as f64;
        let thickness = rng.random_range(config.thickness[0]..=config.thickness[1]);
        let decoy = CapGeometry {
            center: std::array::from_fn(|a| {
                geom.center[a] - geom.axis[a] * 0.35 * g as f64
                    + rng.random_range(-4.0f64..=4.0)
            }),
            axis: random_axis(rng),
            r_in: r_mid - thickness / 2.0,
            r_out: r_mid + thickness / 2.0,
            cos_half: ((rng.random_range(30.0f64..70.0) / 2.0).to_radians()).cos(),
        };
        let intensity =
            rng.random_range(config.fetus_intensity[0]..=config.fetus_intensity[1]) as f32;
        let mask = cap_mask(&decoy, g);
        for (v, m) in background.iter_mut().zip(mask.iter()) {
            if *m == 1 {
                *v = intensity;
            }
        }
    }

    let shell_texture = smooth_field(g, 4, config.placenta_std, rng);
    let shell_value = shell_texture.mapv(|v| (config.placenta_mean as f32 + v).max(0.05));
    Ok(Scene {
        background,
        shell_value,
        shape,
    })
}

/// Warp an f32 grid by the displacement field (backward map, trilinear,
/// clamped at the grid edge).
fn warp_trilinear(data: &Array3<f32>, field: &DisplacementField) -> Array3<f32> {
    let dims = data.dim();
    Array3::from_shape_fn(dims, |(i, j, k)| {
        let u = field.at([i, j, k], dims);
        crate::preprocess::sample_trilinear_clamped(
            data,
            [i as f64 + u[0], j as f64 + u[1], k as f64 + u[2]],
        )
    })
}

/// Warp a label by the displacement field (nearest neighbor, background
/// outside the grid).
pub fn warp_label(label: &LabelMap, field: &DisplacementField) -> LabelMap {
    let dims = label.data.dim();
    let data = Array3::from_shape_fn(dims, |(i, j, k)| {
        let u = field.at([i, j, k], dims);
        let p = [i as f64 + u[0], j as f64 + u[1], k as f64 + u[2]];
        let in_bounds = p[0] > -0.5
            && p[1] > -0.5
            && p[2] > -0.5
            && p[0] < dims.0 as f64 - 0.5
            && p[1] < dims.1 as f64 - 0.5
            && p[2] < dims.2 as f64 - 0.5;
        if !in_bounds {
            return 0u8;
        }
        let idx = [
            p[0].round().clamp(0.0, dims.0 as f64 - 1.0) as usize,
            p[1].round().clamp(0.0, dims.1 as f64 - 1.0) as usize,
            p[2].round().clamp(0.0, dims.2 as f64 - 1.0) as usize,
        ];
        label.data[idx]
    });
    LabelMap {
        data,
        spacing: label.spacing,
    }
}

/// Render one frame of the scene: warp everything by the frame field,
/// scale the shell by `1 + A * s`, add acquisition noise.
fn render_frame(
    scene: &Scene,
    field: &DisplacementField,
    s: f64,
    config: &PhantomConfig,
    noise_rng: &mut impl Rng,
) -> Result<(Volume, LabelMap)> {
    let identity = field.max_abs() == 0.0;
    let (mut image, label) = if identity {
        (scene.background.clone(), scene.shape.clone())
    } else {
        (
            warp_trilinear(&scene.background, field),
            warp_label(&scene.shape, field),
        )
    };
    let shell = if identity {
        scene.shell_value.clone()
    } else {
        warp_trilinear(&scene.shell_value, field)
    };
    let gain = (1.0 + config.hyperoxia_amplitude * s) as f32;
    for ((v, m), sv) in image.iter_mut().zip(label.data.iter()).zip(shell.iter()) {
        if *m == 1 {
            *v = sv * gain;
        }
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("sigma checked");
        for v in image.iter_mut() {
            *v += normal.sample(noise_rng) as f32;
        }
    }
    Ok((Volume::new(image.mapv(|v| v.max(0.0)), [1.0; 3])?, label))
}

/// AR(1) update of the motion control field:
/// `u_t = rho * u_{t-1} + std * sqrt(1 - rho^2) * eps`, clamped to the
/// amplitude bound.
fn evolve_field(
    prev: &DisplacementField,
    config: &PhantomConfig,
    rng: &mut impl Rng,
) -> DisplacementField {
    let rho = config.motion_correlation;
    let innov = config.motion_std * (1.0 - rho * rho).max(0.0).sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut next = prev.clone();
    for axis in 0..3 {
        for v in next.control[axis].iter_mut() {
            let eps: f64 = normal.sample(rng);
            *v = (rho * *v + innov * eps)
                .clamp(-config.motion_amplitude, config.motion_amplitude);
        }
    }
    next
}

/// Generate one subject with dense labels at every frame.
pub fn generate_subject(
    config: &PhantomConfig,
    subject_index: usize,
    cohort: Cohort,
    plurality: Plurality,
) -> Result<PhantomSubject> {
    config.validate()?;
    let mut scene_rng = rng::stream(config.seed, "phantom-scene", &[subject_index as u64]);
    let scene = build_scene(config, &mut scene_rng)?;
    let mut motion_rng = rng::stream(config.seed, "phantom-motion", &[subject_index as u64]);
    let mut noise_rng = rng::stream(config.seed, "phantom-noise", &[subject_index as u64]);

    let mut frames = Vec::with_capacity(config.frames);
    let mut labels = std::collections::BTreeMap::new();
    let mut phases = Vec::with_capacity(config.frames);
    let mut signal = Vec::with_capacity(config.frames);
    let mut fields = Vec::with_capacity(config.frames);

    let still = config.motion_amplitude == 0.0 || config.motion_std == 0.0;
    let mut field = DisplacementField::zero(config.motion_control_points);
    for t in 0..config.frames {
        if t > 0 && !still {
            // retry a draw that disconnects the warped shell; fall back to
            // the previous (connected) field
            let mut accepted = None;
            for _ in 0..5 {
                let candidate = evolve_field(&field, config, &mut motion_rng);
                let warped = warp_label(&scene.shape, &candidate);
                if warped.is_empty() {
                    continue;
                }
                let largest = inference::largest_component(&warped)?;
                if largest.count() == warped.count() {
                    accepted = Some(candidate);
                    break;
                }
            }
            field = accepted.unwrap_or_else(|| field.clone());
        }
        let s = oxygenation_signal(t, config);
        let (frame, label) = render_frame(&scene, &field, s, config, &mut noise_rng)?;
        frames.push(frame);
        labels.insert(t, label);
        phases.push(config.phase_of(t));
        signal.push(s);
        fields.push(field.clone());
    }

    let subject_id = format!("phantom_{subject_index:04}");
    let record = SubjectRecord {
        subject_id: subject_id.clone(),
        cohort,
        plurality,
        gestational_age: None,
    };
    let series = TimeSeries::new(subject_id, frames, phases, labels)?;
    Ok(PhantomSubject {
        record,
        series,
        truth: PhantomTruth { signal, fields },
    })
}

/// Generate `n` subjects with round-robin synthetic cohort tags.
pub fn generate_cohort(n: usize, config: &PhantomConfig) -> Result<Vec<PhantomSubject>> {
    let combos = [
        (Cohort::Control, Plurality::Singleton),
        (Cohort::Fgr, Plurality::Singleton),
        (Cohort::HighBmi, Plurality::Singleton),
        (Cohort::Control, Plurality::Twin),
        (Cohort::Fgr, Plurality::Twin),
        (Cohort::HighBmi, Plurality::Twin),
    ];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (cohort, plurality) = combos[i % combos.len()];
        out.push(generate_subject(config, i, cohort, plurality)?);
    }
    Ok(out)
}

/// Keep only every `keep_every`-th label (downsampling dense ground truth
/// to the sparse-label regime, N_l labels per subject).
pub fn sparsify_labels(series: &TimeSeries, keep: &[usize]) -> Result<TimeSeries> {
    let mut labels = std::collections::BTreeMap::new();
    for &k in keep {
        let Some(l) = series.labels.get(&k) else {
            return Err(Error::InvalidArgument(format!(
                "frame {k} has no label to keep"
            )));
        };
        labels.insert(k, l.clone());
    }
    TimeSeries::new(
        series.subject_id.clone(),
        series.frames.clone(),
        series.phase.clone(),
        labels,
    )
}
