//! Optimization loop: stratified subject-wise splitting, per-epoch label
//! sampling, linear learning-rate decay, adaptive-moment updates, and
//! best-validation model selection.
//!
//! Reproducibility contract: every random draw comes from a stream derived
//! from `(seed, purpose, epoch/index)`, all iteration orders are fixed, and
//! reductions are sequential — identical config and seed reproduce the
//! per-epoch loss history bit-for-bit.

use ndarray::{Array3, Array5};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig, Sample};
use crate::boundary::{self, Metric, Units};
use crate::error::{Error, Result};
use crate::inference;
use crate::losses::{clamp_sdt, LossConfig, Prediction, PredictionMode};
use crate::metrics;
use crate::model::{checkpoint::TrainStamp, Checkpoint, OutMode, UNet, UNetConfig};
use crate::preprocess::PipelineParams;
use crate::rng;
use crate::volume::{SubjectRecord, TimeSeries};

/// One subject: demographic record plus its (preprocessed) time series.
#[derive(Debug, Clone)]
pub struct Subject {
    pub record: SubjectRecord,
    pub series: TimeSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test")]
    Test,
}

/// Subjects assigned to one role. Role separation is structural: the
/// training loop only ever receives the train and val indices.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub subjects: Vec<Subject>,
    pub role: Role,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

/// Split subjects into train/val/test by subject (never by frame).
///
/// Stratification keys in priority order: plurality, then cohort. Subjects
/// are shuffled within each stratum and strata are walked in key order
/// while a sequential quota fill assigns each subject to the role with the
/// largest outstanding claim (fraction credit minus allocation, ties to the
/// earlier role). Strata too small to populate every role therefore fall
/// back to the global proportional assignment, and total counts always
/// match the largest-remainder apportionment of the fractions.
pub fn stratified_split(
    subjects: Vec<Subject>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    if subjects.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "stratified split needs at least 3 subjects, got {}",
            subjects.len()
        )));
    }
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    // group into strata
    let mut strata: std::collections::BTreeMap<(String, String), Vec<Subject>> =
        std::collections::BTreeMap::new();
    for s in subjects {
        let key = (
            s.record.plurality.as_str().to_string(),
            s.record.cohort.as_str().to_string(),
        );
        strata.entry(key).or_default().push(s);
    }
    let mut credits = [0f64; 3];
    let mut allocated = [0usize; 3];
    let mut out: [Vec<Subject>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for ((plurality, cohort), mut members) in strata {
        members.sort_by(|a, b| a.record.subject_id.cmp(&b.record.subject_id));
        let mut stream = rng::stream(seed, "split", &[]);
        // fold the stratum key into the stream so shuffles differ per stratum
        let mix = plurality.len() as u64 ^ (cohort.len() as u64) << 8;
        let mut stream = rng::stream(stream.random::<u64>() ^ mix, "split-stratum", &[]);
        members.shuffle(&mut stream);
        for subject in members {
            for (c, f) in credits.iter_mut().zip(fractions.iter()) {
                *c += f;
            }
            let mut best = 0usize;
            let mut best_claim = f64::NEG_INFINITY;
            for r in 0..3 {
                let claim = credits[r] - allocated[r] as f64;
                if claim > best_claim + 1e-12 {
                    best = r;
                    best_claim = claim;
                }
            }
            allocated[best] += 1;
            out[best].push(subject);
        }
    }
    let [train, val, test] = out;
    Ok((
        DatasetIndex {
            subjects: train,
            role: Role::Train,
        },
        DatasetIndex {
            subjects: val,
            role: Role::Val,
        },
        DatasetIndex {
            subjects: test,
            role: Role::Test,
        },
    ))
}

/// Plan one epoch: draw exactly one labeled frame uniformly per subject,
/// then shuffle the order. Subjects without labels are excluded and
/// reported. Epoch length equals the number of (labeled) subjects.
pub fn sample_epoch(
    train: &DatasetIndex,
    rng: &mut impl Rng,
) -> (Vec<(usize, usize)>, Vec<String>) {
    let mut plan = Vec::with_capacity(train.subjects.len());
    let mut warnings = Vec::new();
    for (si, subject) in train.subjects.iter().enumerate() {
        let frames: Vec<usize> = subject.series.labels.keys().copied().collect();
        if frames.is_empty() {
            warnings.push(format!(
                "subject {} has no labeled frames; excluded from epoch",
                subject.record.subject_id
            ));
            continue;
        }
        let pick = frames[rng.random_range(0..frames.len())];
        plan.push((si, pick));
    }
    plan.shuffle(rng);
    (plan, warnings)
}

/// Linearly decayed learning rate: `lr0 * (1 - epoch/epochs)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * (1.0 - epoch as f64 / config.epochs as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected adaptive-moment update; `t` is the 1-based step count.
pub fn adam_step(net: &mut UNet, lr: f64, t: usize, cfg: &AdamConfig) {
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let lr = lr as f32;
    net.visit_params(&mut |p| {
        let g = p.grad.as_slice().expect("grad contiguous").to_vec();
        let m = p.moment1.as_slice_mut().expect("m contiguous");
        let v = p.moment2.as_slice_mut().expect("v contiguous");
        let w = p.value.as_slice_mut().expect("value contiguous");
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    });
}

/// Full training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs between validation passes.
    pub val_every: usize,
    pub seed: u64,
    /// Train/val/test fractions, used by the split helpers.
    pub split: [f64; 3],
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub model: UNetConfig,
    pub pipeline: PipelineParams,
    /// Probability threshold used for validation predictions.
    pub threshold: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            epochs: 5500,
            batch_size: 8,
            val_every: 25,
            seed: 0,
            split: [0.65, 0.15, 0.20],
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            model: UNetConfig::default(),
            pipeline: PipelineParams::default(),
            threshold: 0.5,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.val_every < 1 {
            return Err(Error::Config("val_every must be >= 1".to_string()));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {:?}",
                self.split
            )));
        }
        self.loss.terms()?;
        Ok(())
    }

    /// The network output mode implied by the loss.
    pub fn resolved_model(&self) -> Result<UNetConfig> {
        let mut model = self.model;
        model.out_mode = OutMode::from_prediction_mode(self.loss.mode()?);
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    pub warnings: Vec<String>,
}

/// Write the per-epoch history CSV (`epoch,loss,lr,val_dice`).
pub fn write_history_csv(history: &[EpochStats], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut out = String::from("epoch,loss,lr,val_dice\n");
    for row in history {
        let vd = row
            .val_dice
            .map(|d| d.to_string())
            .unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", row.epoch, row.loss, row.lr, vd));
    }
    std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// Apply the standard preprocessing pipeline to every frame (and crop/pad
/// the labels to match); used when building a dataset index.
pub fn preprocess_subject(subject: &Subject, pipeline: &PipelineParams) -> Result<Subject> {
    let mut frames = Vec::with_capacity(subject.series.num_frames());
    for f in &subject.series.frames {
        frames.push(crate::preprocess::standard_pipeline(f, pipeline)?);
    }
    let mut labels = std::collections::BTreeMap::new();
    for (&i, l) in &subject.series.labels {
        labels.insert(i, crate::volume::crop_or_pad_label(l, pipeline.target_shape)?);
    }
    let series = TimeSeries::new(
        subject.series.subject_id.clone(),
        frames,
        subject.series.phase.clone(),
        labels,
    )?;
    Ok(Subject {
        record: subject.record.clone(),
        series,
    })
}

fn sample_of(subject: &Subject, frame: usize) -> Result<Sample> {
    let image = subject.series.frames[frame].clone();
    let label = subject
        .series
        .labels
        .get(&frame)
        .ok_or_else(|| Error::Train(format!("frame {frame} has no label")))?
        .clone();
    Sample::new(image, label)
}

/// Mean validation Dice over every labeled frame of the val subjects, with
/// inference post-processing applied.
pub fn validation_dice(net: &UNet, val: &DatasetIndex, threshold: f64) -> Result<f64> {
    let mut dices = Vec::new();
    for subject in &val.subjects {
        for (&frame, label) in &subject.series.labels {
            let outcome = inference::predict(net, &subject.series.frames[frame], threshold)?;
            dices.push(metrics::dice(label, &outcome.mask)?);
        }
    }
    if dices.is_empty() {
        return Err(Error::Train(
            "validation set has no labeled frames".to_string(),
        ));
    }
    Ok(crate::stats::mean(&dices))
}

/// Train a network and return the checkpoint with the best validation Dice
/// (earliest epoch on ties) together with the per-epoch history.
pub fn train(config: &TrainConfig, train_set: &DatasetIndex, val_set: &DatasetIndex) -> Result<TrainResult> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Train(
            "train and validation sets must be non-empty".to_string(),
        ));
    }
    if train_set.role != Role::Train || val_set.role != Role::Val {
        return Err(Error::Train(
            "role separation violated: train() takes the train and val indices".to_string(),
        ));
    }
    let model_cfg = config.resolved_model()?;
    let mode = config.loss.mode()?;
    let needs_weights = config.loss.needs_weight_map()?;
    let needs_sdt = config.loss.needs_gt_sdt()?;
    let mut net = UNet::new(model_cfg, config.seed)?;
    let stamp = TrainStamp {
        seed: config.seed,
        loss_name: config.loss.name.clone(),
        pipeline: config.pipeline,
    };

    let mut warnings = Vec::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut epoch_rng = rng::stream(config.seed, "sample", &[epoch as u64]);
        let (plan, mut w) = sample_epoch(train_set, &mut epoch_rng);
        warnings.append(&mut w);
        if plan.is_empty() {
            return Err(Error::Train(
                "no labeled training subjects; cannot sample an epoch".to_string(),
            ));
        }
        let mut loss_sum = 0f64;
        let mut n_samples = 0usize;
        for (batch_idx, batch) in plan.chunks(config.batch_size).enumerate() {
            // assemble augmented samples
            let mut samples = Vec::with_capacity(batch.len());
            for (pos, &(si, frame)) in batch.iter().enumerate() {
                let raw = sample_of(&train_set.subjects[si], frame)?;
                let idx_in_epoch = (batch_idx * config.batch_size + pos) as u64;
                let mut aug_rng =
                    rng::stream(config.seed, "augment", &[epoch as u64, idx_in_epoch]);
                let mut aug = augment(&raw, &config.augment, &mut aug_rng);
                if aug.label.is_empty() && !raw.label.is_empty() {
                    // augmentation pushed the organ out of the grid
                    warnings.push(format!(
                        "epoch {epoch}: augmentation emptied the label of subject {} frame {frame}; using the unaugmented sample",
                        train_set.subjects[si].record.subject_id
                    ));
                    aug = raw;
                }
                samples.push(aug);
            }
            let b = samples.len();
            let shape = samples[0].image.shape();
            let mut x = Array5::zeros((b, 1, shape[0], shape[1], shape[2]));
            for (i, s) in samples.iter().enumerate() {
                for ((a, bb, c), v) in s.image.data.indexed_iter() {
                    x[[i, 0, a, bb, c]] = *v;
                }
            }
            let (out, cache) = net.forward_train(x)?;
            // per-sample loss and gradient
            let mut grad = Array5::zeros(out.dim());
            let mut batch_loss = 0f64;
            for (i, s) in samples.iter().enumerate() {
                let pred_field = Array3::from_shape_fn(
                    (shape[0], shape[1], shape[2]),
                    |(a, bb, c)| out[[i, 0, a, bb, c]] as f64,
                );
                let pred = match mode {
                    PredictionMode::Probability => Prediction {
                        mode,
                        data: pred_field,
                    },
                    PredictionMode::Sdt => Prediction::sdt(pred_field),
                };
                let weight_map = if needs_weights {
                    Some(boundary::weight_map(
                        &s.label,
                        config.loss.kernel_size,
                        config.loss.w1,
                        config.loss.w2,
                        config.loss.w_c,
                    )?)
                } else {
                    None
                };
                let gt_sdt = if needs_sdt {
                    let sdt = boundary::signed_distance_exact(&s.label, Metric::Euclidean, Units::Voxel)
                        .map_err(|e| {
                            Error::Train(format!(
                                "ground-truth SDT undefined for a single-class label: {e}"
                            ))
                        })?;
                    Some(clamp_sdt(&sdt, config.loss.sdt_clamp))
                } else {
                    None
                };
                let out_loss = config.loss.evaluate(
                    &pred,
                    &s.label,
                    weight_map.as_ref(),
                    gt_sdt.as_ref(),
                )?;
                batch_loss += out_loss.value;
                for ((a, bb, c), g) in out_loss.grad.indexed_iter() {
                    grad[[i, 0, a, bb, c]] = (*g / b as f64) as f32;
                }
            }
            batch_loss /= b as f64;
            if !batch_loss.is_finite() {
                let ids: Vec<String> = batch
                    .iter()
                    .map(|&(si, frame)| {
                        format!("{}#{frame}", train_set.subjects[si].record.subject_id)
                    })
                    .collect();
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}; batch contents: {}",
                    ids.join(", ")
                )));
            }
            loss_sum += batch_loss * b as f64;
            n_samples += b;
            net.zero_grad();
            net.backward(&cache, &grad);
            step += 1;
            adam_step(&mut net, lr, step, &config.adam);
        }
        let epoch_loss = loss_sum / n_samples as f64;

        let validate_now = (epoch + 1) % config.val_every == 0 || epoch + 1 == config.epochs;
        let val_dice = if validate_now {
            let d = validation_dice(&net, val_set, config.threshold)?;
            let better = match &best {
                None => true,
                Some(ck) => d > ck.val_dice,
            };
            if better {
                best = Some(Checkpoint::capture(&mut net, epoch, d, stamp.clone()));
            }
            Some(d)
        } else {
            None
        };
        history.push(EpochStats {
            epoch,
            loss: epoch_loss,
            lr,
            val_dice,
        });
    }
    let checkpoint = best.expect("at least the final epoch validates");
    Ok(TrainResult {
        checkpoint,
        history,
        warnings,
    })
}
