//! Training objectives: per-voxel losses composed with the boundary weight
//! map, region losses, distance-regression losses, and the baseline shape
//! losses, each with value and analytic gradient with respect to the
//! prediction.
//!
//! Predictions come in two modes: per-voxel foreground probability in
//! [0, 1], or a predicted signed distance field. Boundary-weighted (BW)
//! variants multiply the per-voxel loss by the weight map before the mean
//! reduction; with `w1 = w2 = 0, w_c = 1` they reduce to their unweighted
//! counterparts bit-for-bit (the multiplication by 1.0 is exact and the
//! summation order is shared).

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::boundary::{self, DistanceMap, Metric, Units, WeightMap};
use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// Output mode of the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionMode {
    #[serde(rename = "probability")]
    Probability,
    #[serde(rename = "sdt")]
    Sdt,
}

/// A differentiable prediction: foreground probability or signed distance.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mode: PredictionMode,
    pub data: Array3<f64>,
}

impl Prediction {
    pub fn probability(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(
                "probability prediction has values outside [0, 1]".to_string(),
            ));
        }
        Ok(Prediction {
            mode: PredictionMode::Probability,
            data,
        })
    }

    pub fn sdt(data: Array3<f64>) -> Self {
        Prediction {
            mode: PredictionMode::Sdt,
            data,
        }
    }
}

/// Loss value with gradient; `per_voxel` holds the pre-reduction
/// contributions when the loss has a per-voxel decomposition
/// (scalar = mean of per_voxel in that case).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array3<f64>,
    pub per_voxel: Option<Array3<f64>>,
}

fn check_shapes(pred: &Array3<f64>, label: &LabelMap) -> Result<()> {
    let p = pred.dim();
    if [p.0, p.1, p.2] != label.shape() {
        return Err(Error::shape(
            "prediction vs label",
            &[p.0, p.1, p.2],
            &label.shape(),
        ));
    }
    Ok(())
}

fn check_weights(pred: &Array3<f64>, weights: Option<&WeightMap>) -> Result<()> {
    if let Some(w) = weights {
        if w.data.dim() != pred.dim() {
            let p = pred.dim();
            let wd = w.data.dim();
            return Err(Error::shape(
                "prediction vs weight map",
                &[p.0, p.1, p.2],
                &[wd.0, wd.1, wd.2],
            ));
        }
    }
    Ok(())
}

/// Probability clamp applied before logarithms.
pub const EPS_LOG: f64 = 1e-7;

/// Binary cross-entropy, optionally boundary-weighted, mean-reduced.
pub fn ce_loss(
    pred: &Array3<f64>,
    label: &LabelMap,
    weights: Option<&WeightMap>,
) -> Result<LossOutput> {
    check_shapes(pred, label)?;
    check_weights(pred, weights)?;
    let n = pred.len() as f64;
    let mut per_voxel = Array3::zeros(pred.dim());
    let mut grad = Array3::zeros(pred.dim());
    let mut sum = 0.0f64;
    for (idx, &p_raw) in pred.indexed_iter() {
        let y = label.data[idx] as f64;
        let p = p_raw.clamp(EPS_LOG, 1.0 - EPS_LOG);
        let w = weights.map_or(1.0, |w| w.data[idx]);
        let l = w * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        per_voxel[idx] = l;
        sum += l;
        // clamped voxels sit on a constant plateau of the loss
        let dl = if p_raw <= EPS_LOG || p_raw >= 1.0 - EPS_LOG {
            0.0
        } else {
            w * (-(y / p) + (1.0 - y) / (1.0 - p))
        };
        grad[idx] = dl / n;
    }
    Ok(LossOutput {
        value: sum / n,
        grad,
        per_voxel: Some(per_voxel),
    })
}

/// Focal loss with per-class alpha balancing, optionally boundary-weighted.
///
/// Foreground: `-alpha * (1-p)^gamma * ln(p)`; background:
/// `-(1-alpha) * p^gamma * ln(1-p)`. With `gamma = 0, alpha = 0.5` this is
/// exactly `0.5 *` cross-entropy.
pub fn focal_loss(
    pred: &Array3<f64>,
    label: &LabelMap,
    alpha: f64,
    gamma: f64,
    weights: Option<&WeightMap>,
) -> Result<LossOutput> {
    check_shapes(pred, label)?;
    check_weights(pred, weights)?;
    let n = pred.len() as f64;
    let mut per_voxel = Array3::zeros(pred.dim());
    let mut grad = Array3::zeros(pred.dim());
    let mut sum = 0.0f64;
    for (idx, &p_raw) in pred.indexed_iter() {
        let foreground = label.data[idx] == 1;
        let p = p_raw.clamp(EPS_LOG, 1.0 - EPS_LOG);
        let (p_t, alpha_t) = if foreground { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        let w = weights.map_or(1.0, |w| w.data[idx]);
        let focal_factor = if gamma == 0.0 { 1.0 } else { (1.0 - p_t).powf(gamma) };
        let l = w * -alpha_t * focal_factor * p_t.ln();
        per_voxel[idx] = l;
        sum += l;
        let dl = if p_raw <= EPS_LOG || p_raw >= 1.0 - EPS_LOG {
            0.0
        } else {
            // d/dp_t of -alpha_t (1-p_t)^g ln p_t, then chain dp_t/dp = +/-1
            let dl_dpt = if gamma == 0.0 {
                -alpha_t / p_t
            } else {
                alpha_t
                    * (gamma * (1.0 - p_t).powf(gamma - 1.0) * p_t.ln()
                        - (1.0 - p_t).powf(gamma) / p_t)
            };
            let sign = if foreground { 1.0 } else { -1.0 };
            w * dl_dpt * sign
        };
        grad[idx] = dl / n;
    }
    Ok(LossOutput {
        value: sum / n,
        grad,
        per_voxel: Some(per_voxel),
    })
}

/// Soft Dice loss: `1 - (2 * sum(p*y) + eps) / (sum(p) + sum(y) + eps)`.
///
/// A global loss without a per-voxel decomposition.
pub fn soft_dice_loss(pred: &Array3<f64>, label: &LabelMap, eps: f64) -> Result<LossOutput> {
    check_shapes(pred, label)?;
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut ysum = 0.0f64;
    for (idx, &p) in pred.indexed_iter() {
        let y = label.data[idx] as f64;
        inter += p * y;
        psum += p;
        ysum += y;
    }
    let num = 2.0 * inter + eps;
    let den = psum + ysum + eps;
    let value = 1.0 - num / den;
    let grad = Array3::from_shape_fn(pred.dim(), |idx| {
        let y = label.data[idx] as f64;
        -(2.0 * y * den - num) / (den * den)
    });
    Ok(LossOutput {
        value,
        grad,
        per_voxel: None,
    })
}

/// Mean-squared error of a predicted signed distance field against the
/// clamped ground-truth transform, optionally boundary-weighted.
pub fn sdt_loss(
    pred: &Array3<f64>,
    gt_sdt: &DistanceMap,
    weights: Option<&WeightMap>,
) -> Result<LossOutput> {
    if pred.dim() != gt_sdt.data.dim() {
        let p = pred.dim();
        let g = gt_sdt.data.dim();
        return Err(Error::shape(
            "prediction vs ground-truth SDT",
            &[p.0, p.1, p.2],
            &[g.0, g.1, g.2],
        ));
    }
    check_weights(pred, weights)?;
    let n = pred.len() as f64;
    let mut per_voxel = Array3::zeros(pred.dim());
    let mut grad = Array3::zeros(pred.dim());
    let mut sum = 0.0f64;
    for (idx, &p) in pred.indexed_iter() {
        let w = weights.map_or(1.0, |w| w.data[idx]);
        let r = p - gt_sdt.data[idx];
        let l = w * r * r;
        per_voxel[idx] = l;
        sum += l;
        grad[idx] = 2.0 * w * r / n;
    }
    Ok(LossOutput {
        value: sum / n,
        grad,
        per_voxel: Some(per_voxel),
    })
}

/// Clamp a ground-truth SDT to `[-delta_max, +delta_max]` (regression target).
pub fn clamp_sdt(sdt: &DistanceMap, delta_max: f64) -> DistanceMap {
    DistanceMap {
        data: sdt.data.mapv(|d| d.clamp(-delta_max, delta_max)),
        metric: sdt.metric,
        units: sdt.units,
    }
}

/// Soft-Hausdorff loss given fixed distance maps:
/// mean of `(p - y)^2 * (d_y^alpha + d_p^alpha)`.
///
/// The distance maps are treated as constants; the gradient flows only
/// through the `(p - y)^2` factor.
pub fn soft_hausdorff_with_maps(
    pred: &Array3<f64>,
    label: &LabelMap,
    d_y: &Array3<f64>,
    d_p: &Array3<f64>,
    alpha: f64,
) -> Result<LossOutput> {
    check_shapes(pred, label)?;
    if d_y.dim() != pred.dim() || d_p.dim() != pred.dim() {
        return Err(Error::InvalidArgument(
            "distance map shape does not match prediction".to_string(),
        ));
    }
    let n = pred.len() as f64;
    let mut per_voxel = Array3::zeros(pred.dim());
    let mut grad = Array3::zeros(pred.dim());
    let mut sum = 0.0f64;
    for (idx, &p) in pred.indexed_iter() {
        let y = label.data[idx] as f64;
        let dfac = d_y[idx].powf(alpha) + d_p[idx].powf(alpha);
        let r = p - y;
        let l = r * r * dfac;
        per_voxel[idx] = l;
        sum += l;
        grad[idx] = 2.0 * r * dfac / n;
    }
    Ok(LossOutput {
        value: sum / n,
        grad,
        per_voxel: Some(per_voxel),
    })
}

/// Soft-Hausdorff loss; recomputes the predicted-foreground distance map
/// from the 0.5-binarized prediction each call.
///
/// `d_y` and `d_p` are unsigned distances to the respective boundaries
/// (absolute value of the signed transform, voxel units). An empty
/// binarized prediction falls back to `d_p =` grid diagonal everywhere.
pub fn soft_hausdorff_loss(
    pred: &Array3<f64>,
    label: &LabelMap,
    alpha: f64,
) -> Result<LossOutput> {
    check_shapes(pred, label)?;
    let d_y = unsigned_boundary_distance(label)?;
    let bin = LabelMap::new(pred.mapv(|p| u8::from(p >= 0.5)), label.spacing)?;
    let dims = pred.dim();
    let d_p = if bin.is_empty() || bin.is_full() {
        let diag = ((dims.0 * dims.0 + dims.1 * dims.1 + dims.2 * dims.2) as f64).sqrt();
        Array3::from_elem(dims, diag)
    } else {
        unsigned_boundary_distance(&bin)?
    };
    soft_hausdorff_with_maps(pred, label, &d_y, &d_p, alpha)
}

fn unsigned_boundary_distance(label: &LabelMap) -> Result<Array3<f64>> {
    let sdt = boundary::signed_distance_exact(label, Metric::Euclidean, Units::Voxel)?;
    Ok(sdt.data.mapv(f64::abs))
}

/// Smoothed Heaviside `H_s(z) = 1/2 (1 + (2/pi) atan(z/s))`.
pub fn heaviside(z: f64, s: f64) -> f64 {
    0.5 * (1.0 + std::f64::consts::FRAC_2_PI * (z / s).atan())
}

/// Derivative of the smoothed Heaviside: `s / (pi (s^2 + z^2))`.
pub fn heaviside_grad(z: f64, s: f64) -> f64 {
    s / (std::f64::consts::PI * (s * s + z * z))
}

/// Shape loss: regression of smoothed-Heaviside-normalized distance fields,
/// `mean (H_s(pred_sdt) - H_s(gt_sdt))^2`.
pub fn shape_loss(pred_sdt: &Array3<f64>, gt_sdt: &DistanceMap, s: f64) -> Result<LossOutput> {
    if pred_sdt.dim() != gt_sdt.data.dim() {
        let p = pred_sdt.dim();
        let g = gt_sdt.data.dim();
        return Err(Error::shape(
            "prediction vs ground-truth SDT",
            &[p.0, p.1, p.2],
            &[g.0, g.1, g.2],
        ));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Heaviside smoothing scale must be positive, got {s}"
        )));
    }
    let n = pred_sdt.len() as f64;
    let mut per_voxel = Array3::zeros(pred_sdt.dim());
    let mut grad = Array3::zeros(pred_sdt.dim());
    let mut sum = 0.0f64;
    for (idx, &z) in pred_sdt.indexed_iter() {
        let hp = heaviside(z, s);
        let hg = heaviside(gt_sdt.data[idx], s);
        let r = hp - hg;
        let l = r * r;
        per_voxel[idx] = l;
        sum += l;
        grad[idx] = 2.0 * r * heaviside_grad(z, s) / n;
    }
    Ok(LossOutput {
        value: sum / n,
        grad,
        per_voxel: Some(per_voxel),
    })
}

/// Weighted sum of component losses; the gradient is the matching weighted
/// sum. Per-voxel maps are combined when every component provides one.
pub fn combine(components: &[(LossOutput, f64)]) -> Result<LossOutput> {
    if components.is_empty() {
        return Err(Error::InvalidArgument(
            "combine needs at least one loss component".to_string(),
        ));
    }
    let dims = components[0].0.grad.dim();
    let mut value = 0.0f64;
    let mut grad = Array3::zeros(dims);
    let all_per_voxel = components.iter().all(|(c, _)| c.per_voxel.is_some());
    let mut per_voxel = all_per_voxel.then(|| Array3::zeros(dims));
    for (c, w) in components {
        if c.grad.dim() != dims {
            return Err(Error::InvalidArgument(
                "combine components have mismatched shapes".to_string(),
            ));
        }
        value += w * c.value;
        grad.zip_mut_with(&c.grad, |g, cg| *g += w * cg);
        if let (Some(acc), Some(pv)) = (per_voxel.as_mut(), c.per_voxel.as_ref()) {
            acc.zip_mut_with(pv, |a, p| *a += w * p);
        }
    }
    Ok(LossOutput {
        value,
        grad,
        per_voxel,
    })
}

/// One term of a composite training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Ce { boundary_weighted: bool },
    Focal { boundary_weighted: bool },
    Dice,
    Sdt { boundary_weighted: bool },
    Hd,
    Shape,
}

/// A named training objective with all of its hyperparameters.
///
/// `name` follows the benchmark row labels: `BW-CE`, `CE`, `Dice`,
/// `BW-CE+Dice`, `CE+Dice`, `BW-Focal`, `BW-Focal+Dice`, `Focal+Dice`,
/// `BW-SDT`, `SDT`, `HD+Dice`, `Shape+Dice`. Hybrid rows use equal unit
/// weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    pub name: String,
    /// Boundary band kernel size.
    pub kernel_size: usize,
    pub w1: f64,
    pub w2: f64,
    pub w_c: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    /// SDT regression target clamp, in voxels.
    pub sdt_clamp: f64,
    pub hd_alpha: f64,
    /// Heaviside smoothing scale of the shape loss, in voxels.
    pub shape_s: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            name: "BW-CE".to_string(),
            kernel_size: 11,
            w1: 1.0,
            w2: 40.0,
            w_c: 1.0,
            focal_alpha: 0.5,
            focal_gamma: 2.0,
            dice_eps: 1.0,
            sdt_clamp: 10.0,
            hd_alpha: 2.0,
            shape_s: 1.0,
        }
    }
}

impl LossConfig {
    pub fn named(name: &str) -> Self {
        LossConfig {
            name: name.to_string(),
            ..Default::default()
        }
    }

    /// Parse the composite name into terms (each with unit weight).
    pub fn terms(&self) -> Result<Vec<LossTerm>> {
        let mut terms = Vec::new();
        for part in self.name.split('+') {
            let term = match part.trim() {
                "CE" => LossTerm::Ce { boundary_weighted: false },
                "BW-CE" => LossTerm::Ce { boundary_weighted: true },
                "Focal" => LossTerm::Focal { boundary_weighted: false },
                "BW-Focal" => LossTerm::Focal { boundary_weighted: true },
                "Dice" => LossTerm::Dice,
                "SDT" => LossTerm::Sdt { boundary_weighted: false },
                "BW-SDT" => LossTerm::Sdt { boundary_weighted: true },
                "HD" => LossTerm::Hd,
                "Shape" => LossTerm::Shape,
                other => {
                    return Err(Error::Config(format!(
                        "unknown loss component {other:?} in {:?}",
                        self.name
                    )));
                }
            };
            terms.push(term);
        }
        if terms.is_empty() {
            return Err(Error::Config("empty loss name".to_string()));
        }
        Ok(terms)
    }

    /// The prediction mode this objective trains: SDT-based objectives
    /// regress a distance field, the rest consume probabilities.
    pub fn mode(&self) -> Result<PredictionMode> {
        let terms = self.terms()?;
        let sdt_based = terms
            .iter()
            .any(|t| matches!(t, LossTerm::Sdt { .. } | LossTerm::Shape));
        if sdt_based {
            let prob_only = terms.iter().any(|t| {
                matches!(t, LossTerm::Ce { .. } | LossTerm::Focal { .. } | LossTerm::Hd)
            });
            if prob_only {
                return Err(Error::Config(format!(
                    "loss {:?} mixes SDT regression with probability-only terms",
                    self.name
                )));
            }
            Ok(PredictionMode::Sdt)
        } else {
            Ok(PredictionMode::Probability)
        }
    }

    /// Whether any term needs the boundary weight map.
    pub fn needs_weight_map(&self) -> Result<bool> {
        Ok(self.terms()?.iter().any(|t| {
            matches!(
                t,
                LossTerm::Ce { boundary_weighted: true }
                    | LossTerm::Focal { boundary_weighted: true }
                    | LossTerm::Sdt { boundary_weighted: true }
            )
        }))
    }

    /// Whether any term needs the ground-truth SDT.
    pub fn needs_gt_sdt(&self) -> Result<bool> {
        Ok(self
            .terms()?
            .iter()
            .any(|t| matches!(t, LossTerm::Sdt { .. } | LossTerm::Shape)))
    }

    /// Evaluate the composite objective.
    ///
    /// For SDT-mode objectives, a Dice component is computed on the smoothed
    /// Heaviside of the predicted distance field (the probability-like view
    /// of an SDT prediction).
    pub fn evaluate(
        &self,
        pred: &Prediction,
        label: &LabelMap,
        weights: Option<&WeightMap>,
        gt_sdt: Option<&DistanceMap>,
    ) -> Result<LossOutput> {
        let mode = self.mode()?;
        if pred.mode != mode {
            return Err(Error::Config(format!(
                "loss {:?} expects {:?} predictions, got {:?}",
                self.name, mode, pred.mode
            )));
        }
        if self.needs_weight_map()? && weights.is_none() {
            return Err(Error::Config(format!(
                "loss {:?} needs a boundary weight map",
                self.name
            )));
        }
        if self.needs_gt_sdt()? && gt_sdt.is_none() {
            return Err(Error::Config(format!(
                "loss {:?} needs the ground-truth SDT",
                self.name
            )));
        }
        let mut parts: Vec<(LossOutput, f64)> = Vec::new();
        for term in self.terms()? {
            let out = match term {
                LossTerm::Ce { boundary_weighted } => {
                    ce_loss(&pred.data, label, boundary_weighted.then_some(weights).flatten())?
                }
                LossTerm::Focal { boundary_weighted } => focal_loss(
                    &pred.data,
                    label,
                    self.focal_alpha,
                    self.focal_gamma,
                    boundary_weighted.then_some(weights).flatten(),
                )?,
                LossTerm::Dice => match mode {
                    PredictionMode::Probability => {
                        soft_dice_loss(&pred.data, label, self.dice_eps)?
                    }
                    PredictionMode::Sdt => {
                        // Dice on H_s(pred_sdt); chain rule through the Heaviside.
                        let h = pred.data.mapv(|z| heaviside(z, self.shape_s));
                        let inner = soft_dice_loss(&h, label, self.dice_eps)?;
                        let grad = Array3::from_shape_fn(pred.data.dim(), |idx| {
                            inner.grad[idx] * heaviside_grad(pred.data[idx], self.shape_s)
                        });
                        LossOutput {
                            value: inner.value,
                            grad,
                            per_voxel: None,
                        }
                    }
                },
                LossTerm::Sdt { boundary_weighted } => {
                    let gt = gt_sdt.expect("checked above");
                    sdt_loss(&pred.data, gt, boundary_weighted.then_some(weights).flatten())?
                }
                LossTerm::Hd => soft_hausdorff_loss(&pred.data, label, self.hd_alpha)?,
                LossTerm::Shape => {
                    let gt = gt_sdt.expect("checked above");
                    shape_loss(&pred.data, gt, self.shape_s)?
                }
            };
            parts.push((out, 1.0));
        }
        if parts.len() == 1 {
            Ok(parts.pop().unwrap().0)
        } else {
            combine(&parts)
        }
    }
}

/// The benchmark objective list (Table-style row labels).
pub fn benchmark_loss_names() -> Vec<&'static str> {
    vec![
        "BW-CE",
        "CE",
        "Dice",
        "BW-CE+Dice",
        "CE+Dice",
        "BW-Focal",
        "BW-Focal+Dice",
        "Focal+Dice",
        "BW-SDT",
        "SDT",
        "HD+Dice",
        "Shape+Dice",
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::weight_map;
    use ndarray::Array3;
    use rand::Rng;

    fn label_ball(shape: usize, r: f64) -> LabelMap {
        let c = shape as f64 / 2.0;
        let data = Array3::from_shape_fn((shape, shape, shape), |(i, j, k)| {
            let d2 =
                (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
            u8::from(d2 <= r * r)
        });
        LabelMap::new(data, [1.0, 1.0, 1.0]).unwrap()
    }

    fn random_probs(shape: usize, seed: u64) -> Array3<f64> {
        let mut rng = crate::rng::stream(seed, "loss-test", &[]);
        Array3::from_shape_fn((shape, shape, shape), |_| rng.random_range(0.1..0.9))
    }

    /// Central finite-difference check of an analytic gradient.
    fn finite_difference_check(
        pred: &Array3<f64>,
        analytic: &Array3<f64>,
        mut f: impl FnMut(&Array3<f64>) -> f64,
        tol: f64,
    ) {
        let h = 1e-3;
        let mut max_rel = 0.0f64;
        for idx in ndarray::indices(pred.dim()) {
            let idx = [idx.0, idx.1, idx.2];
            let mut plus = pred.clone();
            plus[idx] += h;
            let mut minus = pred.clone();
            minus[idx] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic[idx];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < tol, "max relative gradient error {max_rel}");
    }

    #[test]
    fn ce_perfect_prediction_near_zero() {
        let label = label_ball(6, 2.0);
        let pred = label.data.mapv(|y| y as f64);
        let out = ce_loss(&pred, &label, None).unwrap();
        assert!(out.value < 1e-6, "{}", out.value);
        assert!(out.value >= 0.0);
    }

    #[test]
    fn ce_uniform_half_is_ln2() {
        let label = label_ball(6, 2.0);
        let pred = Array3::from_elem((6, 6, 6), 0.5);
        let out = ce_loss(&pred, &label, None).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_weighted_toy_grid_hand_arithmetic() {
        // 2x2x2 grid: single foreground voxel, K=3 band covers everything
        let mut data = Array3::<u8>::zeros((2, 2, 2));
        data[[0, 0, 0]] = 1;
        let label = LabelMap::new(data, [1.0; 3]).unwrap();
        let w = weight_map(&label, 3, 1.0, 40.0, 1.0).unwrap();
        // all 8 voxels in band: one inner (w=2), seven outer (w=41)
        let pred = Array3::from_elem((2, 2, 2), 0.3);
        let out = ce_loss(&pred, &label, Some(&w)).unwrap();
        let l_fg = -(0.3f64.ln());
        let l_bg = -(0.7f64.ln());
        let expected = (2.0 * l_fg + 7.0 * 41.0 * l_bg) / 8.0;
        assert!((out.value - expected).abs() < 1e-12);
        // per-voxel mean equals the scalar
        let pv = out.per_voxel.unwrap();
        assert!((pv.mean().unwrap() - out.value).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let label = label_ball(6, 2.0);
        let pred = random_probs(6, 41);
        let w = weight_map(&label, 3, 1.0, 40.0, 1.0).unwrap();
        let out = ce_loss(&pred, &label, Some(&w)).unwrap();
        finite_difference_check(
            &pred,
            &out.grad,
            |p| ce_loss(p, &label, Some(&w)).unwrap().value,
            1e-4,
        );
    }

    #[test]
    fn focal_reduces_to_half_ce_at_gamma_zero() {
        let label = label_ball(6, 2.0);
        let pred = random_probs(6, 42);
        let focal = focal_loss(&pred, &label, 0.5, 0.0, None).unwrap();
        let ce = ce_loss(&pred, &label, None).unwrap();
        assert!((focal.value - 0.5 * ce.value).abs() < 1e-9);
    }

    #[test]
    fn focal_single_voxel_closed_form() {
        // p = 0.9 on a lone foreground voxel: -0.5 * 0.1^2 * ln(0.9)
        let mut data = Array3::<u8>::zeros((3, 3, 3));
        data[[1, 1, 1]] = 1;
        let label = LabelMap::new(data, [1.0; 3]).unwrap();
        let mut pred = Array3::from_elem((3, 3, 3), EPS_LOG);
        pred[[1, 1, 1]] = 0.9;
        let out = focal_loss(&pred, &label, 0.5, 2.0, None).unwrap();
        let expected_voxel = -0.5 * 0.1f64.powi(2) * 0.9f64.ln();
        let pv = out.per_voxel.unwrap();
        assert!((pv[[1, 1, 1]] - expected_voxel).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let label = label_ball(6, 2.0);
        let pred = random_probs(6, 43);
        let w = weight_map(&label, 3, 1.0, 40.0, 1.0).unwrap();
        let out = focal_loss(&pred, &label, 0.5, 2.0, Some(&w)).unwrap();
        finite_difference_check(
            &pred,
            &out.grad,
            |p| focal_loss(p, &label, 0.5, 2.0, Some(&w)).unwrap().value,
            1e-4,
        );
    }

    #[test]
    fn dice_loss_cases() {
        let label = label_ball(6, 2.0);
        let pred = label.data.mapv(|y| y as f64);
        let out = soft_dice_loss(&pred, &label, 1.0).unwrap();
        assert!(out.value.abs() < 1e-2); // zero up to eps
        assert!(out.per_voxel.is_none());

        // disjoint with sum(p) = sum(y) = n -> 1 - eps/(2n + eps)
        let mut pd = Array3::<f64>::zeros((6, 6, 6));
        for (idx, y) in label.data.indexed_iter() {
            if *y == 0 && pd.iter().filter(|v| **v > 0.0).count() < label.count() {
                pd[idx] = 1.0;
            }
        }
        let n = label.count() as f64;
        let out = soft_dice_loss(&pd, &label, 1.0).unwrap();
        assert!((out.value - (1.0 - 1.0 / (2.0 * n + 1.0))).abs() < 1e-12);
    }

    #[test]
    fn dice_matches_direct_formula_on_random_input() {
        let label = label_ball(4, 1.5);
        let pred = random_probs(4, 44);
        let out = soft_dice_loss(&pred, &label, 1.0).unwrap();
        let inter: f64 = pred
            .iter()
            .zip(label.data.iter())
            .map(|(p, y)| p * *y as f64)
            .sum();
        let psum: f64 = pred.iter().sum();
        let ysum = label.count() as f64;
        let direct = 1.0 - (2.0 * inter + 1.0) / (psum + ysum + 1.0);
        assert!((out.value - direct).abs() < 1e-12);
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let label = label_ball(6, 2.0);
        let pred = random_probs(6, 45);
        let out = soft_dice_loss(&pred, &label, 1.0).unwrap();
        finite_difference_check(
            &pred,
            &out.grad,
            |p| soft_dice_loss(p, &label, 1.0).unwrap().value,
            1e-4,
        );
    }

    fn gt_sdt_for(label: &LabelMap, clamp: f64) -> DistanceMap {
        let sdt =
            boundary::signed_distance_exact(label, Metric::Euclidean, Units::Voxel).unwrap();
        clamp_sdt(&sdt, clamp)
    }

    #[test]
    fn sdt_loss_basics_and_gradient() {
        let label = label_ball(6, 2.0);
        let gt = gt_sdt_for(&label, 10.0);
        let out = sdt_loss(&gt.data.clone(), &gt, None).unwrap();
        assert_eq!(out.value, 0.0);

        let off = gt.data.mapv(|d| d + 1.0);
        let out = sdt_loss(&off, &gt, None).unwrap();
        assert!((out.value - 1.0).abs() < 1e-12);

        let mut rng = crate::rng::stream(46, "loss-test", &[]);
        let pred = Array3::from_shape_fn((6, 6, 6), |_| rng.random_range(-3.0..3.0));
        let w = weight_map(&label, 3, 1.0, 40.0, 1.0).unwrap();
        let out = sdt_loss(&pred, &gt, Some(&w)).unwrap();
        finite_difference_check(
            &pred,
            &out.grad,
            |p| sdt_loss(p, &gt, Some(&w)).unwrap().value,
            1e-4,
        );
    }

    #[test]
    fn sdt_weighted_toy_hand_arithmetic() {
        // 3x3x3: lone center voxel; weights w_c=0, w1=1, w2=40 at K=3
        let mut data = Array3::<u8>::zeros((3, 3, 3));
        data[[1, 1, 1]] = 1;
        let label = LabelMap::new(data, [1.0; 3]).unwrap();
        let w = weight_map(&label, 3, 1.0, 40.0, 0.0).unwrap();
        let gt = gt_sdt_for(&label, 10.0);
        let pred = gt.data.mapv(|d| d + 0.5);
        let out = sdt_loss(&pred, &gt, Some(&w)).unwrap();
        // residual 0.5 everywhere: weighted mean of w * 0.25
        let wsum: f64 = w.data.iter().sum();
        let expected = 0.25 * wsum / 27.0;
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_zero_for_exact_prediction() {
        let label = label_ball(6, 2.0);
        let pred = label.data.mapv(|y| y as f64);
        let out = soft_hausdorff_loss(&pred, &label, 2.0).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn hausdorff_single_misplaced_voxel() {
        // 5^3 grid, plate label; one false positive at known distance
        let mut data = Array3::<u8>::zeros((5, 5, 5));
        for i in 0..5usize {
            for j in 0..5usize {
                data[[i, j, 0]] = 1;
            }
        }
        let label = LabelMap::new(data, [1.0; 3]).unwrap();
        let mut pred = label.data.mapv(|y| y as f64);
        pred[[2, 2, 2]] = 1.0; // false positive, 2 voxels from the plate
        let d_y = unsigned_boundary_distance(&label).unwrap();
        let bin = LabelMap::new(pred.mapv(|p| u8::from(p >= 0.5)), [1.0; 3]).unwrap();
        let d_p = unsigned_boundary_distance(&bin).unwrap();
        let out = soft_hausdorff_with_maps(&pred, &label, &d_y, &d_p, 2.0).unwrap();
        let expected = (d_y[[2, 2, 2]].powi(2) + d_p[[2, 2, 2]].powi(2)) / 125.0;
        assert!((out.value - expected).abs() < 1e-12);
        assert!(out.value > 0.0);
    }

    #[test]
    fn hausdorff_nonnegative_and_gradient() {
        let label = label_ball(6, 2.0);
        let pred = random_probs(6, 47);
        let d_y = unsigned_boundary_distance(&label).unwrap();
        let bin = LabelMap::new(pred.mapv(|p| u8::from(p >= 0.5)), [1.0; 3]).unwrap();
        let d_p = unsigned_boundary_distance(&bin).unwrap();
        let out = soft_hausdorff_with_maps(&pred, &label, &d_y, &d_p, 2.0).unwrap();
        assert!(out.value >= 0.0);
        // gradient through the differentiable factor, maps held fixed
        finite_difference_check(
            &pred,
            &out.grad,
            |p| {
                soft_hausdorff_with_maps(p, &label, &d_y, &d_p, 2.0)
                    .unwrap()
                    .value
            },
            1e-4,
        );
    }

    #[test]
    fn shape_loss_basics() {
        let label = label_ball(6, 2.0);
        let gt = gt_sdt_for(&label, 10.0);
        let out = shape_loss(&gt.data.clone(), &gt, 1.0).unwrap();
        assert_eq!(out.value, 0.0);

        // H_s gradient at zero is 1/(pi s)
        let s = 1.7;
        assert!((heaviside_grad(0.0, s) - 1.0 / (std::f64::consts::PI * s)).abs() < 1e-15);

        // far beyond the smoothing scale the loss saturates at
        // (H(inf) - H(-inf))^2 = 1 per voxel
        let far = Array3::from_elem((6, 6, 6), 1e9);
        let gt_far = DistanceMap {
            data: Array3::from_elem((6, 6, 6), -1e9),
            metric: Metric::Euclidean,
            units: Units::Voxel,
        };
        let out = shape_loss(&far, &gt_far, 1.0).unwrap();
        assert!((out.value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shape_gradient_matches_finite_differences() {
        let label = label_ball(6, 2.0);
        let gt = gt_sdt_for(&label, 10.0);
        let mut rng = crate::rng::stream(48, "loss-test", &[]);
        let pred = Array3::from_shape_fn((6, 6, 6), |_| rng.random_range(-3.0..3.0));
        let out = shape_loss(&pred, &gt, 1.0).unwrap();
        finite_difference_check(
            &pred,
            &out.grad,
            |p| shape_loss(p, &gt, 1.0).unwrap().value,
            1e-4,
        );
    }

    #[test]
    fn combine_identity_additivity_linearity() {
        let label = label_ball(6, 2.0);
        let pred = random_probs(6, 49);
        let ce = ce_loss(&pred, &label, None).unwrap();
        let dice = soft_dice_loss(&pred, &label, 1.0).unwrap();

        let single = combine(&[(ce.clone(), 1.0)]).unwrap();
        assert_eq!(single.value, ce.value);

        let sum = combine(&[(ce.clone(), 1.0), (dice.clone(), 1.0)]).unwrap();
        assert!((sum.value - (ce.value + dice.value)).abs() < 1e-15);

        let scaled = combine(&[(ce.clone(), 3.0)]).unwrap();
        assert!((scaled.value - 3.0 * ce.value).abs() < 1e-15);
        for (g, s) in ce.grad.iter().zip(scaled.grad.iter()) {
            assert!((3.0 * g - s).abs() < 1e-18);
        }

        assert!(combine(&[]).is_err());
    }

    #[test]
    fn bw_with_unit_weights_is_bitwise_identical() {
        let label = label_ball(6, 2.0);
        let pred = random_probs(6, 50);
        let w = weight_map(&label, 11, 0.0, 0.0, 1.0).unwrap();
        let weighted = ce_loss(&pred, &label, Some(&w)).unwrap();
        let plain = ce_loss(&pred, &label, None).unwrap();
        assert_eq!(weighted.value.to_bits(), plain.value.to_bits());
        for (a, b) in weighted.grad.iter().zip(plain.grad.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let wf = focal_loss(&pred, &label, 0.5, 2.0, Some(&w)).unwrap();
        let pf = focal_loss(&pred, &label, 0.5, 2.0, None).unwrap();
        assert_eq!(wf.value.to_bits(), pf.value.to_bits());
    }

    #[test]
    fn losses_permutation_equivariant() {
        // applying the same voxel permutation to pred, label, and weights
        // leaves the scalar unchanged (up to summation order)
        let label = label_ball(4, 1.5);
        let pred = random_probs(4, 51);
        let w = weight_map(&label, 3, 1.0, 40.0, 1.0).unwrap();

        // permutation: reverse the flattened order
        let rev = |a: &Array3<f64>| {
            let mut v: Vec<f64> = a.iter().copied().collect();
            v.reverse();
            Array3::from_shape_vec(a.dim(), v).unwrap()
        };
        let rev_u8 = |a: &Array3<u8>| {
            let mut v: Vec<u8> = a.iter().copied().collect();
            v.reverse();
            Array3::from_shape_vec(a.dim(), v).unwrap()
        };
        let label_r = LabelMap::new(rev_u8(&label.data), label.spacing).unwrap();
        let w_r = WeightMap {
            data: rev(&w.data),
            params: w.params,
        };
        let a = ce_loss(&pred, &label, Some(&w)).unwrap().value;
        let b = ce_loss(&rev(&pred), &label_r, Some(&w_r)).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ce_focal_monotone_in_p() {
        let label = label_ball(4, 1.5);
        let base = Array3::from_elem((4, 4, 4), 0.5);
        for (idx, y) in label.data.indexed_iter() {
            let mut lower = base.clone();
            let mut higher = base.clone();
            lower[idx] = 0.3;
            higher[idx] = 0.7;
            let l_lo = ce_loss(&lower, &label, None).unwrap().value;
            let l_hi = ce_loss(&higher, &label, None).unwrap().value;
            let f_lo = focal_loss(&lower, &label, 0.5, 2.0, None).unwrap().value;
            let f_hi = focal_loss(&higher, &label, 0.5, 2.0, None).unwrap().value;
            if *y == 1 {
                assert!(l_hi < l_lo);
                assert!(f_hi < f_lo);
            } else {
                assert!(l_hi > l_lo);
                assert!(f_hi > f_lo);
            }
        }
    }

    #[test]
    fn loss_config_parsing_and_modes() {
        for name in benchmark_loss_names() {
            let cfg = LossConfig::named(name);
            assert!(cfg.terms().is_ok(), "{name}");
            let mode = cfg.mode().unwrap();
            let expect_sdt = matches!(name, "BW-SDT" | "SDT" | "Shape+Dice");
            assert_eq!(mode == PredictionMode::Sdt, expect_sdt, "{name}");
        }
        assert!(LossConfig::named("Bogus").terms().is_err());
        assert!(LossConfig::named("CE+SDT").mode().is_err());
    }

    #[test]
    fn config_evaluate_composite() {
        let label = label_ball(6, 2.0);
        let pred = Prediction::probability(random_probs(6, 52)).unwrap();
        let w = weight_map(&label, 3, 1.0, 40.0, 1.0).unwrap();
        let cfg = LossConfig::named("BW-CE+Dice");
        let out = cfg.evaluate(&pred, &label, Some(&w), None).unwrap();
        let ce = ce_loss(&pred.data, &label, Some(&w)).unwrap();
        let dice = soft_dice_loss(&pred.data, &label, 1.0).unwrap();
        assert!((out.value - (ce.value + dice.value)).abs() < 1e-15);

        // missing weight map is a config error
        assert!(cfg.evaluate(&pred, &label, None, None).is_err());

        // SDT-mode composite with Heaviside Dice
        let gt = gt_sdt_for(&label, 10.0);
        let mut rng = crate::rng::stream(53, "loss-test", &[]);
        let sdt_pred =
            Prediction::sdt(Array3::from_shape_fn((6, 6, 6), |_| rng.random_range(-3.0..3.0)));
        let cfg = LossConfig::named("Shape+Dice");
        let out = cfg.evaluate(&sdt_pred, &label, None, Some(&gt)).unwrap();
        assert!(out.value > 0.0);
        finite_difference_check(
            &sdt_pred.data,
            &out.grad,
            |p| {
                cfg.evaluate(&Prediction::sdt(p.clone()), &label, None, Some(&gt))
                    .unwrap()
                    .value
            },
            1e-4,
        );
    }
}
