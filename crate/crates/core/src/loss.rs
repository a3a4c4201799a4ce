//! Training objective: focal loss on category grids, dice loss on masks of
//! positive cells, combined per branch (parts, humans).
//!
//! Losses are functions of the prediction tensors; gradients are with
//! respect to those tensors.

use std::collections::HashMap;

use crate::assign::{GridTargets, LevelId};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, DenseMap};
use crate::scalar::Real;
use crate::scene::InstanceKind;

/// Smoothing term added to the dice denominator.
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    /// Weight of the mask terms.
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    pub part_category: T,
    pub part_mask: T,
    pub human_category: T,
    pub human_mask: T,
    pub lambda: T,
}

/// Network outputs of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPrediction<T> {
    pub level: LevelId,
    /// `C x S x S` probabilities.
    pub categories: DenseMap<T>,
    /// `S^2 x H x W` soft masks.
    pub masks: DenseMap<T>,
}

/// Sigmoid focal loss summed over every cell and class, divided by the number
/// of positive cells plus one.
///
/// `target` holds `S x S` labels: 0 for background, otherwise class + 1.
/// Probabilities may touch 0 or 1 as long as no term needs `log(0)`.
pub fn focal_loss<T: Real>(pred: &DenseMap<T>, target: &[u32], gamma: T, alpha: T) -> Result<(T, DenseMap<T>)> {
    pred.expect_rank(3)?;
    let (classes, s) = (pred.dims()[0], pred.dims()[1]);
    if pred.dims()[2] != s || target.len() != s * s {
        return Err(Error::dims(&[classes, s, s], pred.dims()));
    }
    if !(gamma >= T::zero()) {
        return Err(Error::param("gamma", format!("{gamma} is negative")));
    }
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::param("alpha", format!("{alpha} is outside (0, 1)")));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize > classes) {
        return Err(Error::InvalidValue(format!("target label {bad} exceeds {classes} classes")));
    }
    let cells = s * s;
    let norm = T::from_count(target.iter().filter(|&&t| t != 0).count() + 1);
    let one = T::one();

    let mut value = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for (idx, &p) in pred.data().iter().enumerate() {
        let (c, cell) = (idx / cells, idx % cells);
        let positive = target[cell] as usize == c + 1;
        let (pt, a) = if positive { (p, alpha) } else { (one - p, one - alpha) };
        if !(pt > T::zero() && pt <= one) {
            return Err(Error::ProbabilityOutOfRange {
                index: idx,
                value: p.as_f64(),
            });
        }
        let ln = pt.ln();
        let q = one - pt;
        let weight = q.powf(gamma);
        value = value - a * weight * ln;
        let focus = if gamma == T::zero() || ln == T::zero() {
            T::zero()
        } else {
            gamma * q.powf(gamma - one) * ln
        };
        let d_pt = -a * (weight / pt - focus);
        grad[idx] = if positive { d_pt } else { -d_pt } / norm;
    }
    Ok((value / norm, DenseMap::from_parts(pred.dims().to_vec(), grad)))
}

/// `1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + delta)` and its gradient.
pub fn dice_loss<T: Real>(pred: &DenseMap<T>, gt: &BinaryMask) -> Result<(T, DenseMap<T>)> {
    pred.expect_rank(2)?;
    if pred.dims() != gt.dims() {
        return Err(Error::dims(&gt.dims(), pred.dims()));
    }
    let (value, grad) = dice_slice(pred.data(), gt.data())?;
    Ok((value, DenseMap::from_parts(pred.dims().to_vec(), grad)))
}

fn dice_slice<T: Real>(pred: &[T], gt: &[u8]) -> Result<(T, Vec<T>)> {
    let (mut inter, mut pp, mut gg) = (T::zero(), T::zero(), T::zero());
    for (idx, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if !(p >= T::zero() && p <= T::one()) {
            return Err(Error::ProbabilityOutOfRange {
                index: idx,
                value: p.as_f64(),
            });
        }
        if g != 0 {
            inter = inter + p;
            gg = gg + T::one();
        }
        pp = pp + p * p;
    }
    let den = pp + gg + T::lit(DICE_SMOOTH);
    let two = T::lit(2.0);
    let value = T::one() - two * inter / den;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let g = if g != 0 { T::one() } else { T::zero() };
            (two * two * inter * p) / (den * den) - two * g / den
        })
        .collect();
    Ok((value, grad))
}

/// Full objective `L_cp + λ L_mp + L_ch + λ L_mh`.
///
/// Category terms are summed over levels of each branch. Mask terms are the
/// mean dice loss over every positive cell of the branch, 0 when it has none.
/// Ground-truth masks larger than the predicted masks by an integer factor
/// are downsampled to match. Levels are matched by id, so input order does
/// not matter.
pub fn total_loss<T: Real>(
    predictions: &[LevelPrediction<T>],
    targets: &[GridTargets],
    params: &LossParams,
) -> Result<LossReport<T>> {
    if predictions.len() != targets.len() {
        return Err(Error::LevelMismatch(format!(
            "{} prediction levels for {} target levels",
            predictions.len(),
            targets.len()
        )));
    }
    let mut ordered: Vec<&GridTargets> = targets.iter().collect();
    ordered.sort_by_key(|t| t.level);

    let (gamma, alpha) = (T::lit(params.gamma), T::lit(params.alpha));
    let mut cat = [T::zero(); 2];
    let mut dice_sum = [T::zero(); 2];
    let mut dice_n = [0usize; 2];
    let mut reduced: HashMap<(usize, usize), BinaryMask> = HashMap::new();

    for t in ordered {
        let pred = predictions
            .iter()
            .find(|p| p.level == t.level)
            .ok_or_else(|| Error::LevelMismatch(format!("no prediction for level {}", t.level)))?;
        pred.masks.expect_rank(3)?;
        if pred.categories.dims().get(1) != Some(&t.grid) || pred.masks.dims()[0] != t.grid * t.grid {
            return Err(Error::LevelMismatch(format!("level {} grid size differs from its targets", t.level)));
        }
        let branch = match t.kind {
            InstanceKind::Part => 0,
            InstanceKind::Human => 1,
        };
        cat[branch] = cat[branch] + focal_loss(&pred.categories, &t.category_target, gamma, alpha)?.0;

        let (mh, mw) = (pred.masks.dims()[1], pred.masks.dims()[2]);
        for (&cell, target) in &t.mask_targets {
            let [gh, gw] = target.mask.dims();
            let gt: &BinaryMask = if [gh, gw] == [mh, mw] {
                &target.mask
            } else {
                if gh % mh != 0 || gw % mw != 0 || gh / mh != gw / mw {
                    return Err(Error::dims(&[mh, mw], &[gh, gw]));
                }
                let key = (target.instance, gh / mh);
                if let std::collections::hash_map::Entry::Vacant(e) = reduced.entry(key) {
                    e.insert(target.mask.downsample(gh / mh)?);
                }
                &reduced[&key]
            };
            let (v, _) = dice_slice(pred.masks.plane(cell), gt.data())?;
            dice_sum[branch] = dice_sum[branch] + v;
            dice_n[branch] += 1;
        }
    }
    let mean = |b: usize| {
        if dice_n[b] == 0 {
            T::zero()
        } else {
            dice_sum[b] / T::from_count(dice_n[b])
        }
    };
    let lambda = T::lit(params.lambda);
    let (part_mask, human_mask) = (mean(0), mean(1));
    Ok(LossReport {
        total: cat[0] + lambda * part_mask + cat[1] + lambda * human_mask,
        part_category: cat[0],
        part_mask,
        human_category: cat[1],
        human_mask,
        lambda,
    })
}

/// Worst disagreement between an analytic gradient and central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    pub points: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_relative_error: f64,
}

/// Step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-4;

fn central_difference(x: &mut [f64], i: usize, f: &dyn Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    let orig = x[i];
    x[i] = orig + FD_STEP;
    let up = f(x)?;
    x[i] = orig - FD_STEP;
    let down = f(x)?;
    x[i] = orig;
    Ok((up - down) / (2.0 * FD_STEP))
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares the focal and dice gradients with central differences at
/// `points` random inputs each. Probabilities are drawn from `[0.05, 0.95]`
/// so that every perturbed input stays valid. Returns `(focal, dice)`.
pub fn check_gradients(points: usize, seed: u64) -> Result<(GradientCheck, GradientCheck)> {
    let mut rng = crate::synth::Draw::new(seed);
    let prob = |rng: &mut crate::synth::Draw| 0.05 + 0.9 * rng.unit();
    let params = LossParams::default();
    let mut focal_worst = 0.0f64;
    let mut dice_worst = 0.0f64;
    for _ in 0..points {
        let (classes, s) = (rng.range(1, 4), rng.range(1, 4));
        let target: Vec<u32> = (0..s * s).map(|_| rng.range(0, classes) as u32).collect();
        let dims = vec![classes, s, s];
        let mut x: Vec<f64> = (0..classes * s * s).map(|_| prob(&mut rng)).collect();
        let f = |v: &[f64]| -> Result<f64> {
            Ok(focal_loss(&DenseMap::new(dims.clone(), v.to_vec())?, &target, params.gamma, params.alpha)?.0)
        };
        let (_, grad) = focal_loss(&DenseMap::new(dims.clone(), x.clone())?, &target, params.gamma, params.alpha)?;
        for i in 0..x.len() {
            let n = central_difference(&mut x, i, &f)?;
            focal_worst = focal_worst.max(relative_error(grad.data()[i], n));
        }

        let (h, w) = (rng.range(1, 6), rng.range(1, 6));
        let gt = BinaryMask::from_vec(h, w, (0..h * w).map(|_| rng.range(0, 1) as u8).collect())?;
        let mut x: Vec<f64> = (0..h * w).map(|_| prob(&mut rng)).collect();
        let f = |v: &[f64]| -> Result<f64> { Ok(dice_loss(&DenseMap::new(vec![h, w], v.to_vec())?, &gt)?.0) };
        let (_, grad) = dice_loss(&DenseMap::new(vec![h, w], x.clone())?, &gt)?;
        for i in 0..x.len() {
            let n = central_difference(&mut x, i, &f)?;
            dice_worst = dice_worst.max(relative_error(grad.data()[i], n));
        }
    }
    Ok((
        GradientCheck { points, max_relative_error: focal_worst },
        GradientCheck { points, max_relative_error: dice_worst },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_closed_form_single_cell() {
        let pred = DenseMap::new(vec![1, 1, 1], vec![0.5f64]).unwrap();
        let (v, _) = focal_loss(&pred, &[1], 0.0, 0.5).unwrap();
        // one positive cell: divided by 2
        assert!((v * 2.0 - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((0.5 * 2f64.ln() - 0.34657).abs() < 1e-5);
    }

    #[test]
    fn focal_perfect_prediction_is_zero() {
        // 2 classes, 2x2 grid, cell 0 -> class 1, cell 3 -> class 0
        let target = [2, 0, 0, 1];
        let mut p = vec![0.0f64; 8];
        p[3] = 1.0;
        p[4] = 1.0;
        let pred = DenseMap::new(vec![2, 2, 2], p).unwrap();
        let (v, g) = focal_loss(&pred, &target, 2.0, 0.25).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn focal_rejects_log_zero_and_bad_params() {
        let pred = DenseMap::new(vec![1, 1, 1], vec![0.0f64]).unwrap();
        assert!(matches!(focal_loss(&pred, &[1], 2.0, 0.25), Err(Error::ProbabilityOutOfRange { .. })));
        let pred = DenseMap::new(vec![1, 1, 1], vec![0.3f64]).unwrap();
        assert!(focal_loss(&pred, &[1], -1.0, 0.25).is_err());
        assert!(focal_loss(&pred, &[1], 2.0, 1.0).is_err());
        assert!(focal_loss(&pred, &[2], 2.0, 0.25).is_err());
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let gt = BinaryMask::from_vec(2, 3, vec![1, 1, 0, 0, 1, 0]).unwrap();
        let pred = DenseMap::<f64>::from_mask(&gt);
        let (v, g) = dice_loss(&pred, &gt).unwrap();
        assert!(v.abs() < 1e-6);
        assert!(g.data().iter().all(|x| x.abs() < 1e-6));
        let inv = pred.map(|x| 1.0 - x).unwrap();
        let (v, _) = dice_loss(&inv, &gt).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let wrong = DenseMap::<f64>::zeros(vec![3, 2]).unwrap();
        assert!(dice_loss(&wrong, &gt).is_err());
    }
}
