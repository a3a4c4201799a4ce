//! Inference-time grouping of part instances into per-human parsing results.
//!
//! The pipeline is: keep the best-scoring parts, suppress duplicate humans
//! with matrix NMS, measure how much of every part lies inside every human,
//! then paint each human with the parts it owns.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelMap};
use crate::scalar::Real;

/// A binarized instance mask with its class and confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredInstance<T> {
    pub mask: BinaryMask,
    pub category: u32,
    pub score: T,
}

impl<T: Real> ScoredInstance<T> {
    pub fn new(mask: BinaryMask, category: u32, score: T) -> Result<Self> {
        if !(score >= T::zero() && score <= T::one()) {
            return Err(Error::InvalidValue(format!("instance score {score} is outside [0, 1]")));
        }
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Self { mask, category, score })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum NmsKernel {
    Gaussian,
    Linear,
}

/// Grouping thresholds. The fractional defaults are exactly 1/3 and 2/3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    /// Maximum number of parts kept.
    pub n_part: usize,
    /// Parts must score strictly above this.
    pub s_part: f64,
    /// Humans must score strictly above this before NMS.
    pub s_human: f64,
    /// A part joins a human when its overlap ratio is strictly above this.
    pub r_human: f64,
    pub nms_kernel: NmsKernel,
    pub nms_sigma: f64,
    /// Maximum number of humans kept after NMS.
    pub n_human: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            n_part: 200,
            s_part: 1.0 / 3.0,
            s_human: 0.1,
            r_human: 2.0 / 3.0,
            nms_kernel: NmsKernel::Gaussian,
            nms_sigma: 2.0,
            n_human: 100,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_part", self.s_part), ("s_human", self.s_human), ("r_human", self.r_human)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(name, format!("{v} is outside [0, 1]")));
            }
        }
        if self.n_part == 0 || self.n_human == 0 {
            return Err(Error::param("count", "n_part and n_human must be at least 1"));
        }
        if !(self.nms_sigma > 0.0) {
            return Err(Error::param("nms_sigma", format!("{} is not positive", self.nms_sigma)));
        }
        Ok(())
    }
}

/// One parsed person.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsingResult<T> {
    /// Final person mask: the human mask restricted to its selected parts.
    pub human_mask: BinaryMask,
    /// Class + 1 of the part that claimed each pixel; 0 elsewhere.
    pub category_map: LabelMap,
    pub parsing_score: T,
}

/// Stable descending order by score; equal scores keep input order.
fn order_by_score<T: Real>(items: &[ScoredInstance<T>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| items[b].score.partial_cmp(&items[a].score).unwrap());
    idx
}

/// Parts scoring above `s_part`, best first, at most `n_part` of them.
pub fn select_parts<T: Real>(candidates: &[ScoredInstance<T>], cfg: &GroupingConfig) -> Vec<ScoredInstance<T>> {
    let floor = T::lit(cfg.s_part);
    let kept: Vec<ScoredInstance<T>> = candidates.iter().filter(|c| c.score > floor).cloned().collect();
    order_by_score(&kept)
        .into_iter()
        .take(cfg.n_part)
        .map(|i| kept[i].clone())
        .collect()
}

fn nms_kernel<T: Real>(kernel: NmsKernel, sigma: T, iou: T) -> T {
    match kernel {
        NmsKernel::Gaussian => (-(iou * iou) / sigma).exp(),
        NmsKernel::Linear => T::one() - iou,
    }
}

/// Pairwise mask IoU of `masks`, computed with one matrix product.
pub fn iou_matrix<T: Real>(masks: &[&BinaryMask]) -> Result<Array2<T>> {
    let flat = flatten(masks)?;
    let inter = flat.dot(&flat.t());
    let areas: Vec<T> = (0..masks.len()).map(|i| inter[[i, i]]).collect();
    Ok(Array2::from_shape_fn((masks.len(), masks.len()), |(i, j)| {
        let union = areas[i] + areas[j] - inter[[i, j]];
        if union > T::zero() {
            inter[[i, j]] / union
        } else {
            T::zero()
        }
    }))
}

fn flatten<T: Real>(masks: &[&BinaryMask]) -> Result<Array2<T>> {
    let Some(first) = masks.first() else {
        return Ok(Array2::zeros((0, 0)));
    };
    let n = first.data().len();
    let mut flat = Array2::<T>::zeros((masks.len(), n));
    for (row, m) in masks.iter().enumerate() {
        if m.dims() != first.dims() {
            return Err(Error::dims(&first.dims(), &m.dims()));
        }
        for (dst, &v) in flat.row_mut(row).iter_mut().zip(m.data()) {
            if v != 0 {
                *dst = T::one();
            }
        }
    }
    Ok(flat)
}

/// Matrix NMS over human candidates.
///
/// Humans at or below `s_human` are dropped and the rest sorted by score.
/// Mask `j` is decayed by `min_i f(iou_ij) / f(iou_max_i)` over every
/// higher-ranked `i`, where `iou_max_i` is the largest IoU of `i` with any
/// mask ranked above it. The survivors are re-ranked by decayed score and cut
/// to `n_human`.
pub fn matrix_nms<T: Real>(humans: &[ScoredInstance<T>], cfg: &GroupingConfig) -> Result<Vec<ScoredInstance<T>>> {
    let floor = T::lit(cfg.s_human);
    let kept: Vec<ScoredInstance<T>> = humans.iter().filter(|h| h.score > floor).cloned().collect();
    let sorted: Vec<ScoredInstance<T>> = order_by_score(&kept).into_iter().map(|i| kept[i].clone()).collect();
    let n = sorted.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let masks: Vec<&BinaryMask> = sorted.iter().map(|h| &h.mask).collect();
    let ious = iou_matrix::<T>(&masks)?;
    let sigma = T::lit(cfg.nms_sigma);

    let compensate: Vec<T> = (0..n)
        .map(|i| (0..i).map(|k| ious[[k, i]]).fold(T::zero(), T::max))
        .collect();
    let mut decayed: Vec<ScoredInstance<T>> = sorted
        .into_iter()
        .enumerate()
        .map(|(j, mut h)| {
            // a fully suppressed mask (linear kernel, f = 0) suppresses nothing
            let decay = (0..j)
                .filter_map(|i| {
                    let denom = nms_kernel(cfg.nms_kernel, sigma, compensate[i]);
                    (denom > T::zero()).then(|| nms_kernel(cfg.nms_kernel, sigma, ious[[i, j]]) / denom)
                })
                .fold(T::one(), T::min);
            h.score = h.score * decay;
            h
        })
        .collect();
    let order = order_by_score(&decayed);
    let mut out: Vec<Option<ScoredInstance<T>>> = decayed.drain(..).map(Some).collect();
    Ok(order
        .into_iter()
        .take(cfg.n_human)
        .map(|i| out[i].take().expect("each index taken once"))
        .collect())
}

/// `ratio[h, p] = |part_p ∩ human_h| / |part_p|`, via one matrix product of
/// the flattened masks.
pub fn overlap_ratios<T: Real>(parts: &[ScoredInstance<T>], humans: &[ScoredInstance<T>]) -> Result<Array2<T>> {
    if parts.is_empty() || humans.is_empty() {
        return Ok(Array2::zeros((humans.len(), parts.len())));
    }
    if parts[0].mask.dims() != humans[0].mask.dims() {
        return Err(Error::dims(&humans[0].mask.dims(), &parts[0].mask.dims()));
    }
    let h = flatten::<T>(&humans.iter().map(|i| &i.mask).collect::<Vec<_>>())?;
    let p = flatten::<T>(&parts.iter().map(|i| &i.mask).collect::<Vec<_>>())?;
    let inter = h.dot(&p.t());
    let part_area = p.sum_axis(ndarray::Axis(1));
    if let Some(idx) = part_area.iter().position(|&a| a == T::zero()) {
        return Err(Error::InvalidValue(format!("part {idx} has zero area")));
    }
    Ok(Array2::from_shape_fn(inter.dim(), |(hi, pi)| inter[[hi, pi]] / part_area[pi]))
}

/// Builds one parsing result per human that owns at least one part.
///
/// Parts with ratio above `r_human` are painted in order of descending score
/// (ties: lower class, then input order); the first part to cover a pixel of
/// the human claims it. The parsing score is the human score times the mean
/// claiming-part score over the final mask.
pub fn assemble<T: Real>(
    humans: &[ScoredInstance<T>],
    parts: &[ScoredInstance<T>],
    ratios: &Array2<T>,
    cfg: &GroupingConfig,
) -> Result<Vec<ParsingResult<T>>> {
    if ratios.dim() != (humans.len(), parts.len()) {
        return Err(Error::dims(&[humans.len(), parts.len()], &[ratios.dim().0, ratios.dim().1]));
    }
    let r_min = T::lit(cfg.r_human);
    let mut paint_order: Vec<usize> = (0..parts.len()).collect();
    paint_order.sort_by(|&a, &b| {
        parts[b]
            .score
            .partial_cmp(&parts[a].score)
            .unwrap()
            .then(parts[a].category.cmp(&parts[b].category))
    });

    let built: Vec<Option<ParsingResult<T>>> = humans
        .par_iter()
        .enumerate()
        .map(|(hi, human)| {
            let selected: Vec<usize> = paint_order.iter().copied().filter(|&p| ratios[[hi, p]] > r_min).collect();
            if selected.is_empty() {
                return Ok(None);
            }
            let [height, width] = human.mask.dims();
            let mut labels = LabelMap::zeros(height, width)?;
            let mut claimed_score = vec![T::zero(); height * width];
            let hm = human.mask.data();
            for &p in &selected {
                let part = &parts[p];
                if part.mask.dims() != human.mask.dims() {
                    return Err(Error::dims(&human.mask.dims(), &part.mask.dims()));
                }
                for ((px, label), (&inside, &covered)) in claimed_score
                    .iter_mut()
                    .zip(labels.data_mut())
                    .zip(hm.iter().zip(part.mask.data()))
                {
                    if inside != 0 && covered != 0 && *label == 0 {
                        *label = part.category + 1;
                        *px = part.score;
                    }
                }
            }
            let final_mask = labels.support();
            let area = final_mask.area();
            if area == 0 {
                return Ok(None);
            }
            let total: T = labels
                .data()
                .iter()
                .zip(&claimed_score)
                .filter(|(&l, _)| l != 0)
                .map(|(_, &s)| s)
                .sum();
            Ok(Some(ParsingResult {
                human_mask: final_mask,
                category_map: labels,
                parsing_score: human.score * (total / T::from_count(area)),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(built.into_iter().flatten().collect())
}

/// Part selection, human NMS, overlap ratios and assembly, in that order.
pub fn run_pipeline<T: Real>(
    part_candidates: &[ScoredInstance<T>],
    human_candidates: &[ScoredInstance<T>],
    cfg: &GroupingConfig,
) -> Result<Vec<ParsingResult<T>>> {
    cfg.validate()?;
    let parts = select_parts(part_candidates, cfg);
    let humans = matrix_nms(human_candidates, cfg)?;
    let ratios = overlap_ratios(&parts, &humans)?;
    assemble(&humans, &parts, &ratios, cfg)
}
