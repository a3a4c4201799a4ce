//! Multi-human parsing metrics.
//!
//! Predictions from all images are pooled and ranked by parsing score (ties by
//! image, then input order). Each prediction in turn is matched to the
//! still-unmatched ground-truth person of its image with the highest
//! similarity; it is a true positive when that similarity exceeds the
//! threshold, which also consumes the person. AP is the area under the
//! precision envelope of the resulting precision/recall curve.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grouping::ParsingResult;
use crate::mask::iou;
use crate::scalar::Real;
use crate::scene::GtHuman;

/// Thresholds 0.1, 0.2, ..., 0.9.
pub fn volume_thresholds() -> impl Iterator<Item = f64> {
    (1..=9).map(|i| i as f64 / 10.0)
}

/// Predictions and ground truth of one image.
#[derive(Clone, Copy, Debug)]
pub struct ImageEval<'a, T> {
    pub results: &'a [ParsingResult<T>],
    pub gts: &'a [GtHuman],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve<T> {
    /// `(recall, precision)` after each ranked prediction.
    pub points: Vec<(T, T)>,
    pub ap: T,
}

/// Outcome of one matching pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome<T> {
    pub curve: PrCurve<T>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// For every image, for every ground-truth person, the matched prediction.
    pub matches: Vec<Vec<Option<usize>>>,
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    /// Matching threshold; `None` for averaged metrics.
    pub threshold: Option<f64>,
    pub value: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} = {:.6}", self.metric, self.value)?;
        if let Some(t) = self.threshold {
            write!(f, " (t={t:.2} tp={} fp={} fn={})", self.tp, self.fp, self.fn_)?;
        }
        Ok(())
    }
}

/// Mean per-category pixel IoU over the categories present in either side.
pub fn mean_part_iou<T: Real>(pred: &ParsingResult<T>, gt: &GtHuman) -> Result<T> {
    if pred.category_map.dims() != gt.human_mask.dims() {
        return Err(crate::error::Error::dims(&gt.human_mask.dims(), &pred.category_map.dims()));
    }
    let mut cats: Vec<u32> = gt.parts.iter().map(|(c, _)| *c).collect();
    cats.extend(pred.category_map.labels().into_iter().map(|l| l - 1));
    cats.sort_unstable();
    cats.dedup();
    if cats.is_empty() {
        return Ok(T::zero());
    }
    let labels = pred.category_map.data();
    let mut total = T::zero();
    for &c in &cats {
        let (inter, union) = match gt.part_mask(c) {
            Some(g) => labels.iter().zip(g.data()).fold((0usize, 0usize), |(i, u), (&l, &g)| {
                let p = l == c + 1;
                let g = g != 0;
                (i + (p && g) as usize, u + (p || g) as usize)
            }),
            None => (0, labels.iter().filter(|&&l| l == c + 1).count()),
        };
        if union > 0 {
            total = total + T::from_count(inter) / T::from_count(union);
        }
    }
    Ok(total / T::from_count(cats.len()))
}

/// Whole-person mask IoU.
pub fn person_iou<T: Real>(pred: &ParsingResult<T>, gt: &GtHuman) -> Result<T> {
    iou(&pred.human_mask, &gt.human_mask)
}

/// Area under the precision envelope of a ranked list of hit flags.
pub fn average_precision<T: Real>(hits: &[bool], num_gt: usize) -> PrCurve<T> {
    let mut points = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        let recall = if num_gt == 0 { T::zero() } else { T::from_count(tp) / T::from_count(num_gt) };
        points.push((recall, T::from_count(tp) / T::from_count(k + 1)));
    }
    if num_gt == 0 {
        return PrCurve { points, ap: T::zero() };
    }
    let mut envelope: Vec<T> = points.iter().map(|p| p.1).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = T::zero();
    let mut prev = T::zero();
    for (&(r, _), &p) in points.iter().zip(&envelope) {
        ap = ap + (r - prev) * p;
        prev = r;
    }
    PrCurve { points, ap }
}

/// Similarity of every prediction to every ground-truth person, per image:
/// `tables[image][prediction][person]`.
pub type SimilarityTables<T> = Vec<Vec<Vec<T>>>;

pub fn similarity_tables<T, F>(images: &[ImageEval<'_, T>], similarity: F) -> Result<SimilarityTables<T>>
where
    T: Real,
    F: Fn(&ParsingResult<T>, &GtHuman) -> Result<T> + Sync,
{
    images
        .par_iter()
        .map(|img| {
            img.results
                .iter()
                .map(|r| img.gts.iter().map(|g| similarity(r, g)).collect())
                .collect()
        })
        .collect()
}

/// Greedy score-ordered matching on precomputed similarities.
pub fn match_tables<T: Real>(images: &[ImageEval<'_, T>], tables: &SimilarityTables<T>, t: T) -> MatchOutcome<T> {
    let mut ranked: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| (0..img.results.len()).map(move |r| (i, r)))
        .collect();
    ranked.sort_by(|&(ia, ra), &(ib, rb)| {
        let (sa, sb) = (images[ia].results[ra].parsing_score, images[ib].results[rb].parsing_score);
        sb.partial_cmp(&sa).unwrap().then((ia, ra).cmp(&(ib, rb)))
    });

    let mut matches: Vec<Vec<Option<usize>>> = images.iter().map(|img| vec![None; img.gts.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for (img, r) in ranked {
        let mut best: Option<(usize, T)> = None;
        for (g, &s) in tables[img][r].iter().enumerate() {
            if matches[img][g].is_none() && best.is_none_or(|(_, b)| s > b) {
                best = Some((g, s));
            }
        }
        let hit = match best {
            Some((g, s)) if s > t => {
                matches[img][g] = Some(r);
                true
            }
            _ => false,
        };
        hits.push(hit);
    }
    let num_gt: usize = images.iter().map(|i| i.gts.len()).sum();
    let tp = hits.iter().filter(|&&h| h).count();
    MatchOutcome {
        curve: average_precision(&hits, num_gt),
        tp,
        fp: hits.len() - tp,
        fn_: num_gt - tp,
        matches,
    }
}

/// Part-based AP at threshold `t`.
pub fn ap_p<T: Real>(images: &[ImageEval<'_, T>], t: T) -> Result<MatchOutcome<T>> {
    Ok(match_tables(images, &similarity_tables(images, mean_part_iou)?, t))
}

fn volume_ap<T: Real>(images: &[ImageEval<'_, T>], tables: &SimilarityTables<T>) -> T {
    let sum = volume_thresholds().fold(T::zero(), |acc, t| acc + match_tables(images, tables, T::lit(t)).curve.ap);
    sum / T::lit(9.0)
}

/// Mean of part-based AP over thresholds 0.1..=0.9.
pub fn ap_p_vol<T: Real>(images: &[ImageEval<'_, T>]) -> Result<T> {
    Ok(volume_ap(images, &similarity_tables(images, mean_part_iou)?))
}

/// Region-based AP at threshold `t`, matching on whole-person IoU.
pub fn ap_r<T: Real>(images: &[ImageEval<'_, T>], t: T) -> Result<MatchOutcome<T>> {
    Ok(match_tables(images, &similarity_tables(images, person_iou)?, t))
}

pub fn ap_r_vol<T: Real>(images: &[ImageEval<'_, T>]) -> Result<T> {
    Ok(volume_ap(images, &similarity_tables(images, person_iou)?))
}

/// Fraction of a person's categories whose pixel IoU exceeds 0.5.
pub fn person_pcp<T: Real>(pred: Option<&ParsingResult<T>>, gt: &GtHuman) -> Result<T> {
    let Some(pred) = pred else {
        return Ok(T::zero());
    };
    let half = T::lit(0.5);
    let mut parsed = 0usize;
    for (c, mask) in &gt.parts {
        if iou::<T>(&pred.category_map.mask_of(c + 1), mask)? > half {
            parsed += 1;
        }
    }
    Ok(T::from_count(parsed) / T::from_count(gt.parts.len()))
}

/// Mean per-person PCP at IoU 0.5; unmatched people count as 0.
pub fn pcp50<T: Real>(images: &[ImageEval<'_, T>]) -> Result<T> {
    pcp_from(images, &ap_p(images, T::lit(0.5))?)
}

fn pcp_from<T: Real>(images: &[ImageEval<'_, T>], outcome: &MatchOutcome<T>) -> Result<T> {
    let (mut sum, mut n) = (T::zero(), 0usize);
    for (img, matched) in images.iter().zip(&outcome.matches) {
        for (gt, m) in img.gts.iter().zip(matched) {
            sum = sum + person_pcp(m.map(|r| &img.results[r]), gt)?;
            n += 1;
        }
    }
    Ok(if n == 0 { T::zero() } else { sum / T::from_count(n) })
}

/// Full report: AP^p at 0.5, AP^p_vol, PCP_50, AP^r at 0.5/0.6/0.7 and AP^r_vol.
pub fn evaluate<T: Real>(images: &[ImageEval<'_, T>]) -> Result<Vec<MetricRecord>> {
    let record = |metric: &str, threshold: Option<f64>, value: T, o: Option<&MatchOutcome<T>>| MetricRecord {
        metric: metric.to_string(),
        threshold,
        value: value.as_f64(),
        tp: o.map_or(0, |o| o.tp),
        fp: o.map_or(0, |o| o.fp),
        fn_: o.map_or(0, |o| o.fn_),
    };
    let parts = similarity_tables(images, mean_part_iou)?;
    let persons = similarity_tables(images, person_iou)?;
    let mut out = Vec::new();
    let p50 = match_tables(images, &parts, T::lit(0.5));
    out.push(record("AP^p_50", Some(0.5), p50.curve.ap, Some(&p50)));
    out.push(record("AP^p_vol", None, volume_ap(images, &parts), None));
    out.push(record("PCP_50", None, pcp_from(images, &p50)?, None));
    for (name, t) in [("AP^r_50", 0.5), ("AP^r_60", 0.6), ("AP^r_70", 0.7)] {
        let o = match_tables(images, &persons, T::lit(t));
        out.push(record(name, Some(t), o.curve.ap, Some(&o)));
    }
    out.push(record("AP^r_vol", None, volume_ap(images, &persons), None));
    Ok(out)
}
