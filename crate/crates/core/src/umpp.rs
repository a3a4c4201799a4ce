//! Prototype-based mask synthesis.
//!
//! Every grid cell owns a coefficient vector over a bank of `K` shared
//! prototype maps. Its soft mask is the sigmoid of the coefficient-weighted
//! sum of the prototypes, i.e. one matrix product followed by a sigmoid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grouping::ScoredInstance;
use crate::mask::{threshold_slice, DenseMap};
use crate::scalar::{sigmoid, Real};

/// Default number of prototypes.
pub const DEFAULT_PROTOTYPES: usize = 256;

/// Default binarization threshold for soft masks.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// `K x H x W` prototype maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T>(DenseMap<T>);

/// `K x S x S` mask coefficients of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientGrid<T>(DenseMap<T>);

/// `C x S x S` category scores of one level, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryGrid<T>(DenseMap<T>);

impl<T: Real> PrototypeBank<T> {
    pub fn new(map: DenseMap<T>) -> Result<Self> {
        map.expect_rank(3)?;
        Ok(Self(map))
    }

    pub fn count(&self) -> usize {
        self.0.dims()[0]
    }

    /// `(H, W)`.
    pub fn extent(&self) -> (usize, usize) {
        (self.0.dims()[1], self.0.dims()[2])
    }

    pub fn map(&self) -> &DenseMap<T> {
        &self.0
    }

    pub fn into_map(self) -> DenseMap<T> {
        self.0
    }
}

impl<T: Real> CoefficientGrid<T> {
    pub fn new(map: DenseMap<T>) -> Result<Self> {
        map.expect_rank(3)?;
        if map.dims()[1] != map.dims()[2] {
            return Err(Error::InvalidValue(format!("coefficient grid is not square: {:?}", map.dims())));
        }
        Ok(Self(map))
    }

    pub fn count(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn grid(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn map(&self) -> &DenseMap<T> {
        &self.0
    }

    pub fn map_mut(&mut self) -> &mut DenseMap<T> {
        &mut self.0
    }

    pub fn into_map(self) -> DenseMap<T> {
        self.0
    }
}

impl<T: Real> CategoryGrid<T> {
    pub fn new(map: DenseMap<T>) -> Result<Self> {
        map.expect_rank(3)?;
        if map.dims()[1] != map.dims()[2] {
            return Err(Error::InvalidValue(format!("category grid is not square: {:?}", map.dims())));
        }
        if let Some(pos) = map.data().iter().position(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::ProbabilityOutOfRange {
                index: pos,
                value: map.data()[pos].as_f64(),
            });
        }
        Ok(Self(map))
    }

    pub fn classes(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn grid(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn map(&self) -> &DenseMap<T> {
        &self.0
    }

    pub fn into_map(self) -> DenseMap<T> {
        self.0
    }
}

/// Soft masks for every cell: `out[i*S + j, y, x] = sigmoid(sum_k F[k,i,j] * P[k,y,x])`.
///
/// The sum runs over `k` in ascending order for every pixel, so the result is
/// reproducible bit for bit. Terms with a zero coefficient are skipped; adding
/// `0 * P` to a finite accumulator leaves it unchanged up to the sign of zero,
/// which the sigmoid does not see.
pub fn combine_masks<T: Real>(prototypes: &PrototypeBank<T>, coefficients: &CoefficientGrid<T>) -> Result<DenseMap<T>> {
    let k = prototypes.count();
    if coefficients.count() != k {
        return Err(Error::dims(&[k], &[coefficients.count()]));
    }
    let s = coefficients.grid();
    let (h, w) = prototypes.extent();
    let plane = h * w;
    let cells = s * s;
    let coef = coefficients.map().data();
    let protos = prototypes.map().data();
    let half = T::lit(0.5);

    let mut out = vec![T::zero(); cells * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(cell, dst)| {
        let mut touched = false;
        for kk in 0..k {
            let f = coef[kk * cells + cell];
            if f == T::zero() {
                continue;
            }
            touched = true;
            let src = &protos[kk * plane..(kk + 1) * plane];
            for (acc, &p) in dst.iter_mut().zip(src) {
                *acc = *acc + f * p;
            }
        }
        if touched {
            dst.iter_mut().for_each(|v| *v = sigmoid(*v));
        } else {
            dst.iter_mut().for_each(|v| *v = half);
        }
    });
    Ok(DenseMap::from_parts(vec![cells, h, w], out))
}

/// Mean soft value over the pixels above `t`; 0 when no pixel exceeds `t`.
pub fn segmentation_score<T: Real>(soft: &DenseMap<T>, t: T) -> Result<T> {
    soft.expect_rank(2)?;
    check_threshold(t)?;
    Ok(masked_mean(soft.data(), t))
}

fn masked_mean<T: Real>(values: &[T], t: T) -> T {
    let (mut sum, mut n) = (T::zero(), 0usize);
    for &v in values {
        if v > t {
            sum = sum + v;
            n += 1;
        }
    }
    if n == 0 {
        T::zero()
    } else {
        sum / T::from_count(n)
    }
}

fn check_threshold<T: Real>(t: T) -> Result<()> {
    if !(t > T::zero() && t < T::one()) {
        return Err(Error::param("threshold", format!("{t} is outside (0, 1)")));
    }
    Ok(())
}

/// One scored instance per cell whose binarized mask is nonempty.
///
/// The category is the argmax over classes (lowest index on ties) and the
/// score is that class probability times the segmentation score of the mask.
/// Output is in cell order.
pub fn extract_candidates<T: Real>(
    categories: &CategoryGrid<T>,
    masks: &DenseMap<T>,
    t_bin: T,
) -> Result<Vec<ScoredInstance<T>>> {
    check_threshold(t_bin)?;
    masks.expect_rank(3)?;
    let s = categories.grid();
    let cells = s * s;
    if masks.dims()[0] != cells {
        return Err(Error::dims(&[cells], &masks.dims()[..1]));
    }
    let (h, w) = (masks.dims()[1], masks.dims()[2]);
    let classes = categories.classes();
    let cat = categories.map().data();

    let found: Vec<Option<ScoredInstance<T>>> = (0..cells)
        .into_par_iter()
        .map(|cell| {
            let soft = masks.plane(cell);
            let mask = threshold_slice(soft, h, w, t_bin)?;
            if mask.is_empty() {
                return Ok(None);
            }
            let mut best = 0;
            for c in 1..classes {
                if cat[c * cells + cell] > cat[best * cells + cell] {
                    best = c;
                }
            }
            let score = cat[best * cells + cell] * masked_mean(soft, t_bin);
            Ok(Some(ScoredInstance::new(mask, best as u32, score.min(T::one()))?))
        })
        .collect::<Result<_>>()?;
    Ok(found.into_iter().flatten().collect())
}
