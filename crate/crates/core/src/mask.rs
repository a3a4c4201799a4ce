//! Binary masks, dense real-valued maps and the primitive operations on them.
//!
//! Pixel coordinates are zero-based with `x` the column and `y` the row.
//! All buffers are row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A `height x width` grid of 0/1 values.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        check_extent(height, width)?;
        Ok(Self {
            height,
            width,
            data: vec![0; height * width],
        })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_extent(height, width)?;
        if data.len() != height * width {
            return Err(Error::dims(&[height * width], &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidValue(format!(
                "mask element {pos} is {}, expected 0 or 1",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a mask by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut mask = Self::zeros(height, width)?;
        for y in 0..height {
            for x in 0..width {
                mask.data[y * width + x] = f(x, y) as u8;
            }
        }
        Ok(mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(&self.dims(), &other.dims()));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Self) -> Result<usize> {
        self.check_same(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a & b) as usize)
            .sum())
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a | b)
    }

    /// Foreground of `self` with the foreground of `other` removed.
    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    fn zip_with(&self, other: &Self, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Nearest-neighbour enlargement: every pixel becomes a `factor x factor` block.
    pub fn upsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::param("factor", "must be at least 1"));
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let row = &self.data[(y / factor) * self.width..(y / factor + 1) * self.width];
            for x in 0..w {
                data.push(row[x / factor]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Nearest-neighbour reduction sampling the centre pixel of every
    /// `factor x factor` block. Exact inverse of [`upsample`](Self::upsample).
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::param(
                "factor",
                format!("{factor} does not divide {}x{}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let off = factor / 2;
        Self::from_fn(h, w, |x, y| self.get(x * factor + off, y * factor + off))
    }
}

fn check_extent(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::param("extent", format!("{height}x{width} has no pixels")));
    }
    Ok(())
}

/// Per-pixel integer labels; 0 means unassigned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        check_extent(height, width)?;
        Ok(Self {
            height,
            width,
            data: vec![0; height * width],
        })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        check_extent(height, width)?;
        if data.len() != height * width {
            return Err(Error::dims(&[height * width], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    /// Distinct nonzero labels, ascending.
    pub fn labels(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    /// Mask of pixels carrying `label`.
    pub fn mask_of(&self, label: u32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v == label) as u8).collect(),
        }
    }

    /// Mask of all labelled pixels.
    pub fn support(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v != 0) as u8).collect(),
        }
    }
}

/// Dense real-valued array of arbitrary rank, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> DenseMap<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if dims.is_empty() || len != data.len() {
            return Err(Error::dims(&[len], &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("element {pos} is not finite")));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Vec<usize>, value: T) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![value; len])
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        Self::filled(dims, T::zero())
    }

    /// Builds from a buffer the caller guarantees is finite and sized.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Mutable access; callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::InvalidValue(format!(
                "expected rank-{rank} map, got dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Copies channel `c` of a rank-3 map out as a rank-2 map.
    pub fn channel(&self, c: usize) -> Result<DenseMap<T>> {
        self.expect_rank(3)?;
        if c >= self.dims[0] {
            return Err(Error::param("channel", format!("{c} >= {}", self.dims[0])));
        }
        let plane = self.dims[1] * self.dims[2];
        Ok(Self::from_parts(
            vec![self.dims[1], self.dims[2]],
            self.data[c * plane..(c + 1) * plane].to_vec(),
        ))
    }

    /// Borrowed slice of channel `c` of a rank-3 map.
    pub(crate) fn plane(&self, c: usize) -> &[T] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<DenseMap<T>> {
        DenseMap::new(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self::from_parts(
            vec![mask.height, mask.width],
            mask.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect(),
        )
    }

    pub fn cast<U: Real>(&self) -> DenseMap<U> {
        DenseMap::from_parts(
            self.dims.clone(),
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
    }
}

/// Intersection over union of two same-sized masks; 0 when both are empty.
pub fn iou<T: Real>(a: &BinaryMask, b: &BinaryMask) -> Result<T> {
    a.check_same(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        inter += (p & q) as usize;
        union += (p | q) as usize;
    }
    if union == 0 {
        return Ok(T::zero());
    }
    Ok(T::from_count(inter) / T::from_count(union))
}

/// Mass centre and bounding-box extent of a mask's foreground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassCenter<T> {
    pub cx: T,
    pub cy: T,
    /// Bounding box width in pixels.
    pub width: usize,
    /// Bounding box height in pixels.
    pub height: usize,
    pub x_min: usize,
    pub y_min: usize,
}

pub fn mass_center_extent<T: Real>(m: &BinaryMask) -> Result<MassCenter<T>> {
    let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) {
                sx += x as u64;
                sy += y as u64;
                n += 1;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let n = T::lit(n as f64);
    Ok(MassCenter {
        cx: T::lit(sx as f64) / n,
        cy: T::lit(sy as f64) / n,
        width: x1 - x0 + 1,
        height: y1 - y0 + 1,
        x_min: x0,
        y_min: y0,
    })
}

/// Binarizes a rank-2 map: a pixel is foreground iff its value is strictly above `t`.
pub fn threshold_map<T: Real>(m: &DenseMap<T>, t: T) -> Result<BinaryMask> {
    m.expect_rank(2)?;
    threshold_slice(m.data(), m.dims[0], m.dims[1], t)
}

pub(crate) fn threshold_slice<T: Real>(data: &[T], h: usize, w: usize, t: T) -> Result<BinaryMask> {
    if !(t > T::zero() && t < T::one()) {
        return Err(Error::param("threshold", format!("{t} is outside (0, 1)")));
    }
    check_extent(h, w)?;
    Ok(BinaryMask {
        height: h,
        width: w,
        data: data.iter().map(|&v| (v > t) as u8).collect(),
    })
}
