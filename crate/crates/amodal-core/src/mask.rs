//! Dense binary masks and the handful of geometric operations the rest of
//! the pipeline is built on: Chebyshev dilation, occlusion boundaries,
//! IoU, and adjacency tests.

use ndarray::Array2;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("data length {len} does not match {height}x{width} = {}", height * width)]
    LengthMismatch {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("mask dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("run lengths sum to {sum}, expected {expected} for a {height}x{width} mask")]
    RleSumMismatch {
        height: usize,
        width: usize,
        sum: u64,
        expected: u64,
    },
    #[error("zero-length run at index {index}; only the leading background run may be zero")]
    RleZeroRun { index: usize },
    #[error("run-length list is empty")]
    RleEmpty,
}

/// Dense binary mask stored row-major. Dimensions are fixed at construction
/// and always at least 1x1.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, area={})",
            self.height,
            self.width,
            self.area()
        )
    }
}

/// Inclusive row/column extents of the set pixels of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounds {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl Bounds {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }
}

impl BinaryMask {
    /// All-background mask.
    pub fn new(height: usize, width: usize) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::EmptyDimensions { height, width });
        }
        Ok(Self {
            height,
            width,
            data: vec![false; height * width],
        })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::EmptyDimensions { height, width });
        }
        if data.len() != height * width {
            return Err(MaskError::LengthMismatch {
                height,
                width,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, MaskError> {
        let mut mask = Self::new(height, width)?;
        for r in 0..height {
            for c in 0..width {
                mask.data[r * width + c] = f(r, c);
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    fn check_dims(&self, other: &Self) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn intersection(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Set difference `self \ other`.
    pub fn difference(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && !b)
            .collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn is_superset_of(&self, other: &Self) -> Result<bool, MaskError> {
        self.check_dims(other)?;
        Ok(self.data.iter().zip(&other.data).all(|(&a, &b)| a || !b))
    }

    pub fn intersects(&self, other: &Self) -> Result<bool, MaskError> {
        self.check_dims(other)?;
        Ok(self.data.iter().zip(&other.data).any(|(&a, &b)| a && b))
    }

    /// Shift the mask by whole pixels; anything pushed past the borders is
    /// dropped.
    pub fn translate(&self, dy: isize, dx: isize) -> Self {
        let mut out = Self {
            height: self.height,
            width: self.width,
            data: vec![false; self.height * self.width],
        };
        for r in 0..self.height {
            let nr = r as isize + dy;
            if nr < 0 || nr >= self.height as isize {
                continue;
            }
            for c in 0..self.width {
                if !self.data[r * self.width + c] {
                    continue;
                }
                let nc = c as isize + dx;
                if nc < 0 || nc >= self.width as isize {
                    continue;
                }
                out.data[nr as usize * self.width + nc as usize] = true;
            }
        }
        out
    }

    /// Inclusive bounding box of the set pixels, or None when empty.
    pub fn bbox(&self) -> Option<Bounds> {
        let mut bounds: Option<Bounds> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.data[r * self.width + c] {
                    continue;
                }
                match bounds.as_mut() {
                    None => {
                        bounds = Some(Bounds {
                            row_min: r,
                            col_min: c,
                            row_max: r,
                            col_max: c,
                        })
                    }
                    Some(b) => {
                        b.row_min = b.row_min.min(r);
                        b.col_min = b.col_min.min(c);
                        b.row_max = b.row_max.max(r);
                        b.col_max = b.col_max.max(c);
                    }
                }
            }
        }
        bounds
    }

    /// Morphological dilation with a square structuring element of side
    /// 2*radius + 1 (Chebyshev ball), clipped at the borders. Runs as two
    /// separable 1-D passes, so cost is O(height * width) regardless of
    /// radius.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut horiz = vec![false; h * w];
        for r in 0..h {
            let row = &self.data[r * w..(r + 1) * w];
            let mut count = 0usize;
            // Window [c - radius, c + radius] maintained incrementally.
            for c in 0..radius.min(w) {
                if row[c] {
                    count += 1;
                }
            }
            for c in 0..w {
                let enter = c + radius;
                if enter < w && row[enter] {
                    count += 1;
                }
                horiz[r * w + c] = count > 0;
                if c >= radius && row[c - radius] {
                    count -= 1;
                }
            }
        }
        let mut out = vec![false; h * w];
        for c in 0..w {
            let mut count = 0usize;
            for r in 0..radius.min(h) {
                if horiz[r * w + c] {
                    count += 1;
                }
            }
            for r in 0..h {
                let enter = r + radius;
                if enter < h && horiz[enter * w + c] {
                    count += 1;
                }
                out[r * w + c] = count > 0;
                if r >= radius && horiz[(r - radius) * w + c] {
                    count -= 1;
                }
            }
        }
        Self {
            height: h,
            width: w,
            data: out,
        }
    }

    pub fn to_f32_array(&self) -> Array2<f32> {
        Array2::from_shape_fn((self.height, self.width), |(r, c)| {
            if self.get(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn to_f64_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(r, c)| {
            if self.get(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Crop a window of the given size with top-left corner at (row0, col0).
    /// The window must lie inside the mask.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Self {
        assert!(row0 + height <= self.height && col0 + width <= self.width);
        let mut data = Vec::with_capacity(height * width);
        for r in row0..row0 + height {
            data.extend_from_slice(
                &self.data[r * self.width + col0..r * self.width + col0 + width],
            );
        }
        Self {
            height,
            width,
            data,
        }
    }
}

/// Region where two instances meet: the intersection of both masks after
/// dilating each by `radius`.
pub fn occlusion_boundary(
    a: &BinaryMask,
    b: &BinaryMask,
    radius: usize,
) -> Result<BinaryMask, MaskError> {
    assert!(radius >= 1, "boundary radius must be at least 1");
    a.dilate(radius).intersection(&b.dilate(radius))
}

/// Intersection over union. Two empty masks are considered identical, so the
/// result is 1.0 rather than 0/0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    a.check_dims(b)?;
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Whether the dilated masks overlap, i.e. the occlusion boundary is
/// non-empty.
pub fn adjacent(a: &BinaryMask, b: &BinaryMask, radius: usize) -> Result<bool, MaskError> {
    a.dilate(radius).intersects(&b.dilate(radius))
}
