//! Uncompressed run-length encoding of binary masks, compatible with the
//! COCO convention: pixels are scanned column-major (down column 0, then
//! column 1, ...) and counts alternate background/foreground runs starting
//! with background. A leading count of 0 means the scan starts inside the
//! mask.

use crate::mask::{BinaryMask, MaskError};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Run-length encoded mask. Invariants are enforced at construction: counts
/// are non-empty, sum to `height * width`, and only the first count may be
/// zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

impl RleMask {
    pub fn new(height: usize, width: usize, counts: Vec<u32>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::EmptyDimensions { height, width });
        }
        if counts.is_empty() {
            return Err(MaskError::RleEmpty);
        }
        for (i, &c) in counts.iter().enumerate().skip(1) {
            if c == 0 {
                return Err(MaskError::RleZeroRun { index: i });
            }
        }
        let sum: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        let expected = height as u64 * width as u64;
        if sum != expected {
            return Err(MaskError::RleSumMismatch {
                height,
                width,
                sum,
                expected,
            });
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }
}

#[derive(Serialize, Deserialize)]
struct RleRepr {
    size: [usize; 2],
    counts: Vec<u32>,
}

impl Serialize for RleMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RleRepr {
            size: [self.height, self.width],
            counts: self.counts.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RleMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = RleRepr::deserialize(deserializer)?;
        RleMask::new(repr.size[0], repr.size[1], repr.counts).map_err(D::Error::custom)
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = mask.dims();
    let mut counts: Vec<u32> = Vec::new();
    let mut current = false;
    let mut run: u32 = 0;
    for c in 0..w {
        for r in 0..h {
            let v = mask.get(r, c);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    RleMask {
        height: h,
        width: w,
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    // Construction already validated the run list; the sum check is repeated
    // here so a decode can never index out of bounds even if invariants are
    // broken upstream.
    let expected = rle.height as u64 * rle.width as u64;
    let sum: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
    if sum != expected {
        return Err(MaskError::RleSumMismatch {
            height: rle.height,
            width: rle.width,
            sum,
            expected,
        });
    }
    let mut mask = BinaryMask::new(rle.height, rle.width)?;
    let mut pos: usize = 0;
    let mut value = false;
    for &count in &rle.counts {
        for _ in 0..count {
            if value {
                let r = pos % rle.height;
                let c = pos / rle.height;
                mask.set(r, c, true);
            }
            pos += 1;
        }
        value = !value;
    }
    Ok(mask)
}
