//! Per-pixel mask containers and the run-length wire format.
//!
//! All grids are row-major `height x width`. The RLE form used on disk and on
//! the wire alternates zero-runs and one-runs, always starting with a
//! zero-run (which may have length 0).

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

/// Probability grid with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape(format!(
                "soft mask data has {} entries, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("soft mask value {v} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value.clamp(0.0, 1.0); height * width] }
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Hard foreground/background grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape(format!(
                "binary mask data has {} entries, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                data.push(f(h, w));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.data[h * self.width + w]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when every foreground pixel of `self` is also foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Soft view with entries exactly 0.0 or 1.0.
    pub fn to_soft(&self) -> SoftMask {
        SoftMask::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn to_rle(&self) -> Rle {
        Rle::encode(self)
    }
}

/// Signed per-pixel change `representative - y_app`, entries in {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedDiff {
    height: usize,
    width: usize,
    data: Vec<i8>,
}

impl SignedDiff {
    pub fn between(new: &BinaryMask, base: &BinaryMask) -> Result<Self> {
        if new.shape() != base.shape() {
            return Err(shape(format!("diff of {:?} against {:?}", new.shape(), base.shape())));
        }
        let data = new
            .data
            .iter()
            .zip(&base.data)
            .map(|(&a, &b)| a as i8 - b as i8)
            .collect();
        Ok(Self { height: new.height, width: new.width, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize) -> i8 {
        self.data[h * self.width + w]
    }

    /// Pixels gaining foreground (+1).
    pub fn additions(&self) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|&d| d > 0).collect() }
    }

    /// Pixels losing foreground (-1).
    pub fn removals(&self) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|&d| d < 0).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&d| d == 0)
    }
}

/// Row-major run-length encoding, alternating zero-run / one-run lengths,
/// starting with a zero-run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for &px in &mask.data {
            if px == current {
                run += 1;
            } else {
                counts.push(run);
                current = px;
                run = 1;
            }
        }
        if run > 0 || counts.is_empty() {
            counts.push(run);
        }
        Self { height: mask.height, width: mask.width, counts }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total: usize = self.counts.iter().sum();
        if total != self.height * self.width {
            return Err(Error::Decode(format!(
                "RLE runs sum to {total}, expected {}",
                self.height * self.width
            )));
        }
        let mut data = Vec::with_capacity(total);
        for (i, &n) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, n));
        }
        Ok(BinaryMask { height: self.height, width: self.width, data })
    }
}
