use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Dimension {
                op: "mask",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask::new(height, width, vec![false; height * width]).expect("positive mask size")
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask::new(height, width, vec![true; height * width]).expect("positive mask size")
    }

    /// Foreground where `logit > 0`, i.e. `sigmoid(logit) > 0.5`.
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        BinaryMask::new(height, width, logits.iter().map(|&l| l > 0.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn into_data(self) -> Vec<bool> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn union(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Left-right mirror.
    pub fn mirror_horizontal(&self) -> BinaryMask {
        let mut out = BinaryMask::empty(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, self.width - 1 - c, self.get(r, c));
            }
        }
        out
    }

    pub fn to_rle(&self) -> Rle {
        Rle::encode(self)
    }
}

/// Run-length encoding over the row-major pixel order. Runs alternate
/// background/foreground and always start with a (possibly zero)
/// background run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &b in &mask.data {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            height: mask.height,
            width: mask.width,
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total: usize = self.counts.iter().sum();
        if total != self.height * self.width {
            return Err(Error::contract(format!(
                "RLE covers {total} pixels, expected {}",
                self.height * self.width
            )));
        }
        let mut data = Vec::with_capacity(total);
        for (i, &n) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat(i % 2 == 1).take(n));
        }
        BinaryMask::new(self.height, self.width, data)
    }
}
