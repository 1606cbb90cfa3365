//! Integer-pixel boxes and binary masks.
//!
//! All IoUs here are pixel counts over rasterized geometry, never
//! continuous-coordinate areas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with inclusive pixel extents: columns `x..x+w`, rows `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Result<Self> {
        if w < 1 || h < 1 {
            return Err(Error::invalid(format!("box extents must be >= 1, got {w}x{h}")));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    /// One past the last column.
    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    /// One past the last row.
    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x >= 0
            && self.y >= 0
            && self.right() <= width as i64
            && self.bottom() <= height as i64
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        row >= self.y && row < self.bottom() && col >= self.x && col < self.right()
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then_some(BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    /// Clips to `[0,width) x [0,height)`; `None` if nothing remains.
    pub fn clip(&self, height: usize, width: usize) -> Option<BBox> {
        self.intersection(&BBox {
            x: 0,
            y: 0,
            w: width as i64,
            h: height as i64,
        })
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Row-major boolean raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} needs {} bits, got {}", height * width, bits.len()),
            ));
        }
        Ok(BinaryMask { height, width, bits })
    }

    /// Mask whose foreground is exactly `b` (clipped to the raster).
    pub fn from_box(height: usize, width: usize, b: &BBox) -> Self {
        let mut m = BinaryMask::new(height, width);
        if let Some(c) = b.clip(height, width) {
            for r in c.y..c.bottom() {
                for col in c.x..c.right() {
                    m.set(r as usize, col as usize, true);
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if !self.same_dims(other) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other, "mask intersection")?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }
}

/// `|a ∧ b| / |a ∨ b|`; two empty masks agree perfectly (1.0).
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_dims(b, "mask_iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Tight inclusive box around the foreground, `None` when empty.
pub fn bbox_of_mask(m: &BinaryMask) -> Option<BBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..m.height {
        let row = &m.bits[r * m.width..(r + 1) * m.width];
        let Some(first) = row.iter().position(|&b| b) else {
            continue;
        };
        let last = row.iter().rposition(|&b| b).unwrap();
        r0 = r0.min(r);
        r1 = r;
        c0 = c0.min(first);
        c1 = c1.max(last);
    }
    (r0 != usize::MAX).then(|| BBox {
        x: c0 as i64,
        y: r0 as i64,
        w: (c1 - c0 + 1) as i64,
        h: (r1 - r0 + 1) as i64,
    })
}
