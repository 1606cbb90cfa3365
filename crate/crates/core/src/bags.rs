//! Multiple-instance bags from a tight bounding box.
//!
//! Every row and every column crossing the box contains at least one object
//! pixel, so the in-box segment of each is a positive bag. Rows and columns
//! lying entirely outside the box contain no object pixel and form negative
//! bags. The out-of-box remainder of a crossing row/column is not used.

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bag {
    pub polarity: Polarity,
    pub axis: Axis,
    /// Row index for row bags, column index for column bags.
    pub index: usize,
    /// `(row, col)` pixels in row-major order.
    pub pixels: Vec<(usize, usize)>,
}

impl Bag {
    pub fn flat_indices(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        self.pixels.iter().map(move |&(r, c)| r * width + c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BagSet {
    pub positives: Vec<Bag>,
    pub negatives: Vec<Bag>,
    pub patch_h: usize,
    pub patch_w: usize,
    pub source_box: BBox,
}

impl BagSet {
    pub fn iter(&self) -> impl Iterator<Item = &Bag> {
        self.positives.iter().chain(&self.negatives)
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major membership map: `true` where a pixel belongs to any bag.
    pub fn membership(&self) -> Vec<bool> {
        let mut m = vec![false; self.patch_h * self.patch_w];
        for bag in self.iter() {
            for i in bag.flat_indices(self.patch_w) {
                m[i] = true;
            }
        }
        m
    }
}

fn line(polarity: Polarity, axis: Axis, index: usize, span: std::ops::Range<usize>) -> Bag {
    let pixels = match axis {
        Axis::Row => span.map(|c| (index, c)).collect(),
        Axis::Column => span.map(|r| (r, index)).collect(),
    };
    Bag {
        polarity,
        axis,
        index,
        pixels,
    }
}

/// Splits a `patch_h x patch_w` patch into bags around `b`.
///
/// Bags are ordered: positive rows, positive columns; negative rows, negative columns.
pub fn build_bags(b: &BBox, patch_h: usize, patch_w: usize) -> Result<BagSet> {
    if !b.fits(patch_h, patch_w) {
        return Err(Error::invalid(format!("box {b:?} outside {patch_h}x{patch_w} patch")));
    }
    let (x0, y0) = (b.x as usize, b.y as usize);
    let (x1, y1) = (b.right() as usize, b.bottom() as usize);
    let mut positives = Vec::with_capacity((b.w + b.h) as usize);
    positives.extend((y0..y1).map(|r| line(Polarity::Positive, Axis::Row, r, x0..x1)));
    positives.extend((x0..x1).map(|c| line(Polarity::Positive, Axis::Column, c, y0..y1)));
    let mut negatives = Vec::new();
    negatives.extend(
        (0..y0)
            .chain(y1..patch_h)
            .map(|r| line(Polarity::Negative, Axis::Row, r, 0..patch_w)),
    );
    negatives.extend(
        (0..x0)
            .chain(x1..patch_w)
            .map(|c| line(Polarity::Negative, Axis::Column, c, 0..patch_h)),
    );
    Ok(BagSet {
        positives,
        negatives,
        patch_h,
        patch_w,
        source_box: *b,
    })
}
