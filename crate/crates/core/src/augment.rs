//! Patch extraction for training and proxy inference.
//!
//! Salient images are resized to a square and randomly cropped; weak images
//! are cropped around a jittered copy of their box and resized, which lets
//! background leak into the patch. Proxy inference crops the exact box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_of_mask, BBox, BinaryMask};
use crate::image::{crop_mask, resize_mask_nearest, Image};
use crate::rng::Draw;

const MAX_RETRIES: usize = 10;

/// Patch sizes. Defaults are the full-scale values; desk-scale runs shrink them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Side of the square training patch.
    pub patch: usize,
    /// Side a salient image is resized to before its random crop.
    pub salient_resize: usize,
    /// Side of the square proxy-inference patch.
    pub proxy: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            patch: 288,
            salient_resize: 320,
            proxy: 320,
        }
    }
}

impl AugmentConfig {
    /// Keeps the full-scale 288:320 proportion for a smaller training patch.
    pub fn scaled(patch: usize) -> Self {
        let big = (patch * 10).div_ceil(9).next_multiple_of(4);
        AugmentConfig {
            patch,
            salient_resize: big,
            proxy: big,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.patch.is_multiple_of(4) || !self.proxy.is_multiple_of(4) || self.proxy == 0 {
            return Err(Error::invalid(format!(
                "patch sizes must be positive multiples of 4, got {} / {}",
                self.patch, self.proxy
            )));
        }
        if self.salient_resize < self.patch {
            return Err(Error::invalid(format!(
                "salient resize {} smaller than patch {}",
                self.salient_resize, self.patch
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub image: Image,
    pub mask: Option<BinaryMask>,
    /// Supervision box in patch coordinates.
    pub bbox: Option<BBox>,
}

/// Raw jittered box `(x, y, w, h)` before rounding and clipping.
pub fn jitter_box(b: &BBox, rng: &mut impl Draw) -> (f64, f64, f64, f64) {
    let (w, h) = (b.w as f64, b.h as f64);
    let x2 = b.x as f64 + rng.uniform(-0.25, 0.25) * w;
    let y2 = b.y as f64 + rng.uniform(-0.25, 0.25) * h;
    let w2 = rng.uniform(0.5, 1.5) * w;
    let h2 = rng.uniform(0.5, 1.5) * h;
    (x2, y2, w2, h2)
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Shifts and rescales `b`, rounds to whole pixels and clips to the image.
/// Falls back to `b` itself if clipping leaves nothing.
pub fn box_augmentation(b: &BBox, rng: &mut impl Draw, height: usize, width: usize) -> BBox {
    let (x2, y2, w2, h2) = jitter_box(b, rng);
    let jittered = BBox {
        x: round_half_up(x2),
        y: round_half_up(y2),
        w: round_half_up(w2).max(1),
        h: round_half_up(h2).max(1),
    };
    jittered.clip(height, width).unwrap_or(*b)
}

fn floor_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

fn ceil_div(a: i64, b: i64) -> i64 {
    -((-a).div_euclid(b))
}

/// Maps `gt` through "crop to `window`, resize to `size`" and clips to the patch.
pub fn map_box(gt: &BBox, window: &BBox, size: usize) -> Option<BBox> {
    let s = size as i64;
    let x0 = floor_div((gt.x - window.x) * s, window.w).max(0);
    let y0 = floor_div((gt.y - window.y) * s, window.h).max(0);
    let x1 = ceil_div((gt.right() - window.x) * s, window.w).min(s);
    let y1 = ceil_div((gt.bottom() - window.y) * s, window.h).min(s);
    (x1 > x0 && y1 > y0).then(|| BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    })
}

/// Training patch for a box-supervised instance.
pub fn weak_augment(image: &Image, gt: &BBox, rng: &mut impl Draw, cfg: &AugmentConfig) -> Result<ImagePatch> {
    if !gt.fits(image.height, image.width) {
        return Err(Error::invalid(format!(
            "box {gt:?} outside {}x{} image",
            image.height, image.width
        )));
    }
    let mut window = None;
    for _ in 0..MAX_RETRIES {
        let w = box_augmentation(gt, rng, image.height, image.width);
        if let Some(mapped) = map_box(gt, &w, cfg.patch) {
            window = Some((w, mapped));
            break;
        }
    }
    let (window, mapped) = match window {
        Some(found) => found,
        None => (*gt, map_box(gt, gt, cfg.patch).expect("a box maps onto itself")),
    };
    let img = image.crop(&window)?.resize(cfg.patch, cfg.patch);
    Ok(ImagePatch {
        image: img,
        mask: None,
        bbox: Some(mapped),
    })
}

/// Training patch for a salient image: resize, random crop, box from the cropped mask.
pub fn salient_augment(
    image: &Image,
    mask: &BinaryMask,
    rng: &mut impl Draw,
    cfg: &AugmentConfig,
) -> Result<ImagePatch> {
    if mask.height() != image.height || mask.width() != image.width {
        return Err(Error::shape(
            "salient_augment",
            format!(
                "mask {}x{} vs image {}x{}",
                mask.height(),
                mask.width(),
                image.height,
                image.width
            ),
        ));
    }
    if mask.is_empty() {
        return Err(Error::invalid("salient image has an empty mask"));
    }
    let r = cfg.salient_resize;
    let big = image.resize(r, r);
    let big_mask = resize_mask_nearest(mask, r, r);
    let span = r - cfg.patch + 1;
    let side = cfg.patch as i64;
    let mut chosen = None;
    for _ in 0..MAX_RETRIES {
        let ox = rng.index(span) as i64;
        let oy = rng.index(span) as i64;
        let window = BBox {
            x: ox,
            y: oy,
            w: side,
            h: side,
        };
        let m = crop_mask(&big_mask, &window)?;
        if !m.is_empty() {
            chosen = Some((window, m));
            break;
        }
    }
    let (window, m) = match chosen {
        Some(c) => c,
        None => {
            let off = ((r - cfg.patch) / 2) as i64;
            let window = BBox {
                x: off,
                y: off,
                w: side,
                h: side,
            };
            let m = crop_mask(&big_mask, &window)?;
            (window, m)
        }
    };
    let bbox = bbox_of_mask(&m);
    if bbox.is_none() {
        return Err(Error::invalid("salient crop contains no foreground"));
    }
    Ok(ImagePatch {
        image: big.crop(&window)?,
        mask: Some(m),
        bbox,
    })
}

/// Exact box crop resized to the square proxy size.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyCrop {
    pub patch: ImagePatch,
    /// Patch pixels per source pixel along x and y.
    pub scale_x: f64,
    pub scale_y: f64,
}

pub fn proxy_crop(image: &Image, b: &BBox, size: usize) -> Result<ProxyCrop> {
    let img = image.crop(b)?.resize(size, size);
    Ok(ProxyCrop {
        patch: ImagePatch {
            image: img,
            mask: None,
            bbox: None,
        },
        scale_x: size as f64 / b.w as f64,
        scale_y: size as f64 / b.h as f64,
    })
}
