//! Proxy masks from a trained model: predict per box, merge overlaps in
//! favour of the smaller object, then flag masks whose box disagrees with
//! the annotated one.
//!
//! Flagged masks stay in the output with `ignore = true`; a downstream
//! trainer is expected to skip them in its loss.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::proxy_crop;
use crate::diffcore::kernels::bilinear_forward;
use crate::error::{Error, Result};
use crate::geometry::{bbox_of_mask, box_iou, BBox, BinaryMask};
use crate::heads::{Model, Predictor, Scorer};
use crate::image::{save_mask, Image};
use crate::manifest::{load_image, ImageEntry, InstanceEntry, Manifest, Rle};

/// Scores at or below this are background.
pub const SCORE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyAnnotation {
    pub instance_id: u64,
    pub class: String,
    pub gt_box: BBox,
    pub mask: BinaryMask,
    pub ignore: bool,
    pub agreement: f64,
}

impl ProxyAnnotation {
    /// Builds an annotation with its agreement computed and `ignore` unset.
    pub fn new(instance_id: u64, class: impl Into<String>, gt_box: BBox, mask: BinaryMask) -> Self {
        let agreement = agreement(&mask, &gt_box);
        ProxyAnnotation {
            instance_id,
            class: class.into(),
            gt_box,
            mask,
            ignore: false,
            agreement,
        }
    }
}

/// IoU between the mask's tight box and `gt_box`; 0 for an empty mask.
pub fn agreement(mask: &BinaryMask, gt_box: &BBox) -> f64 {
    bbox_of_mask(mask).map_or(0.0, |b| box_iou(&b, gt_box))
}

/// Per-pixel instance ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Option<u64>>,
}

impl LabelMap {
    pub fn get(&self, row: usize, col: usize) -> Option<u64> {
        self.labels[row * self.width + col]
    }

    pub fn mask_of(&self, id: u64) -> BinaryMask {
        let bits = self.labels.iter().map(|l| *l == Some(id)).collect();
        BinaryMask::from_bits(self.height, self.width, bits).expect("label map dims")
    }
}

/// Resolves overlaps: a contested pixel goes to the covering instance with
/// the smallest mask area, ties to the lowest id.
pub fn merge_masks(instances: &[(u64, BinaryMask)]) -> Result<LabelMap> {
    let Some((_, first)) = instances.first() else {
        return Err(Error::invalid("no masks to merge"));
    };
    if let Some((id, m)) = instances.iter().find(|(_, m)| !m.same_dims(first)) {
        return Err(Error::shape(
            "merge_masks",
            format!(
                "instance {id} is {}x{}, expected {}x{}",
                m.height(),
                m.width(),
                first.height(),
                first.width()
            ),
        ));
    }
    let mut order: Vec<(usize, u64, usize)> = instances
        .iter()
        .enumerate()
        .map(|(i, (id, m))| (m.count(), *id, i))
        .collect();
    order.sort();
    let mut labels = vec![None; first.height() * first.width()];
    // Paint from the largest down so the smallest ends on top.
    for &(_, id, i) in order.iter().rev() {
        for (l, &on) in labels.iter_mut().zip(instances[i].1.bits()) {
            if on {
                *l = Some(id);
            }
        }
    }
    Ok(LabelMap {
        height: first.height(),
        width: first.width(),
        labels,
    })
}

/// Flags annotations with `agreement < threshold`; returns the ignored fraction.
pub fn drop_masks(mut annotations: Vec<ProxyAnnotation>, threshold: f64) -> Result<(Vec<ProxyAnnotation>, f64)> {
    if annotations.is_empty() {
        return Err(Error::invalid("no proxy annotations to drop"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("drop threshold {threshold} outside [0, 1]")));
    }
    for a in &mut annotations {
        a.ignore = a.agreement < threshold;
    }
    let dropped = annotations.iter().filter(|a| a.ignore).count();
    let rate = dropped as f64 / annotations.len() as f64;
    Ok((annotations, rate))
}

/// Resizes a square `size × size` score map onto `gt_box`, thresholds it
/// and pastes the result into an image-sized mask.
pub fn paste_scores(scores: &[f64], size: usize, gt_box: &BBox, height: usize, width: usize) -> Result<BinaryMask> {
    if scores.len() != size * size {
        return Err(Error::shape(
            "paste_scores",
            format!("{} scores for a {size}x{size} map", scores.len()),
        ));
    }
    if !gt_box.fits(height, width) {
        return Err(Error::invalid(format!("box {gt_box:?} outside {height}x{width} image")));
    }
    let (bw, bh) = (gt_box.w as usize, gt_box.h as usize);
    let resized = bilinear_forward(scores, 1, size, size, bh, bw);
    let mut m = BinaryMask::new(height, width);
    for r in 0..bh {
        for c in 0..bw {
            if resized[r * bw + c] > SCORE_THRESHOLD {
                m.set(gt_box.y as usize + r, gt_box.x as usize + c, true);
            }
        }
    }
    Ok(m)
}

/// Mask for one box: crop, score, paste back.
pub fn predict_mask(scorer: &Scorer, image: &Image, gt_box: &BBox, size: usize) -> Result<BinaryMask> {
    let crop = proxy_crop(image, gt_box, size)?;
    let scores = scorer.score(&crop.patch.image.to_tensor())?;
    paste_scores(scores.data(), size, gt_box, image.height, image.width)
}

/// Proxy mask from the salient/transferred blend.
pub fn predict_proxy(model: &Model, image: &Image, gt_box: &BBox, alpha: f64, size: usize) -> Result<BinaryMask> {
    predict_mask(&Scorer::new(model, Predictor::Blend { alpha })?, image, gt_box, size)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub alpha: f64,
    pub size: usize,
    pub drop_threshold: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            alpha: 0.7,
            size: 320,
            drop_threshold: 0.95,
        }
    }
}

/// Predicted and merged (not yet dropped) annotations for one image.
pub fn image_proxies(
    scorer: &Scorer,
    image: &Image,
    entry: &ImageEntry,
    cfg: &ProxyConfig,
) -> Result<Vec<ProxyAnnotation>> {
    if entry.instances.is_empty() {
        return Ok(Vec::new());
    }
    let raw: Vec<(u64, BinaryMask)> = entry
        .instances
        .par_iter()
        .map(|inst| Ok((inst.id, predict_mask(scorer, image, &inst.bbox, cfg.size)?)))
        .collect::<Result<_>>()?;
    let merged = merge_masks(&raw)?;
    Ok(entry
        .instances
        .iter()
        .map(|inst| ProxyAnnotation::new(inst.id, inst.class.clone(), inst.bbox, merged.mask_of(inst.id)))
        .collect())
}

/// Proxy annotations for a whole manifest, grouped per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxySet {
    pub images: Vec<(ImageEntry, Vec<ProxyAnnotation>)>,
    pub drop_rate: f64,
}

impl ProxySet {
    pub fn annotations(&self) -> impl Iterator<Item = &ProxyAnnotation> {
        self.images.iter().flat_map(|(_, a)| a)
    }

    /// Re-applies the drop rule at another threshold.
    pub fn redrop(&self, threshold: f64) -> Result<ProxySet> {
        let flat: Vec<ProxyAnnotation> = self.annotations().cloned().collect();
        let (flat, drop_rate) = drop_masks(flat, threshold)?;
        let mut it = flat.into_iter();
        let images = self
            .images
            .iter()
            .map(|(e, a)| (e.clone(), it.by_ref().take(a.len()).collect()))
            .collect();
        Ok(ProxySet { images, drop_rate })
    }
}

/// Predicts, merges (per image) and then drops (over the whole set).
pub fn generate_proxies(model: &Model, manifest: &Manifest, base: &Path, cfg: &ProxyConfig) -> Result<ProxySet> {
    let scorer = Scorer::new(model, Predictor::Blend { alpha: cfg.alpha })?;
    let images = manifest
        .images
        .iter()
        .map(|e| {
            let img = load_image(base, e)?;
            Ok((e.clone(), image_proxies(&scorer, &img, e, cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ProxySet { images, drop_rate: 0.0 }.redrop(cfg.drop_threshold)
}

/// Writes `dir/manifest.json` plus masks (PGM files, or inline RLE).
/// Image paths are rewritten relative to `dir`.
pub fn write_proxy_manifest(dir: &Path, set: &ProxySet, image_base: &Path, rle: bool) -> Result<Manifest> {
    let mask_dir = dir.join("masks");
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let rel = relative_prefix(dir, image_base);
    let mut out = Manifest::default();
    for (entry, anns) in &set.images {
        let mut e = ImageEntry {
            file: format!("{rel}{}", entry.file),
            instances: Vec::with_capacity(anns.len()),
            ..entry.clone()
        };
        for a in anns {
            let mut inst = InstanceEntry::boxed(a.instance_id, a.class.clone(), a.gt_box);
            if rle {
                inst.rle = Some(Rle::encode(&a.mask));
            } else {
                let name = format!("{:06}_{:02}.pgm", entry.id, a.instance_id);
                save_mask(&a.mask, &mask_dir.join(&name))?;
                inst.mask_file = Some(format!("masks/{name}"));
            }
            inst.ignore = Some(a.ignore);
            inst.agreement = Some(a.agreement);
            e.instances.push(inst);
        }
        out.images.push(e);
    }
    out.save(&dir.join("manifest.json"))?;
    Ok(out)
}

/// Prefix that turns paths relative to `base` into paths relative to `dir`;
/// falls back to the absolute base.
fn relative_prefix(dir: &Path, base: &Path) -> String {
    let (Ok(d), Ok(b)) = (dir.canonicalize(), base.canonicalize()) else {
        return format!("{}/", base.display());
    };
    let common = d.components().zip(b.components()).take_while(|(x, y)| x == y).count();
    let ups = d.components().count() - common;
    let mut s = "../".repeat(ups);
    for c in b.components().skip(common) {
        s.push_str(&c.as_os_str().to_string_lossy());
        s.push('/');
    }
    s
}
