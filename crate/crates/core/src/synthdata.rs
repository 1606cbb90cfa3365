//! Seeded synthetic shapes dataset.
//!
//! Salient scenes hold one large shape with a full mask. Weak scenes hold
//! one to three shapes, sometimes overlapping; larger shapes are drawn first
//! so a smaller shape in front occludes a larger one behind it. Instance
//! masks are the visible pixels, and every box is the tight box of its
//! mask, so each row and column of a box crosses its object.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_of_mask, BBox, BinaryMask};
use crate::image::{save_mask, Image};
use crate::manifest::{ImageEntry, InstanceEntry, Manifest};
use crate::rng::{derive_seed, Draw, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Salient,
    Weak,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Salient => 0x53414c,
            Split::Weak => 0x5745414b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Polygon,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Polygon];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Polygon => "polygon",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub center: (f64, f64),
    /// Half-extents along the shape's own axes.
    pub radii: (f64, f64),
    pub rotation: f64,
    /// Vertex angles on the unit circle for polygons, ascending.
    pub vertices: Vec<f64>,
    /// Linear shading across the shape, per unit of normalized position.
    pub shading: (f64, f64),
    /// Surface grating `(amplitude, kx, ky, phase)` added to every channel.
    pub texture: (f64, f64, f64, f64),
}

impl ShapeSpec {
    /// Point test at pixel center `(row + 0.5, col + 0.5)`.
    fn covers(&self, row: usize, col: usize) -> bool {
        let (dx, dy) = (col as f64 + 0.5 - self.center.0, row as f64 + 0.5 - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = (dx * c + dy * s) / self.radii.0;
        let v = (-dx * s + dy * c) / self.radii.1;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Polygon => {
                let pts: Vec<(f64, f64)> = self.vertices.iter().map(|a| (a.cos(), a.sin())).collect();
                (0..pts.len()).all(|i| {
                    let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                    (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0) >= 0.0
                })
            }
        }
    }

    fn raster(&self, height: usize, width: usize) -> BinaryMask {
        let mut m = BinaryMask::new(height, width);
        let reach = self.radii.0.max(self.radii.1) + 1.0;
        let r0 = (self.center.1 - reach).floor().max(0.0) as usize;
        let r1 = ((self.center.1 + reach).ceil().max(0.0) as usize).min(height);
        let c0 = (self.center.0 - reach).floor().max(0.0) as usize;
        let c1 = ((self.center.0 + reach).ceil().max(0.0) as usize).min(width);
        for r in r0..r1 {
            for c in c0..c1 {
                if self.covers(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    fn area_estimate(&self) -> f64 {
        self.radii.0 * self.radii.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f64; 3],
    /// `(amplitude, kx, ky, phase)` waves per channel.
    pub waves: Vec<[(f64, f64, f64, f64); 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub shapes: Vec<ShapeSpec>,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneInstance {
    pub id: u64,
    pub kind: ShapeKind,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub instances: Vec<SceneInstance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub salient_size: usize,
    pub weak_size: usize,
    /// Smallest visible instance, in pixels.
    pub min_area: usize,
    /// Probability that a weak scene's extra shape is placed overlapping another.
    pub overlap_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            salient_size: 64,
            weak_size: 96,
            min_area: 40,
            overlap_prob: 0.5,
        }
    }
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [
        rng.uniform(0.05, 0.95),
        rng.uniform(0.05, 0.95),
        rng.uniform(0.05, 0.95),
    ]
}

fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn contrasting_color(rng: &mut Rng, avoid: &[[f64; 3]]) -> [f64; 3] {
    let mut best = random_color(rng);
    for _ in 0..32 {
        if avoid.iter().all(|a| color_distance(&best, a) >= 0.4) {
            break;
        }
        best = random_color(rng);
    }
    best
}

fn random_shape(rng: &mut Rng, center: (f64, f64), radius: (f64, f64), avoid: &[[f64; 3]]) -> ShapeSpec {
    let kind = ShapeKind::ALL[rng.below(3)];
    let vertices = if kind == ShapeKind::Polygon {
        let n = 3 + rng.below(4);
        let start = rng.uniform(0.0, std::f64::consts::TAU);
        // Jittered, evenly spread angles keep the polygon convex and non-degenerate.
        (0..n)
            .map(|i| {
                let step = std::f64::consts::TAU / n as f64;
                start + step * (i as f64 + rng.uniform(-0.3, 0.3))
            })
            .collect()
    } else {
        Vec::new()
    };
    ShapeSpec {
        kind,
        color: contrasting_color(rng, avoid),
        center,
        radii: radius,
        rotation: rng.uniform(0.0, std::f64::consts::PI),
        vertices,
        shading: (rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)),
        texture: {
            // The grating period follows the shape's size, so it looks alike
            // once a box crop is resized to a fixed patch.
            let period = ((radius.0 + radius.1) / rng.uniform(5.0, 7.0)).max(3.0);
            let angle = rng.uniform(0.0, std::f64::consts::TAU);
            let k = std::f64::consts::TAU / period;
            (
                rng.uniform(0.12, 0.18),
                k * angle.cos(),
                k * angle.sin(),
                rng.uniform(0.0, std::f64::consts::TAU),
            )
        },
    }
}

fn random_background(rng: &mut Rng, size: usize) -> Background {
    let base = random_color(rng);
    let waves = (0..3)
        .map(|_| {
            let mut w = [(0.0, 0.0, 0.0, 0.0); 3];
            for ch in &mut w {
                let period = rng.uniform(0.3, 1.0) * size as f64;
                let angle = rng.uniform(0.0, std::f64::consts::TAU);
                let k = std::f64::consts::TAU / period;
                *ch = (
                    rng.uniform(0.03, 0.1),
                    k * angle.cos(),
                    k * angle.sin(),
                    rng.uniform(0.0, std::f64::consts::TAU),
                );
            }
            w
        })
        .collect();
    Background { base, waves }
}

/// Random scene description for one image of `split`.
pub fn sample_scene(split: Split, seed: u64, cfg: &SynthConfig) -> SceneSpec {
    let mut rng = Rng::seed(seed);
    let size = match split {
        Split::Salient => cfg.salient_size,
        Split::Weak => cfg.weak_size,
    };
    let s = size as f64;
    let background = random_background(&mut rng, size);
    let mut avoid = vec![background.base];
    let mut shapes = Vec::new();
    match split {
        Split::Salient => {
            let r = (rng.uniform(0.38, 0.5) * s, rng.uniform(0.38, 0.5) * s);
            let c = (rng.uniform(0.45, 0.55) * s, rng.uniform(0.45, 0.55) * s);
            shapes.push(random_shape(&mut rng, c, r, &avoid));
        }
        Split::Weak => {
            let n = 1 + rng.below(3);
            for i in 0..n {
                let r = (rng.uniform(0.08, 0.25) * s, rng.uniform(0.08, 0.25) * s);
                let c = if i > 0 && rng.uniform(0.0, 1.0) < cfg.overlap_prob {
                    let anchor: &ShapeSpec = &shapes[rng.below(shapes.len())];
                    let reach = anchor.radii.0.max(anchor.radii.1);
                    let a = rng.uniform(0.0, std::f64::consts::TAU);
                    let d = rng.uniform(0.4, 0.9) * reach;
                    (anchor.center.0 + d * a.cos(), anchor.center.1 + d * a.sin())
                } else {
                    (rng.uniform(0.15, 0.85) * s, rng.uniform(0.15, 0.85) * s)
                };
                let shape = random_shape(&mut rng, c, r, &avoid);
                avoid.push(shape.color);
                shapes.push(shape);
            }
            // Larger shapes go behind smaller ones.
            shapes.sort_by(|a, b| b.area_estimate().total_cmp(&a.area_estimate()));
        }
    }
    SceneSpec {
        height: size,
        width: size,
        background,
        shapes,
        noise: 0.03,
        seed,
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// 8-connectivity of a mask's foreground.
pub fn is_connected(m: &BinaryMask) -> bool {
    let (h, w) = (m.height(), m.width());
    let Some(start) = m.bits().iter().position(|&b| b) else {
        return false;
    };
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    seen[start] = true;
    let mut reached = 1;
    while let Some(p) = stack.pop() {
        let (r, c) = ((p / w) as isize, (p % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if m.bits()[q] && !seen[q] {
                    seen[q] = true;
                    reached += 1;
                    stack.push(q);
                }
            }
        }
    }
    reached == m.count()
}

/// Renders a scene; `None` when some visible mask is too small or disconnected.
pub fn render_scene(spec: &SceneSpec, min_area: usize) -> Option<Scene> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = Rng::child(spec.seed, &[0x524e44]);
    let mut image = Image::filled(3, h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut v = spec.background.base[ch];
                for wave in &spec.background.waves {
                    let (a, kx, ky, ph) = wave[ch];
                    v += a * (kx * c as f64 + ky * r as f64 + ph).sin();
                }
                image.set(ch, r, c, v);
            }
        }
    }
    let rasters: Vec<BinaryMask> = spec.shapes.iter().map(|s| s.raster(h, w)).collect();
    for (shape, raster) in spec.shapes.iter().zip(&rasters) {
        let (rx, ry) = (shape.radii.0.max(1.0), shape.radii.1.max(1.0));
        for r in 0..h {
            for c in 0..w {
                if !raster.get(r, c) {
                    continue;
                }
                let nx = (c as f64 + 0.5 - shape.center.0) / rx;
                let ny = (r as f64 + 0.5 - shape.center.1) / ry;
                let (a, kx, ky, ph) = shape.texture;
                let grain = a * (kx * c as f64 + ky * r as f64 + ph).sin();
                for ch in 0..3 {
                    image.set(
                        ch,
                        r,
                        c,
                        shape.color[ch] + shape.shading.0 * nx + shape.shading.1 * ny + grain,
                    );
                }
            }
        }
    }
    for v in image.data.iter_mut() {
        *v = quantize(*v + spec.noise * rng.normal());
    }
    let mut instances = Vec::with_capacity(rasters.len());
    for (i, (shape, raster)) in spec.shapes.iter().zip(&rasters).enumerate() {
        let mut visible = raster.clone();
        for later in &rasters[i + 1..] {
            for (p, &on) in later.bits().iter().enumerate() {
                if on {
                    visible.set(p / w, p % w, false);
                }
            }
        }
        if visible.count() < min_area || !is_connected(&visible) {
            return None;
        }
        let bbox = bbox_of_mask(&visible)?;
        if bbox.w < 4 || bbox.h < 4 {
            return None;
        }
        instances.push(SceneInstance {
            id: i as u64,
            kind: shape.kind,
            bbox,
            mask: visible,
        });
    }
    Some(Scene { image, instances })
}

/// Scene `index` of `split`; resamples until the scene is valid.
pub fn generate_one(split: Split, seed: u64, index: u64, cfg: &SynthConfig) -> Scene {
    for attempt in 0.. {
        let s = derive_seed(seed, &[split.tag(), index, attempt]);
        let spec = sample_scene(split, s, cfg);
        if let Some(scene) = render_scene(&spec, cfg.min_area) {
            return scene;
        }
    }
    unreachable!()
}

/// `count` scenes of `split`, fully determined by `seed`.
pub fn generate(split: Split, count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    use rayon::prelude::*;
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| generate_one(split, seed, i, cfg))
        .collect())
}

/// Layout written by [`write_split`].
pub struct SplitFiles {
    /// Boxes only; what a trainer may read.
    pub manifest: Manifest,
    /// Same entries with `mask_file` set.
    pub masked: Manifest,
}

/// Writes images and masks under `dir` and returns both manifests.
///
/// With `masks_for_training` the masked manifest is written as
/// `dir/manifest.json`; otherwise `dir/manifest.json` has boxes only and
/// the masks live under `dir/eval/`.
pub fn write_split(dir: &Path, scenes: &[Scene], masks_for_training: bool) -> Result<SplitFiles> {
    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(&dir.join("images"))?;
    let mask_dir = if masks_for_training {
        dir.join("masks")
    } else {
        dir.join("eval").join("masks")
    };
    mk(&mask_dir)?;
    let mut boxes = Manifest::default();
    let mut masked = Manifest::default();
    for (i, scene) in scenes.iter().enumerate() {
        let file = format!("images/{i:06}.ppm");
        scene.image.write(&dir.join(&file))?;
        let mut entry = ImageEntry {
            id: i as u64,
            file: file.clone(),
            height: scene.image.height,
            width: scene.image.width,
            instances: Vec::new(),
        };
        let mut entry_masked = entry.clone();
        if !masks_for_training {
            entry_masked.file = format!("../{file}");
        }
        for inst in &scene.instances {
            let name = format!("{i:06}_{:02}.pgm", inst.id);
            save_mask(&inst.mask, &mask_dir.join(&name))?;
            let e = InstanceEntry::boxed(inst.id, inst.kind.name(), inst.bbox);
            entry.instances.push(e.clone());
            entry_masked.instances.push(InstanceEntry {
                mask_file: Some(format!("masks/{name}")),
                ..e
            });
        }
        boxes.images.push(entry);
        masked.images.push(entry_masked);
    }
    if masks_for_training {
        masked.save(&dir.join("manifest.json"))?;
    } else {
        boxes.save(&dir.join("manifest.json"))?;
        masked.save(&dir.join("eval").join("manifest.json"))?;
    }
    Ok(SplitFiles {
        manifest: boxes,
        masked,
    })
}
