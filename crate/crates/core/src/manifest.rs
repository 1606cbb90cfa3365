//! JSON dataset manifests.
//!
//! ```json
//! {"images": [{"id": 0, "file": "images/000000.ppm", "height": 96, "width": 96,
//!              "instances": [{"id": 0, "class": "ellipse",
//!                             "box": {"x": 3, "y": 4, "w": 20, "h": 11},
//!                             "mask_file": "masks/000000_00.pgm"}]}]}
//! ```
//!
//! Paths are relative to the manifest's directory. Proxy manifests add
//! `ignore` and `agreement` per instance and may carry an uncompressed
//! COCO-style `rle` instead of a mask file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::image::{load_mask, Image};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ImageEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file: String,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InstanceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: u64,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<Rle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ignore: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl InstanceEntry {
    pub fn boxed(id: u64, class: impl Into<String>, bbox: BBox) -> Self {
        InstanceEntry {
            id,
            class: class.into(),
            bbox,
            mask_file: None,
            rle: None,
            ignore: None,
            agreement: None,
            score: None,
        }
    }

    /// The instance mask, from `mask_file` or `rle`, if either is present.
    pub fn load_mask(&self, base: &Path, height: usize, width: usize) -> Result<Option<BinaryMask>> {
        let mask = if let Some(f) = &self.mask_file {
            load_mask(&base.join(f))?
        } else if let Some(rle) = &self.rle {
            rle.decode()?
        } else {
            return Ok(None);
        };
        if mask.height() != height || mask.width() != width {
            return Err(Error::format(
                "manifest",
                format!(
                    "instance {} mask is {}x{}, image is {height}x{width}",
                    self.id,
                    mask.height(),
                    mask.width()
                ),
            ));
        }
        Ok(Some(mask))
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format("manifest", format!("{}: {e}", path.display())))?;
        for img in &m.images {
            for inst in &img.instances {
                if !inst.bbox.fits(img.height, img.width) {
                    return Err(Error::format(
                        "manifest",
                        format!(
                            "{}: image {} instance {} box {:?} outside {}x{}",
                            path.display(),
                            img.id,
                            inst.id,
                            inst.bbox,
                            img.height,
                            img.width
                        ),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn instance_count(&self) -> usize {
        self.images.iter().map(|i| i.instances.len()).sum()
    }
}

pub fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_image(base: &Path, entry: &ImageEntry) -> Result<Image> {
    let img = Image::read(&base.join(&entry.file))?;
    if img.height != entry.height || img.width != entry.width {
        return Err(Error::format(
            "manifest",
            format!(
                "{} is {}x{}, manifest says {}x{}",
                entry.file, img.height, img.width, entry.height, entry.width
            ),
        ));
    }
    Ok(img)
}

/// Uncompressed COCO-style run-length encoding: column-major runs that
/// alternate background/foreground, starting with background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl Rle {
    pub fn encode(m: &BinaryMask) -> Rle {
        let (h, w) = (m.height(), m.width());
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for c in 0..w {
            for r in 0..h {
                let b = m.get(r, c);
                if b != current {
                    counts.push(run);
                    run = 0;
                    current = b;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().sum();
        if total != (h * w) as u64 {
            return Err(Error::format(
                "rle",
                format!("runs cover {total} pixels, mask has {}", h * w),
            ));
        }
        let mut m = BinaryMask::new(h, w);
        let mut idx = 0usize;
        for (k, &run) in self.counts.iter().enumerate() {
            let on = k % 2 == 1;
            for _ in 0..run {
                if on {
                    m.set(idx % h, idx / h, true);
                }
                idx += 1;
            }
        }
        Ok(m)
    }
}
