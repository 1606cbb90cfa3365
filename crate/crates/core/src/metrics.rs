//! Instance segmentation metrics: IoU@k, mIoU*, and mask AP.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mask_iou, BinaryMask};

/// IoU thresholds reported by [`MetricsReport`].
pub const THRESHOLDS: [f64; 4] = [0.25, 0.5, 0.7, 0.75];

/// One ground-truth instance paired with the prediction made for it.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub image: u64,
    pub class: String,
    pub gt: BinaryMask,
    pub pred: BinaryMask,
    pub score: f64,
}

impl InstanceRecord {
    pub fn iou(&self) -> Result<f64> {
        mask_iou(&self.pred, &self.gt)
    }
}

/// Percentage of records whose mask IoU is strictly above `k`.
pub fn iou_at_k(records: &[InstanceRecord], k: f64) -> Result<f64> {
    let ious = record_ious(records)?;
    Ok(percent_above(&ious, k))
}

fn percent_above(ious: &[f64], k: f64) -> f64 {
    100.0 * ious.iter().filter(|&&v| v > k).count() as f64 / ious.len() as f64
}

pub fn record_ious(records: &[InstanceRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::invalid("no instance records"));
    }
    records.iter().map(InstanceRecord::iou).collect()
}

/// Mean over classes of the per-class mean instance IoU.
pub fn miou_star(records: &[InstanceRecord]) -> Result<f64> {
    let ious = record_ious(records)?;
    let per_class = class_means(records, &ious);
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

fn class_means(records: &[InstanceRecord], ious: &[f64]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (r, &v) in records.iter().zip(ious) {
        let e = acc.entry(r.class.clone()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: u64,
    pub class: String,
    pub mask: BinaryMask,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: u64,
    pub class: String,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub per_class: BTreeMap<String, f64>,
    /// Mean over classes with at least one ground truth; 0 when there are none.
    pub map: f64,
}

/// Precision/recall after each detection, in descending score order.
pub fn pr_curve(is_tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    is_tp
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            (tp as f64 / (i + 1) as f64, tp as f64 / n_gt as f64)
        })
        .collect()
}

/// 101-point interpolated AP over `(precision, recall)` points.
pub fn ap_101(points: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        total += points.iter().filter(|p| p.1 >= r).map(|p| p.0).fold(0.0, f64::max);
    }
    total / 101.0
}

/// Sorts by descending score (stable) and greedily matches each detection
/// to the unmatched same-image ground truth of highest IoU `>= threshold`.
pub fn match_detections(dets: &[&Detection], gts: &[&GroundTruth], threshold: f64) -> Result<Vec<bool>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in order {
        let d = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.image != d.image {
                continue;
            }
            let v = mask_iou(&d.mask, &g.mask)?;
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.push(best.is_some());
    }
    Ok(out)
}

/// Class-wise mask AP at one IoU threshold.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> Result<ApResult> {
    let mut per_class = BTreeMap::new();
    let classes: std::collections::BTreeSet<&str> = gts.iter().map(|g| g.class.as_str()).collect();
    for class in classes {
        let d: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
        let hits = match_detections(&d, &g, threshold)?;
        per_class.insert(class.to_string(), ap_101(&pr_curve(&hits, g.len())));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(ApResult { per_class, map })
}

fn threshold_key(t: f64) -> String {
    format!("{:.0}", t * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub instances: usize,
    pub miou: f64,
    pub iou_at: BTreeMap<String, f64>,
    pub ap_at: BTreeMap<String, f64>,
}

/// Keys of `iou_at`/`ap_at` are thresholds in percent ("25", "50", ...).
/// IoU@k values are percentages; mIoU* and AP are fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub miou_star: f64,
    pub iou_at: BTreeMap<String, f64>,
    pub ap_at: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, ClassReport>,
}

impl MetricsReport {
    /// Evaluates per-instance predictions; each record doubles as one
    /// scored detection for AP.
    pub fn evaluate(records: &[InstanceRecord]) -> Result<MetricsReport> {
        let ious = record_ious(records)?;
        let means = class_means(records, &ious);
        let dets: Vec<Detection> = records
            .iter()
            .map(|r| Detection {
                image: r.image,
                class: r.class.clone(),
                mask: r.pred.clone(),
                score: r.score,
            })
            .collect();
        let gts: Vec<GroundTruth> = records
            .iter()
            .map(|r| GroundTruth {
                image: r.image,
                class: r.class.clone(),
                mask: r.gt.clone(),
            })
            .collect();
        let mut iou_at = BTreeMap::new();
        let mut ap_at = BTreeMap::new();
        let mut per_class: BTreeMap<String, ClassReport> = means
            .iter()
            .map(|(c, &m)| {
                let n = records.iter().filter(|r| &r.class == c).count();
                (
                    c.clone(),
                    ClassReport {
                        instances: n,
                        miou: m,
                        iou_at: BTreeMap::new(),
                        ap_at: BTreeMap::new(),
                    },
                )
            })
            .collect();
        for t in THRESHOLDS {
            let key = threshold_key(t);
            iou_at.insert(key.clone(), percent_above(&ious, t));
            let ap = average_precision(&dets, &gts, t)?;
            ap_at.insert(key.clone(), ap.map);
            for (c, rep) in per_class.iter_mut() {
                let class_ious: Vec<f64> = records
                    .iter()
                    .zip(&ious)
                    .filter(|(r, _)| &r.class == c)
                    .map(|(_, &v)| v)
                    .collect();
                rep.iou_at.insert(key.clone(), percent_above(&class_ious, t));
                rep.ap_at.insert(key.clone(), ap.per_class[c]);
            }
        }
        Ok(MetricsReport {
            instances: records.len(),
            miou_star: means.values().sum::<f64>() / means.len() as f64,
            iou_at,
            ap_at,
            per_class,
        })
    }

    pub fn iou_at(&self, t: f64) -> f64 {
        self.iou_at.get(&threshold_key(t)).copied().unwrap_or(f64::NAN)
    }

    pub fn ap_at(&self, t: f64) -> f64 {
        self.ap_at.get(&threshold_key(t)).copied().unwrap_or(f64::NAN)
    }

    /// Fixed-width text table, all values in percent.
    pub fn to_table(&self) -> String {
        let mut header = format!("{:<12}{:>6}{:>8}", "class", "n", "mIoU*");
        for t in THRESHOLDS {
            let _ = write!(header, "{:>8}", format!("IoU@{}", threshold_key(t)));
        }
        for t in THRESHOLDS {
            let _ = write!(header, "{:>8}", format!("AP@{}", threshold_key(t)));
        }
        let mut out = header;
        out.push('\n');
        let mut row = |name: &str, n: usize, miou: f64, iou: &BTreeMap<String, f64>, ap: &BTreeMap<String, f64>| {
            let _ = write!(out, "{name:<12}{n:>6}{:>8.1}", 100.0 * miou);
            for t in THRESHOLDS {
                let _ = write!(out, "{:>8.1}", iou[&threshold_key(t)]);
            }
            for t in THRESHOLDS {
                let _ = write!(out, "{:>8.1}", 100.0 * ap[&threshold_key(t)]);
            }
            out.push('\n');
        };
        for (c, rep) in &self.per_class {
            row(c, rep.instances, rep.miou, &rep.iou_at, &rep.ap_at);
        }
        row("all", self.instances, self.miou_star, &self.iou_at, &self.ap_at);
        out
    }
}
