//! Training losses with exact gradients.
//!
//! - [`mil_loss`]: bag-level log loss on the maximum of each bag plus a
//!   weighted eight-neighbour smoothness term.
//! - [`pixel_loss`]: binary cross-entropy on the blend of the salient and
//!   transferred score maps.
//! - [`total_loss`]: MIL loss, plus the pixel loss for salient samples only.
//!
//! Probabilities are clamped to `[eps, 1 - eps]` before every logarithm;
//! the clamp has zero derivative outside that range.

use serde::{Deserialize, Serialize};

use crate::bags::BagSet;
use crate::diffcore::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the smoothness term inside the MIL loss.
    pub smooth_weight: f64,
    /// Weight of the salient head in the pixel-loss blend.
    pub alpha: f64,
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smooth_weight: 0.05,
            alpha: 0.7,
            clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_weight >= 0.0 && self.smooth_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "smooth_weight must be >= 0, got {}",
                self.smooth_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::invalid(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

/// Which supervision a training sample carries; selects the λ switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Weak,
    Salient,
}

fn check_map(op: &'static str, s: &Tensor, h: usize, w: usize) -> Result<()> {
    if s.shape() != [h, w] {
        return Err(Error::shape(
            op,
            format!("score map {:?} vs bag patch [{h}, {w}]", s.shape()),
        ));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("{op} score map")));
    }
    if let Some(v) = s.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("{op} expects probabilities, found {v}")));
    }
    Ok(())
}

/// Index of the bag's maximum score; ties go to the lowest row-major index.
fn bag_argmax(s: &[f64], indices: impl Iterator<Item = usize>) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for i in indices {
        if s[i] > best_v || (s[i] == best_v && i < best) {
            best = i;
            best_v = s[i];
        }
    }
    best
}

struct Unary {
    /// `(flat index, positive?)` per bag.
    picks: Vec<(usize, bool)>,
    eps: f64,
}

impl Unary {
    fn value(&self, s: &[f64]) -> f64 {
        self.picks
            .iter()
            .map(|&(i, positive)| {
                let p = s[i].clamp(self.eps, 1.0 - self.eps);
                if positive {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum()
    }
}

impl CustomOp for Unary {
    fn name(&self) -> &'static str {
        "mil_unary"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let s = inputs[0].data();
        let go = grad_output.item();
        let mut g = vec![0.0; s.len()];
        for &(i, positive) in &self.picks {
            let v = s[i];
            if v < self.eps || v > 1.0 - self.eps {
                continue;
            }
            g[i] += go * if positive { -1.0 / v } else { 1.0 / (1.0 - v) };
        }
        vec![Some(Tensor::from_data_like(inputs[0], g))]
    }
}

struct Smooth {
    members: Vec<usize>,
    height: usize,
    width: usize,
}

impl Smooth {
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        let (h, w) = (self.height as isize, self.width as isize);
        for &p in &self.members {
            let (r, c) = ((p / self.width) as isize, (p % self.width) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h || nc >= w {
                        continue;
                    }
                    f(p, (nr * w + nc) as usize);
                }
            }
        }
    }

    fn value(&self, s: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.for_each_pair(|p, q| {
            let d = s[p] - s[q];
            acc += d * d;
        });
        acc
    }
}

impl CustomOp for Smooth {
    fn name(&self) -> &'static str {
        "smooth_term"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let s = inputs[0].data();
        let go = grad_output.item();
        let mut g = vec![0.0; s.len()];
        self.for_each_pair(|p, q| {
            let d = 2.0 * go * (s[p] - s[q]);
            g[p] += d;
            g[q] -= d;
        });
        vec![Some(Tensor::from_data_like(inputs[0], g))]
    }
}

/// Smoothness term: squared differences between every bag pixel and each of
/// its in-bounds eight neighbours, summed over ordered pairs. Each pixel
/// counts once however many bags contain it.
pub fn smooth_term(g: &mut Graph, s: Var, bags: &BagSet) -> Result<Var> {
    check_map("smooth_term", g.value(s), bags.patch_h, bags.patch_w)?;
    let membership = bags.membership();
    let op = Smooth {
        members: membership
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect(),
        height: bags.patch_h,
        width: bags.patch_w,
    };
    let value = op.value(g.value(s).data());
    Ok(g.custom(vec![s], Tensor::scalar(value), Box::new(op)))
}

/// MIL loss on a `[H, W]` probability map.
pub fn mil_loss(g: &mut Graph, s: Var, bags: &BagSet, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if bags.is_empty() {
        return Err(Error::invalid("mil_loss needs at least one bag"));
    }
    check_map("mil_loss", g.value(s), bags.patch_h, bags.patch_w)?;
    let scores = g.value(s).data();
    let picks = bags
        .positives
        .iter()
        .map(|b| (b, true))
        .chain(bags.negatives.iter().map(|b| (b, false)))
        .map(|(b, positive)| (bag_argmax(scores, b.flat_indices(bags.patch_w)), positive))
        .collect();
    let unary = Unary {
        picks,
        eps: cfg.clamp_eps,
    };
    let value = unary.value(scores);
    let unary = g.custom(vec![s], Tensor::scalar(value), Box::new(unary));
    if cfg.smooth_weight == 0.0 {
        return Ok(unary);
    }
    let phi = smooth_term(g, s, bags)?;
    let weighted = g.scale(phi, cfg.smooth_weight);
    g.add(unary, weighted)
}

struct PixelBce {
    target: Vec<bool>,
    alpha: f64,
    eps: f64,
}

impl PixelBce {
    fn blend(&self, a: f64, t: f64) -> f64 {
        self.alpha * a + (1.0 - self.alpha) * t
    }
}

impl CustomOp for PixelBce {
    fn name(&self) -> &'static str {
        "pixel_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let (sa, st) = (inputs[0].data(), inputs[1].data());
        let scale = grad_output.item() / sa.len() as f64;
        let mut ga = vec![0.0; sa.len()];
        let mut gt = vec![0.0; st.len()];
        for i in 0..sa.len() {
            let b = self.blend(sa[i], st[i]);
            if b < self.eps || b > 1.0 - self.eps {
                continue;
            }
            let db = if self.target[i] { -1.0 / b } else { 1.0 / (1.0 - b) } * scale;
            ga[i] = self.alpha * db;
            gt[i] = (1.0 - self.alpha) * db;
        }
        vec![
            Some(Tensor::from_data_like(inputs[0], ga)),
            Some(Tensor::from_data_like(inputs[1], gt)),
        ]
    }
}

/// Mean binary cross-entropy of `alpha * S_a + (1 - alpha) * S_t` against `mask`.
pub fn pixel_loss(g: &mut Graph, mask: &BinaryMask, sa: Var, st: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let (h, w) = (mask.height(), mask.width());
    check_map("pixel_loss", g.value(sa), h, w)?;
    check_map("pixel_loss", g.value(st), h, w)?;
    let op = PixelBce {
        target: mask.bits().to_vec(),
        alpha: cfg.alpha,
        eps: cfg.clamp_eps,
    };
    let (a, t) = (g.value(sa).data(), g.value(st).data());
    let total: f64 = (0..a.len())
        .map(|i| {
            let b = op.blend(a[i], t[i]).clamp(op.eps, 1.0 - op.eps);
            if op.target[i] {
                -b.ln()
            } else {
                -(1.0 - b).ln()
            }
        })
        .sum();
    let value = Tensor::scalar(total / a.len() as f64);
    Ok(g.custom(vec![sa, st], value, Box::new(op)))
}

/// Total per-sample loss: MIL for every sample, plus the pixel loss for
/// salient samples (λ = 1) and nothing else for weak ones (λ = 0).
pub fn total_loss(kind: SampleKind, mil: f64, pix: Option<f64>) -> Result<f64> {
    match (kind, pix) {
        (SampleKind::Weak, None) => Ok(mil),
        (SampleKind::Salient, Some(p)) => Ok(mil + p),
        (SampleKind::Weak, Some(_)) => Err(Error::invalid("pixel loss supplied for a box-supervised sample")),
        (SampleKind::Salient, None) => Err(Error::invalid("salient sample is missing its pixel loss")),
    }
}

/// Graph form of [`total_loss`].
pub fn total_loss_var(g: &mut Graph, kind: SampleKind, mil: Var, pix: Option<Var>) -> Result<Var> {
    match (kind, pix) {
        (SampleKind::Weak, None) => Ok(mil),
        (SampleKind::Salient, Some(p)) => g.add(mil, p),
        (SampleKind::Weak, Some(_)) => Err(Error::invalid("pixel loss supplied for a box-supervised sample")),
        (SampleKind::Salient, None) => Err(Error::invalid("salient sample is missing its pixel loss")),
    }
}

/// Batch reduction: mean of per-sample totals, summed in sample order.
pub fn batch_loss(totals: &[f64]) -> f64 {
    totals.iter().sum::<f64>() / totals.len() as f64
}
