//! Joint training of the weak, salient and transferred heads.
//!
//! Every sample runs the backbone and the weak head and pays the MIL loss
//! on its bags. Salient samples also run the salient head and the
//! transferred head and pay the pixel loss on the blend of the two. The
//! transferred head's parameters are produced once per batch by the
//! transfer MLP from a detached copy of the weak head, so its gradient
//! flows into the MLP only.
//!
//! Per-sample graphs are independent and may run in parallel; gradients
//! are reduced and applied in sample order, so runs are bit-reproducible.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{salient_augment, weak_augment, AugmentConfig};
use crate::bags::{build_bags, BagSet};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::heads::{
    backbone_forward, head_forward_vars, mlp_forward, unflatten_vars, weight_transfer_vars, ConvVars, HeadVars,
    MlpVars, Model, ModelConfig, Predictor, Scorer,
};
use crate::image::Image;
use crate::losses::{mil_loss, pixel_loss, LossConfig, SampleKind};
use crate::manifest::{base_dir, load_image, Manifest};
use crate::metrics::{InstanceRecord, MetricsReport};
use crate::proxymask::predict_mask;
use crate::rng::{derive_seed, Rng};
use crate::sampler::{plan_epoch, Batch, SamplerConfig};
use crate::synthdata::Scene;

const MODEL_TAG: u64 = 0x4d4f44;
const SAMPLER_TAG: u64 = 0x53414d;
const AUGMENT_TAG: u64 = 0x415547;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Joint,
    /// Weak head and backbone only; the salient head and transfer MLP stay frozen.
    MilOnly,
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// `lr · (1 − step/total)^power`.
    Poly {
        power: f64,
    },
}

impl LrSchedule {
    /// Multiplier on the base rate for update `step` of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Poly { power } => (1.0 - step as f64 / total.max(1) as f64).max(0.0).powf(power),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Caps the L2 norm of each parameter tensor's gradient before the update.
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub loss: LossConfig,
    /// `sampler.seed` is ignored; the sampler seed is derived from `seed`.
    pub sampler: SamplerConfig,
    pub mode: TrainMode,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: None,
            schedule: LrSchedule::Constant,
            epochs: 10,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            mode: TrainMode::Joint,
            seed: 0,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("clip norm must be positive, got {c}")));
            }
        }
        if let LrSchedule::Poly { power } = self.schedule {
            if !(power > 0.0 && power.is_finite()) {
                return Err(Error::invalid(format!(
                    "poly schedule power must be positive, got {power}"
                )));
            }
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    /// Predictor used for validation and proxy masks.
    pub fn predictor(&self) -> Predictor {
        match self.mode {
            TrainMode::Joint => Predictor::Blend { alpha: self.loss.alpha },
            TrainMode::MilOnly => Predictor::Weak,
        }
    }

    pub fn initial_model(&self) -> Model {
        Model::init(self.model.clone(), derive_seed(self.seed, &[MODEL_TAG]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakInstance {
    pub image: usize,
    pub bbox: BBox,
}

/// Training images: box-only weak instances and masked salient images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    pub weak_images: Vec<Image>,
    pub weak: Vec<WeakInstance>,
    pub salient: Vec<(Image, BinaryMask)>,
}

impl TrainData {
    /// Reads a box-only weak manifest and a masked salient manifest.
    /// Weak masks are never read, even when present.
    pub fn load(weak_manifest: &Path, salient_manifest: &Path) -> Result<TrainData> {
        let mut data = TrainData::default();
        let weak = Manifest::load(weak_manifest)?;
        let base = base_dir(weak_manifest);
        for entry in &weak.images {
            let idx = data.weak_images.len();
            data.weak_images.push(load_image(&base, entry)?);
            data.weak.extend(entry.instances.iter().map(|i| WeakInstance {
                image: idx,
                bbox: i.bbox,
            }));
        }
        let salient = Manifest::load(salient_manifest)?;
        let base = base_dir(salient_manifest);
        for entry in &salient.images {
            let image = load_image(&base, entry)?;
            let mut mask = BinaryMask::new(entry.height, entry.width);
            for inst in &entry.instances {
                let m = inst.load_mask(&base, entry.height, entry.width)?.ok_or_else(|| {
                    Error::format(
                        "manifest",
                        format!("salient image {} instance {} has no mask", entry.id, inst.id),
                    )
                })?;
                for (p, &on) in m.bits().iter().enumerate() {
                    if on {
                        mask.set(p / entry.width, p % entry.width, true);
                    }
                }
            }
            if mask.is_empty() {
                return Err(Error::format(
                    "manifest",
                    format!("salient image {} has an empty mask", entry.id),
                ));
            }
            data.salient.push((image, mask));
        }
        Ok(data)
    }

    /// In-memory equivalent of [`load`](Self::load); weak masks are discarded.
    pub fn from_scenes(weak: &[Scene], salient: &[Scene]) -> TrainData {
        let mut data = TrainData::default();
        for (idx, s) in weak.iter().enumerate() {
            data.weak_images.push(s.image.clone());
            data.weak.extend(s.instances.iter().map(|i| WeakInstance {
                image: idx,
                bbox: i.bbox,
            }));
        }
        data.salient = salient
            .iter()
            .map(|s| (s.image.clone(), s.instances[0].mask.clone()))
            .collect();
        data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValInstance {
    pub image: usize,
    pub image_id: u64,
    pub class: String,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

/// Held-out images with instance masks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValData {
    pub images: Vec<Image>,
    pub instances: Vec<ValInstance>,
}

impl ValData {
    pub fn load(manifest_path: &Path) -> Result<ValData> {
        let m = Manifest::load(manifest_path)?;
        let base = base_dir(manifest_path);
        let mut val = ValData::default();
        for entry in &m.images {
            let idx = val.images.len();
            val.images.push(load_image(&base, entry)?);
            for inst in &entry.instances {
                let mask = inst.load_mask(&base, entry.height, entry.width)?.ok_or_else(|| {
                    Error::format(
                        "manifest",
                        format!("image {} instance {} has no mask", entry.id, inst.id),
                    )
                })?;
                val.instances.push(ValInstance {
                    image: idx,
                    image_id: entry.id,
                    class: inst.class.clone(),
                    bbox: inst.bbox,
                    mask,
                });
            }
        }
        Ok(val)
    }

    pub fn from_scenes(scenes: &[Scene]) -> ValData {
        let mut val = ValData::default();
        for (idx, s) in scenes.iter().enumerate() {
            val.images.push(s.image.clone());
            val.instances.extend(s.instances.iter().map(|i| ValInstance {
                image: idx,
                image_id: idx as u64,
                class: i.kind.name().to_string(),
                bbox: i.bbox,
                mask: i.mask.clone(),
            }));
        }
        val
    }
}

/// Per-instance predictions on `val`, scored against its masks.
pub fn evaluate(model: &Model, val: &ValData, predictor: Predictor, size: usize) -> Result<MetricsReport> {
    let scorer = Scorer::new(model, predictor)?;
    let records = val
        .instances
        .par_iter()
        .map(|inst| {
            let pred = predict_mask(&scorer, &val.images[inst.image], &inst.bbox, size)?;
            Ok(InstanceRecord {
                image: inst.image_id,
                class: inst.class.clone(),
                gt: inst.mask.clone(),
                pred,
                score: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::evaluate(&records)
}

/// One augmented training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub kind: SampleKind,
    /// Weak instance index or salient image index.
    pub id: usize,
    pub image: Tensor,
    pub bags: BagSet,
    pub mask: Option<BinaryMask>,
}

/// Augments the samples of one batch, weak first, each from its own seed.
pub fn prepare_batch(
    data: &TrainData,
    batch: &Batch,
    cfg: &TrainConfig,
    epoch: u64,
    index: u64,
) -> Result<Vec<Prepared>> {
    let p = cfg.augment.patch;
    let slots: Vec<(SampleKind, usize)> = batch
        .weak
        .iter()
        .map(|&i| (SampleKind::Weak, i))
        .chain(batch.salient.iter().map(|&i| (SampleKind::Salient, i)))
        .collect();
    slots
        .par_iter()
        .enumerate()
        .map(|(slot, &(kind, id))| {
            let mut rng = Rng::child(cfg.seed, &[AUGMENT_TAG, epoch, index, slot as u64]);
            match kind {
                SampleKind::Weak => {
                    let inst = data
                        .weak
                        .get(id)
                        .ok_or_else(|| Error::invalid(format!("weak sample {id} out of range")))?;
                    let patch = weak_augment(&data.weak_images[inst.image], &inst.bbox, &mut rng, &cfg.augment)?;
                    let bbox = patch.bbox.expect("weak patches carry a box");
                    Ok(Prepared {
                        kind,
                        id,
                        image: patch.image.to_tensor(),
                        bags: build_bags(&bbox, p, p)?,
                        mask: None,
                    })
                }
                SampleKind::Salient => {
                    let (image, mask) = data
                        .salient
                        .get(id)
                        .ok_or_else(|| Error::invalid(format!("salient sample {id} out of range")))?;
                    let patch = salient_augment(image, mask, &mut rng, &cfg.augment)?;
                    let bbox = patch.bbox.expect("salient patches carry a box");
                    Ok(Prepared {
                        kind,
                        id,
                        image: patch.image.to_tensor(),
                        bags: build_bags(&bbox, p, p)?,
                        mask: patch.mask,
                    })
                }
            }
        })
        .collect()
}

/// Graph variables for every model parameter, in [`Model::named_params`] order.
pub struct ModelVars {
    pub backbone: Vec<ConvVars>,
    pub weak: HeadVars,
    pub salient: HeadVars,
    pub mlp: MlpVars,
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Binds each parameter tensor to a variable produced by `bind`.
    pub fn bind(
        g: &mut Graph,
        model: &Model,
        mut bind: impl FnMut(&mut Graph, &Tensor) -> Result<Var>,
    ) -> Result<ModelVars> {
        let mut all = Vec::new();
        let mut backbone = Vec::new();
        for l in &model.backbone.layers {
            let (w, b) = (bind(g, &l.weight)?, bind(g, &l.bias)?);
            all.extend([w, b]);
            backbone.push(ConvVars {
                weight: w,
                bias: b,
                stride: l.stride,
                pad: l.pad(),
            });
        }
        let mut head = |g: &mut Graph, h: &crate::heads::HeadParams, all: &mut Vec<Var>| -> Result<HeadVars> {
            let mut conv = |c: &crate::heads::ConvParams| -> Result<ConvVars> {
                let (w, b) = (bind(g, &c.weight)?, bind(g, &c.bias)?);
                all.extend([w, b]);
                Ok(ConvVars {
                    weight: w,
                    bias: b,
                    stride: c.stride,
                    pad: c.pad(),
                })
            };
            Ok(HeadVars {
                conv1: conv(&h.conv1)?,
                conv2: conv(&h.conv2)?,
                conv3: conv(&h.conv3)?,
            })
        };
        let weak = head(g, &model.weak, &mut all)?;
        let salient = head(g, &model.salient, &mut all)?;
        let t = &model.transfer;
        let mlp = MlpVars {
            w1: bind(g, &t.w1)?,
            b1: bind(g, &t.b1)?,
            w2: bind(g, &t.w2)?,
            b2: bind(g, &t.b2)?,
        };
        all.extend([mlp.w1, mlp.b1, mlp.w2, mlp.b2]);
        Ok(ModelVars {
            backbone,
            weak,
            salient,
            mlp,
            all,
        })
    }

    pub fn leaves(g: &mut Graph, model: &Model) -> ModelVars {
        Self::bind(g, model, |g, t| Ok(g.leaf(t.clone()))).expect("leaf binding cannot fail")
    }

    /// Slices every parameter out of one flat variable laid out as [`flatten_model`].
    pub fn from_flat(g: &mut Graph, flat: Var, model: &Model) -> Result<ModelVars> {
        let mut off = 0;
        Self::bind(g, model, |g, t| {
            let v = g.slice(flat, off, t.shape().to_vec())?;
            off += t.len();
            Ok(v)
        })
    }
}

/// All parameters concatenated in [`Model::named_params`] order.
pub fn flatten_model(model: &Model) -> Vec<f64> {
    model
        .named_params()
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect()
}

pub fn unflatten_model(template: &Model, flat: &[f64]) -> Result<Model> {
    let mut m = template.clone();
    let total: usize = m.named_params().iter().map(|(_, t)| t.len()).sum();
    if flat.len() != total {
        return Err(Error::shape(
            "unflatten_model",
            format!("expected {total} values, got {}", flat.len()),
        ));
    }
    let mut off = 0;
    for t in m.params_mut() {
        let n = t.len();
        *t = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?;
        off += n;
    }
    Ok(m)
}

/// Counts pixel-loss evaluations by sample kind.
#[derive(Debug, Default)]
pub struct Instrumentation {
    pub weak_pixel_evals: AtomicUsize,
    pub salient_pixel_evals: AtomicUsize,
}

impl Instrumentation {
    pub fn weak_pixel_evals(&self) -> usize {
        self.weak_pixel_evals.load(Ordering::Relaxed)
    }

    pub fn salient_pixel_evals(&self) -> usize {
        self.salient_pixel_evals.load(Ordering::Relaxed)
    }
}

pub struct SampleLoss {
    pub total: Var,
    pub mil: Var,
    pub pix: Option<Var>,
}

/// Records one sample's loss. `pixel_heads` is `(salient, transferred)` and
/// is only used for salient samples in joint mode.
pub fn sample_loss(
    g: &mut Graph,
    backbone: &[ConvVars],
    weak: &HeadVars,
    pixel_heads: Option<(&HeadVars, &HeadVars)>,
    sample: &Prepared,
    cfg: &TrainConfig,
    instr: &Instrumentation,
) -> Result<SampleLoss> {
    let slope = cfg.model.slope;
    let (h, w) = (sample.bags.patch_h, sample.bags.patch_w);
    let x = g.constant(sample.image.clone());
    let f = backbone_forward(g, x, backbone, slope)?;
    let s = head_forward_vars(g, f, weak, slope, h, w)?;
    let mil = mil_loss(g, s, &sample.bags, &cfg.loss)?;
    let pix = match (sample.kind, cfg.mode, pixel_heads, &sample.mask) {
        (SampleKind::Salient, TrainMode::Joint, Some((sal, tr)), Some(mask)) => {
            instr.salient_pixel_evals.fetch_add(1, Ordering::Relaxed);
            let sa = head_forward_vars(g, f, sal, slope, h, w)?;
            let st = head_forward_vars(g, f, tr, slope, h, w)?;
            Some(pixel_loss(g, mask, sa, st, &cfg.loss)?)
        }
        (SampleKind::Salient, TrainMode::Joint, ..) => {
            return Err(Error::invalid(format!(
                "salient sample {} lacks its mask or heads",
                sample.id
            )));
        }
        _ => None,
    };
    if sample.kind == SampleKind::Weak && pix.is_some() {
        instr.weak_pixel_evals.fetch_add(1, Ordering::Relaxed);
    }
    let total = match pix {
        Some(p) => g.add(mil, p)?,
        None => mil,
    };
    Ok(SampleLoss { total, mil, pix })
}

/// Mean batch loss as a single graph. The transfer MLP reads
/// `transfer_input` as a constant; in training that is the current weak
/// head, flattened, which is what detaching it means.
pub fn batch_objective(
    g: &mut Graph,
    vars: &ModelVars,
    transfer_input: &[f64],
    samples: &[Prepared],
    cfg: &TrainConfig,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let transferred = if cfg.mode == TrainMode::Joint {
        let out = mlp_forward(g, transfer_input.to_vec(), &vars.mlp, cfg.model.slope)?;
        Some(unflatten_vars(g, out, cfg.model.head_channels())?)
    } else {
        None
    };
    let instr = Instrumentation::default();
    let mut acc: Option<Var> = None;
    for s in samples {
        let heads = transferred.as_ref().map(|t| (&vars.salient, t));
        let l = sample_loss(g, &vars.backbone, &vars.weak, heads, s, cfg, &instr)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l.total)?,
            None => l.total,
        });
    }
    Ok(g.scale(acc.expect("nonempty batch"), 1.0 / samples.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub mean_mil: f64,
    /// Mean over salient samples; `None` when no pixel loss was computed.
    pub mean_pix: Option<f64>,
    pub samples: usize,
    pub salient_samples: usize,
}

struct SampleGrads {
    total: f64,
    mil: f64,
    pix: Option<f64>,
    /// Backbone, weak head, salient head, transferred head.
    grads: Vec<Tensor>,
}

fn one_sample(
    model: &Model,
    transferred: Option<&crate::heads::HeadParams>,
    sample: &Prepared,
    cfg: &TrainConfig,
    instr: &Instrumentation,
) -> Result<SampleGrads> {
    sample_grads(model, transferred, sample, cfg, instr).map_err(|e| match e {
        Error::NonFinite(what) if !what.contains(" sample ") => {
            Error::NonFinite(format!("{what} while processing {:?} sample {}", sample.kind, sample.id).to_lowercase())
        }
        other => other,
    })
}

fn sample_grads(
    model: &Model,
    transferred: Option<&crate::heads::HeadParams>,
    sample: &Prepared,
    cfg: &TrainConfig,
    instr: &Instrumentation,
) -> Result<SampleGrads> {
    let mut g = Graph::new();
    let backbone = model.backbone.register(&mut g);
    let weak = model.weak.register(&mut g);
    let pixel = match (sample.kind, transferred) {
        (SampleKind::Salient, Some(t)) => Some((model.salient.register(&mut g), t.register(&mut g))),
        _ => None,
    };
    let loss = sample_loss(
        &mut g,
        &backbone,
        &weak,
        pixel.as_ref().map(|(a, b)| (a, b)),
        sample,
        cfg,
        instr,
    )?;
    let total = g.value(loss.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite(
            format!("loss of {:?} sample {}", sample.kind, sample.id).to_lowercase(),
        ));
    }
    let grads = g.backward(loss.total)?;
    let mut out = Vec::new();
    for c in &backbone {
        out.push(grads.get_or_zeros(c.weight, g.value(c.weight)));
        out.push(grads.get_or_zeros(c.bias, g.value(c.bias)));
    }
    out.extend(weak.vars().iter().map(|&v| grads.get_or_zeros(v, g.value(v))));
    match &pixel {
        Some((sal, tr)) => {
            out.extend(sal.vars().iter().map(|&v| grads.get_or_zeros(v, g.value(v))));
            out.extend(tr.vars().iter().map(|&v| grads.get_or_zeros(v, g.value(v))));
        }
        None => {
            for _ in 0..2 {
                out.extend(model.salient.tensors().iter().map(|t| Tensor::zeros(t.shape())));
            }
        }
    }
    if out.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(
            format!("gradient of {:?} sample {}", sample.kind, sample.id).to_lowercase(),
        ));
    }
    Ok(SampleGrads {
        total,
        mil: g.value(loss.mil).item(),
        pix: loss.pix.map(|p| g.value(p).item()),
        grads: out,
    })
}

fn add_into(acc: &mut [Tensor], xs: &[Tensor]) {
    for (a, x) in acc.iter_mut().zip(xs) {
        a.data_mut().iter_mut().zip(x.data()).for_each(|(a, x)| *a += x);
    }
}

/// Gradient of the mean batch loss for every parameter, in
/// [`Model::named_params`] order.
pub fn compute_gradients(
    model: &Model,
    samples: &[Prepared],
    cfg: &TrainConfig,
    instr: &Instrumentation,
) -> Result<(Vec<Tensor>, StepStats)> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let joint = cfg.mode == TrainMode::Joint;
    let transferred = if joint {
        Some(model.transferred_head().map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} of the transferred head")),
            other => other,
        })?)
    } else {
        None
    };
    let per_sample = samples
        .par_iter()
        .map(|s| one_sample(model, transferred.as_ref(), s, cfg, instr))
        .collect::<Result<Vec<_>>>()?;

    let mut acc: Vec<Tensor> = per_sample[0].grads.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for s in &per_sample {
        add_into(&mut acc, &s.grads);
    }
    let n = samples.len() as f64;
    for t in &mut acc {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    let transferred_grads = acc.split_off(acc.len() - 6);
    let mlp_grads = match &transferred {
        Some(_) if per_sample.iter().any(|s| s.pix.is_some()) => {
            let seed: Vec<f64> = transferred_grads
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            let input = model.weak.flatten();
            let (hidden, _) = model.transfer.forward(&input)?;
            model.transfer.backward(&input, &hidden, &seed).into_iter().collect()
        }
        _ => [
            &model.transfer.w1,
            &model.transfer.b1,
            &model.transfer.w2,
            &model.transfer.b2,
        ]
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect::<Vec<_>>(),
    };
    acc.extend(mlp_grads);

    let pix: Vec<f64> = per_sample.iter().filter_map(|s| s.pix).collect();
    let stats = StepStats {
        loss: per_sample.iter().map(|s| s.total).sum::<f64>() / n,
        mean_mil: per_sample.iter().map(|s| s.mil).sum::<f64>() / n,
        mean_pix: (!pix.is_empty()).then(|| pix.iter().sum::<f64>() / pix.len() as f64),
        samples: samples.len(),
        salient_samples: samples.iter().filter(|s| s.kind == SampleKind::Salient).count(),
    };
    Ok((acc, stats))
}

/// Whether weight decay applies to the named parameter (weights, not biases).
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name == "transfer.w1" || name == "transfer.w2"
}

/// Whether the named parameter is updated in `mode`.
pub fn trainable(name: &str, mode: TrainMode) -> bool {
    match mode {
        TrainMode::Joint => true,
        TrainMode::MilOnly => name.starts_with("backbone.") || name.starts_with("weak."),
    }
}

/// SGD with heavy-ball momentum and decoupled-from-bias weight decay:
/// `v = mu * v + g + wd * w`, `w -= lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Sgd {
        Sgd {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            velocity: model
                .named_params()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], mode: TrainMode) -> Result<()> {
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if grads.len() != names.len() {
            return Err(Error::shape(
                "sgd",
                format!("{} gradients for {} parameters", grads.len(), names.len()),
            ));
        }
        for (((name, p), v), g) in names.iter().zip(model.params_mut()).zip(&mut self.velocity).zip(grads) {
            if !trainable(name, mode) {
                continue;
            }
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "sgd",
                    format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            let scale = match self.clip_norm {
                Some(c) => {
                    let norm = g.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > c {
                        c / norm
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            for ((w, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = self.momentum * *v + scale * g + wd * *w;
                *w -= self.lr * *v;
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name} after the update")));
            }
        }
        Ok(())
    }
}

/// One optimizer step on a prepared batch.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    samples: &[Prepared],
    cfg: &TrainConfig,
    instr: &Instrumentation,
) -> Result<StepStats> {
    let (grads, stats) = compute_gradients(model, samples, cfg, instr)?;
    opt.step(model, &grads, cfg.mode)?;
    Ok(stats)
}

/// Largest gradient magnitude that reaches the weak head from a pixel loss
/// routed through the transfer MLP, with the whole path in one graph.
/// Returns `(weak, mlp)` maxima; detachment means `weak` is exactly zero.
pub fn transfer_path_gradients(model: &Model, sample: &Prepared, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::invalid("transfer-path probe needs a salient sample"))?;
    let mut g = Graph::new();
    let vars = ModelVars::leaves(&mut g, model);
    let tr = weight_transfer_vars(&mut g, &vars.weak, &vars.mlp, cfg.model.slope)?;
    let x = g.constant(sample.image.clone());
    let f = backbone_forward(&mut g, x, &vars.backbone, cfg.model.slope)?;
    let (h, w) = (mask.height(), mask.width());
    let sa = head_forward_vars(&mut g, f, &vars.salient, cfg.model.slope, h, w)?;
    let st = head_forward_vars(&mut g, f, &tr, cfg.model.slope, h, w)?;
    let loss = pixel_loss(&mut g, mask, sa, st, &cfg.loss)?;
    let grads = g.backward(loss)?;
    let max_abs = |vs: &[Var]| {
        vs.iter()
            .filter_map(|&v| grads.get(v))
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .fold(0.0, f64::max)
    };
    let weak = max_abs(&vars.weak.vars());
    let mlp = max_abs(&[vars.mlp.w1, vars.mlp.b1, vars.mlp.w2, vars.mlp.b2]);
    Ok((weak, mlp))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_mil: f64,
    pub mean_pix: Option<f64>,
    pub val_miou_star: Option<f64>,
    pub val_iou50: Option<f64>,
    pub val_iou75: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub weak_pixel_evals: usize,
    pub salient_pixel_evals: usize,
}

/// Trains from the seeded initialization; see [`train_from`].
pub fn train(
    data: &TrainData,
    val: Option<&ValData>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    train_from(cfg.initial_model(), data, val, cfg, on_epoch)
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each with its log line.
pub fn train_from(
    mut model: Model,
    data: &TrainData,
    val: Option<&ValData>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config.widths != cfg.model.widths || model.config.in_channels != cfg.model.in_channels {
        return Err(Error::invalid("model architecture differs from the training config"));
    }
    let sampler = SamplerConfig {
        seed: derive_seed(cfg.seed, &[SAMPLER_TAG]),
        ..cfg.sampler
    };
    let mut opt = Sgd::new(&model, cfg);
    let instr = Instrumentation::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs as u64 {
        let plan = plan_epoch(data.weak.len(), data.salient.len(), &sampler, epoch)?;
        let total = cfg.epochs * plan.batches.len();
        let (mut mil_sum, mut n, mut pix_sum, mut n_pix) = (0.0, 0usize, 0.0, 0usize);
        for (b, batch) in plan.batches.iter().enumerate() {
            opt.lr = cfg.lr * cfg.schedule.factor(step, total);
            step += 1;
            let samples = prepare_batch(data, batch, cfg, epoch, b as u64)?;
            let stats = train_step(&mut model, &mut opt, &samples, cfg, &instr).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {b})")),
                other => other,
            })?;
            mil_sum += stats.mean_mil * stats.samples as f64;
            n += stats.samples;
            if let Some(p) = stats.mean_pix {
                pix_sum += p * stats.salient_samples as f64;
                n_pix += stats.salient_samples;
            }
        }
        let report = match val {
            Some(v) => Some(evaluate(&model, v, cfg.predictor(), cfg.augment.proxy)?),
            None => None,
        };
        let line = EpochLog {
            epoch: epoch as usize + 1,
            mean_mil: mil_sum / n as f64,
            mean_pix: (n_pix > 0).then(|| pix_sum / n_pix as f64),
            val_miou_star: report.as_ref().map(|r| r.miou_star),
            val_iou50: report.as_ref().map(|r| r.iou_at(0.5)),
            val_iou75: report.as_ref().map(|r| r.iou_at(0.75)),
        };
        on_epoch(&line)?;
        log.push(line);
    }
    Ok(TrainOutcome {
        model,
        log,
        weak_pixel_evals: instr.weak_pixel_evals(),
        salient_pixel_evals: instr.salient_pixel_evals(),
    })
}
