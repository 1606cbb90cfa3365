//! Toy backbone, the three segmentation heads, and the weight-transfer MLP.
//!
//! All three heads share one architecture: a 3x3 conv, leaky ReLU, a second
//! 3x3 conv, leaky ReLU, a 1x1 projection to one channel, bilinear
//! upsampling to the patch size and a sigmoid. The weak head scores weak and
//! salient patches for the MIL loss, the salient head is trained by pixel
//! supervision, and the transferred head takes its parameters from an MLP
//! applied to a detached copy of the weak head's parameters.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diffcore::io::{read_container, write_container};
use crate::diffcore::{kernels, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LEAKY_SLOPE: f64 = 0.01;
const BACKBONE_STRIDES: [usize; 4] = [1, 2, 2, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of the four backbone convolutions; the last one is
    /// also the head width.
    pub widths: [usize; 4],
    pub slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            widths: [16, 32, 32, 16],
            slope: LEAKY_SLOPE,
        }
    }
}

impl ModelConfig {
    pub fn head_channels(&self) -> usize {
        self.widths[3]
    }

    /// Flattened length of one head's parameters.
    pub fn head_len(&self) -> usize {
        let c = self.head_channels();
        2 * (c * c * 9 + c) + (c + 1)
    }

    pub fn mlp_hidden(&self) -> usize {
        64.max(self.head_len().div_ceil(4))
    }
}

/// One convolution: `weight [K, C, k, k]`, `bias [K]`, padding `k / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvParams {
    fn zeros(out_c: usize, in_c: usize, k: usize, stride: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
            stride,
        }
    }

    fn he(out_c: usize, in_c: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = out_c * in_c * k * k;
        ConvParams {
            weight: Tensor::from_parts(vec![out_c, in_c, k, k], (0..n).map(|_| std * rng.normal()).collect()),
            bias: Tensor::zeros(&[out_c]),
            stride,
        }
    }

    pub fn pad(&self) -> usize {
        self.weight.shape()[2] / 2
    }

    fn register(&self, g: &mut Graph) -> ConvVars {
        ConvVars {
            weight: g.leaf(self.weight.clone()),
            bias: g.leaf(self.bias.clone()),
            stride: self.stride,
            pad: self.pad(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl ConvVars {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub layers: Vec<ConvParams>,
}

impl BackboneParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut in_c = cfg.in_channels;
        let layers = cfg
            .widths
            .iter()
            .zip(BACKBONE_STRIDES)
            .map(|(&out_c, stride)| {
                let l = ConvParams::he(out_c, in_c, 3, stride, rng);
                in_c = out_c;
                l
            })
            .collect();
        BackboneParams { layers }
    }

    pub fn register(&self, g: &mut Graph) -> Vec<ConvVars> {
        self.layers.iter().map(|l| l.register(g)).collect()
    }
}

/// Encoder: four 3x3 convolutions with leaky ReLU; output is 1/4 of the input size.
pub fn backbone_forward(g: &mut Graph, image: Var, layers: &[ConvVars], slope: f64) -> Result<Var> {
    let mut x = image;
    for l in layers {
        let y = l.apply(g, x)?;
        x = g.leaky_relu(y, slope);
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
    pub conv3: ConvVars,
}

impl HeadVars {
    pub fn vars(&self) -> [Var; 6] {
        [
            self.conv1.weight,
            self.conv1.bias,
            self.conv2.weight,
            self.conv2.bias,
            self.conv3.weight,
            self.conv3.bias,
        ]
    }
}

impl HeadParams {
    pub fn zeros(channels: usize) -> Self {
        HeadParams {
            conv1: ConvParams::zeros(channels, channels, 3, 1),
            conv2: ConvParams::zeros(channels, channels, 3, 1),
            conv3: ConvParams::zeros(1, channels, 1, 1),
        }
    }

    pub fn init(channels: usize, rng: &mut Rng) -> Self {
        HeadParams {
            conv1: ConvParams::he(channels, channels, 3, 1, rng),
            conv2: ConvParams::he(channels, channels, 3, 1, rng),
            conv3: ConvParams::he(1, channels, 1, 1, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.weight.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.conv3.weight,
            &self.conv3.bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
        ]
    }

    /// Weights and biases concatenated in `conv1, conv2, conv3` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten) for a head of `channels` width.
    pub fn unflatten(channels: usize, flat: &[f64]) -> Result<Self> {
        let mut head = HeadParams::zeros(channels);
        let expected: usize = head.tensors().iter().map(|t| t.len()).sum();
        if flat.len() != expected {
            return Err(Error::shape(
                "unflatten head",
                format!("expected {expected} values for width {channels}, got {}", flat.len()),
            ));
        }
        let mut off = 0;
        for t in head.tensors_mut() {
            let n = t.len();
            *t = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?;
            off += n;
        }
        Ok(head)
    }

    pub fn register(&self, g: &mut Graph) -> HeadVars {
        HeadVars {
            conv1: self.conv1.register(g),
            conv2: self.conv2.register(g),
            conv3: self.conv3.register(g),
        }
    }
}

/// Graph form of [`head_forward`]; returns a `[out_h, out_w]` probability map.
pub fn head_forward_vars(
    g: &mut Graph,
    features: Var,
    head: &HeadVars,
    slope: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let x = head.conv1.apply(g, features)?;
    let x = g.leaky_relu(x, slope);
    let x = head.conv2.apply(g, x)?;
    let x = g.leaky_relu(x, slope);
    let logits = head.conv3.apply(g, x)?;
    let up = g.upsample_bilinear(logits, out_h, out_w)?;
    let flat = g.slice(up, 0, vec![out_h, out_w])?;
    Ok(g.sigmoid(flat))
}

/// Scores `[C, h, w]` features into an `[out_h, out_w]` probability map.
pub fn head_forward(features: &Tensor, params: &HeadParams, out_h: usize, out_w: usize) -> Result<Tensor> {
    check_features(features, params.channels())?;
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let vars = params.register(&mut g);
    let out = head_forward_vars(&mut g, f, &vars, LEAKY_SLOPE, out_h, out_w)?;
    Ok(g.value(out).clone())
}

fn check_features(features: &Tensor, channels: usize) -> Result<()> {
    match features.shape() {
        [c, _, _] if *c == channels => Ok(()),
        s => Err(Error::shape(
            "head_forward",
            format!("features {s:?} do not have {channels} channels"),
        )),
    }
}

/// Two-layer MLP mapping a flattened head to a flattened head.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub slope: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl TransferMlp {
    /// He-scaled first layer, zero second layer: the transferred head starts at zero.
    pub fn init(dim: usize, hidden: usize, slope: f64, rng: &mut Rng) -> Self {
        let std = (2.0 / dim as f64).sqrt();
        TransferMlp {
            w1: Tensor::from_parts(
                vec![hidden, dim],
                (0..hidden * dim).map(|_| std * rng.normal()).collect(),
            ),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[dim, hidden]),
            b2: Tensor::zeros(&[dim]),
            slope,
        }
    }

    pub fn zeros(dim: usize, hidden: usize, slope: f64) -> Self {
        TransferMlp {
            w1: Tensor::zeros(&[hidden, dim]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[dim, hidden]),
            b2: Tensor::zeros(&[dim]),
            slope,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn register(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            w1: g.leaf(self.w1.clone()),
            b1: g.leaf(self.b1.clone()),
            w2: g.leaf(self.w2.clone()),
            b2: g.leaf(self.b2.clone()),
        }
    }
}

/// Runs the MLP on a constant input; the result depends on MLP parameters only.
pub fn mlp_forward(g: &mut Graph, input: Vec<f64>, mlp: &MlpVars, slope: f64) -> Result<Var> {
    let n = input.len();
    let x = g.constant(Tensor::new(vec![n], input)?);
    let h = g.matvec(mlp.w1, x, mlp.b1)?;
    let a = g.leaky_relu(h, slope);
    g.matvec(mlp.w2, a, mlp.b2)
}

/// Splits a flat head vector recorded in `g` back into per-layer variables.
pub fn unflatten_vars(g: &mut Graph, flat: Var, channels: usize) -> Result<HeadVars> {
    let template = HeadParams::zeros(channels);
    let mut off = 0;
    let mut take = |g: &mut Graph, t: &Tensor| -> Result<Var> {
        let v = g.slice(flat, off, t.shape().to_vec())?;
        off += t.len();
        Ok(v)
    };
    let conv =
        |g: &mut Graph, c: &ConvParams, take: &mut dyn FnMut(&mut Graph, &Tensor) -> Result<Var>| -> Result<ConvVars> {
            Ok(ConvVars {
                weight: take(g, &c.weight)?,
                bias: take(g, &c.bias)?,
                stride: c.stride,
                pad: c.pad(),
            })
        };
    let conv1 = conv(g, &template.conv1, &mut take)?;
    let conv2 = conv(g, &template.conv2, &mut take)?;
    let conv3 = conv(g, &template.conv3, &mut take)?;
    if off != g.value(flat).len() {
        return Err(Error::shape(
            "unflatten head",
            format!("{} values left over", g.value(flat).len() - off),
        ));
    }
    Ok(HeadVars { conv1, conv2, conv3 })
}

/// Graph form of [`weight_transfer`]. The weak head's values are copied in
/// as a constant, so no gradient reaches `weak`.
pub fn weight_transfer_vars(g: &mut Graph, weak: &HeadVars, mlp: &MlpVars, slope: f64) -> Result<HeadVars> {
    let channels = g.value(weak.conv1.weight).shape()[0];
    let flat: Vec<f64> = weak
        .vars()
        .iter()
        .map(|&v| g.detach(v))
        .collect::<Vec<_>>()
        .into_iter()
        .flat_map(|v| g.value(v).data().to_vec())
        .collect();
    let out = mlp_forward(g, flat, mlp, slope)?;
    unflatten_vars(g, out, channels)
}

/// Transferred head parameters: `unflatten(W2 · leaky(W1 · flatten(weak) + b1) + b2)`.
pub fn weight_transfer(weak: &HeadParams, mlp: &TransferMlp) -> Result<HeadParams> {
    let flat = weak.flatten();
    if flat.len() != mlp.dim() {
        return Err(Error::shape(
            "weight_transfer",
            format!("head has {} parameters, MLP expects {}", flat.len(), mlp.dim()),
        ));
    }
    let out = transfer_flat(&flat, mlp)?;
    HeadParams::unflatten(weak.channels(), &out)
}

/// The MLP applied to a flat vector, without a graph.
pub fn transfer_flat(input: &[f64], mlp: &TransferMlp) -> Result<Vec<f64>> {
    Ok(mlp.forward(input)?.1)
}

fn matvec_into(w: &[f64], x: &[f64], b: &[f64]) -> Vec<f64> {
    w.chunks(x.len())
        .zip(b)
        .map(|(row, &bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

impl TransferMlp {
    /// Returns the hidden pre-activation and the output.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if input.len() != self.dim() {
            return Err(Error::shape(
                "transfer mlp",
                format!("input has {} values, MLP expects {}", input.len(), self.dim()),
            ));
        }
        let h = matvec_into(self.w1.data(), input, self.b1.data());
        let a: Vec<f64> = h.iter().map(|&v| kernels::leaky_relu(v, self.slope)).collect();
        let out = matvec_into(self.w2.data(), &a, self.b2.data());
        Ok((h, out))
    }

    /// Parameter gradients `[w1, b1, w2, b2]` for an output gradient `seed`,
    /// given the `input` and hidden pre-activation of [`forward`](Self::forward).
    pub fn backward(&self, input: &[f64], hidden: &[f64], seed: &[f64]) -> [Tensor; 4] {
        let (d, m) = (self.dim(), self.hidden());
        let a: Vec<f64> = hidden.iter().map(|&v| kernels::leaky_relu(v, self.slope)).collect();
        let mut gw2 = vec![0.0; d * m];
        let mut ga = vec![0.0; m];
        for (o, &s) in seed.iter().enumerate() {
            let row = &self.w2.data()[o * m..(o + 1) * m];
            for (j, g) in gw2[o * m..(o + 1) * m].iter_mut().enumerate() {
                *g = s * a[j];
            }
            for (g, w) in ga.iter_mut().zip(row) {
                *g += s * w;
            }
        }
        let gh: Vec<f64> = ga
            .iter()
            .zip(hidden)
            .map(|(g, &h)| g * kernels::leaky_relu_grad(h, self.slope))
            .collect();
        let mut gw1 = vec![0.0; m * d];
        for (j, &g) in gh.iter().enumerate() {
            for (out, x) in gw1[j * d..(j + 1) * d].iter_mut().zip(input) {
                *out = g * x;
            }
        }
        [
            Tensor::from_parts(vec![m, d], gw1),
            Tensor::from_parts(vec![m], gh),
            Tensor::from_parts(vec![d, m], gw2),
            Tensor::from_parts(vec![d], seed.to_vec()),
        ]
    }
}

/// Which head(s) produce a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Predictor {
    /// `alpha * S_a + (1 - alpha) * S_t`.
    Blend {
        alpha: f64,
    },
    Weak,
}

/// A model bound to one predictor, with the transferred head computed once.
pub struct Scorer<'a> {
    model: &'a Model,
    predictor: Predictor,
    transferred: Option<HeadParams>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, predictor: Predictor) -> Result<Self> {
        let transferred = match predictor {
            Predictor::Blend { .. } => Some(model.transferred_head()?),
            Predictor::Weak => None,
        };
        Ok(Scorer {
            model,
            predictor,
            transferred,
        })
    }

    /// Probability map for a `[C, H, W]` patch.
    pub fn score(&self, patch: &Tensor) -> Result<Tensor> {
        self.model
            .predict_with(patch, self.predictor, self.transferred.as_ref())
    }
}

/// Backbone, weak/salient heads and transfer MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub weak: HeadParams,
    pub salient: HeadParams,
    pub transfer: TransferMlp,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::child(seed, &[0x4d4f44454c]);
        let backbone = BackboneParams::init(&config, &mut rng);
        let c = config.head_channels();
        let weak = HeadParams::init(c, &mut rng);
        let salient = HeadParams::init(c, &mut rng);
        let transfer = TransferMlp::init(config.head_len(), config.mlp_hidden(), config.slope, &mut rng);
        Model {
            config,
            backbone,
            weak,
            salient,
            transfer,
        }
    }

    pub fn transferred_head(&self) -> Result<HeadParams> {
        weight_transfer(&self.weak, &self.transfer)
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.layers.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        for (name, head) in [("weak", &self.weak), ("salient", &self.salient)] {
            for (layer, t) in ["conv1", "conv2", "conv3"]
                .iter()
                .flat_map(|l| [(l, "weight"), (l, "bias")])
                .zip(head.tensors())
            {
                out.push((format!("{name}.{}.{}", layer.0, layer.1), t));
            }
        }
        out.push(("transfer.w1".into(), &self.transfer.w1));
        out.push(("transfer.b1".into(), &self.transfer.b1));
        out.push(("transfer.w2".into(), &self.transfer.w2));
        out.push(("transfer.b2".into(), &self.transfer.b2));
        out
    }

    /// Mutable view in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.backbone.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend(self.weak.tensors_mut());
        out.extend(self.salient.tensors_mut());
        let t = &mut self.transfer;
        out.extend([&mut t.w1, &mut t.b1, &mut t.w2, &mut t.b2]);
        out
    }

    /// Backbone features of a `[C, H, W]` patch.
    pub fn features(&self, patch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(patch.clone());
        let layers: Vec<ConvVars> = self
            .backbone
            .layers
            .iter()
            .map(|l| ConvVars {
                weight: g.constant(l.weight.clone()),
                bias: g.constant(l.bias.clone()),
                stride: l.stride,
                pad: l.pad(),
            })
            .collect();
        let f = backbone_forward(&mut g, x, &layers, self.config.slope)?;
        Ok(g.value(f).clone())
    }

    /// Probability map for a `[C, H, W]` patch.
    pub fn predict(&self, patch: &Tensor, predictor: Predictor) -> Result<Tensor> {
        Scorer::new(self, predictor)?.score(patch)
    }

    /// [`predict`](Self::predict) with the transferred head supplied by the
    /// caller, so it can be computed once for many patches.
    pub fn predict_with(
        &self,
        patch: &Tensor,
        predictor: Predictor,
        transferred: Option<&HeadParams>,
    ) -> Result<Tensor> {
        let (h, w) = match patch.shape() {
            [_, h, w] => (*h, *w),
            s => return Err(Error::shape("predict", format!("patch must be [C,H,W], got {s:?}"))),
        };
        let f = self.features(patch)?;
        match predictor {
            Predictor::Weak => head_forward(&f, &self.weak, h, w),
            Predictor::Blend { alpha } => {
                let t = transferred.ok_or_else(|| Error::invalid("blend prediction needs the transferred head"))?;
                let sa = head_forward(&f, &self.salient, h, w)?;
                let st = head_forward(&f, t, h, w)?;
                Ok(Tensor::from_parts(
                    vec![h, w],
                    sa.data()
                        .iter()
                        .zip(st.data())
                        .map(|(a, t)| alpha * a + (1.0 - alpha) * t)
                        .collect(),
                ))
            }
        }
    }

    pub fn save<W: Write>(&self, w: W) -> std::io::Result<()> {
        let entries: Vec<(String, Tensor)> = self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        write_container(w, &entries)
    }

    /// Reads a checkpoint, recovering the architecture from tensor shapes.
    pub fn load<R: Read>(r: R) -> Result<Model> {
        let entries = read_container(r)?;
        let get = |name: &str| -> Result<Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::format("checkpoint", format!("missing entry {name}")))
        };
        let mut widths = [0usize; 4];
        let mut layers = Vec::new();
        let mut in_channels = 0;
        for (i, stride) in BACKBONE_STRIDES.iter().enumerate() {
            let weight = get(&format!("backbone.{i}.weight"))?;
            widths[i] = weight.shape()[0];
            if i == 0 {
                in_channels = weight.shape()[1];
            }
            layers.push(ConvParams {
                weight,
                bias: get(&format!("backbone.{i}.bias"))?,
                stride: *stride,
            });
        }
        let config = ModelConfig {
            in_channels,
            widths,
            slope: LEAKY_SLOPE,
        };
        let head = |name: &str| -> Result<HeadParams> {
            let conv = |l: &str| -> Result<ConvParams> {
                Ok(ConvParams {
                    weight: get(&format!("{name}.{l}.weight"))?,
                    bias: get(&format!("{name}.{l}.bias"))?,
                    stride: 1,
                })
            };
            Ok(HeadParams {
                conv1: conv("conv1")?,
                conv2: conv("conv2")?,
                conv3: conv("conv3")?,
            })
        };
        let model = Model {
            backbone: BackboneParams { layers },
            weak: head("weak")?,
            salient: head("salient")?,
            transfer: TransferMlp {
                w1: get("transfer.w1")?,
                b1: get("transfer.b1")?,
                w2: get("transfer.w2")?,
                b2: get("transfer.b2")?,
                slope: LEAKY_SLOPE,
            },
            config,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = Model {
            config: self.config.clone(),
            backbone: BackboneParams::init(&self.config, &mut Rng::seed(0)),
            weak: HeadParams::zeros(self.config.head_channels()),
            salient: HeadParams::zeros(self.config.head_channels()),
            transfer: TransferMlp::zeros(self.config.head_len(), self.config.mlp_hidden(), self.config.slope),
        };
        for ((name, a), (_, b)) in self.named_params().iter().zip(reference.named_params()) {
            if a.shape() != b.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name} has shape {:?}, expected {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck;

    #[test]
    fn zero_head_gives_half() {
        let f = Tensor::full(&[4, 3, 3], 0.7);
        let out = head_forward(&f, &HeadParams::zeros(4), 12, 12).unwrap();
        assert_eq!(out.shape(), &[12, 12]);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_bias_gives_one() {
        let mut h = HeadParams::zeros(4);
        h.conv3.bias = Tensor::scalar(40.0);
        let f = Tensor::full(&[4, 3, 3], -0.3);
        let out = head_forward(&f, &h, 6, 6).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn random_head_output_shape() {
        let mut rng = Rng::seed(3);
        let h = HeadParams::init(16, &mut rng);
        let f = Tensor::from_parts(vec![16, 72, 72], (0..16 * 72 * 72).map(|_| rng.normal()).collect());
        let out = head_forward(&f, &h, 288, 288).unwrap();
        assert_eq!(out.shape(), &[288, 288]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(head_forward(&Tensor::zeros(&[8, 4, 4]), &h, 8, 8).is_err());
    }

    #[test]
    fn dims_follow_config() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.head_len(), 2 * (16 * 16 * 9 + 16) + 17);
        assert_eq!(cfg.mlp_hidden(), cfg.head_len().div_ceil(4));
        let small = ModelConfig {
            widths: [2, 2, 2, 2],
            ..ModelConfig::default()
        };
        assert_eq!(small.mlp_hidden(), 64);
        let m = Model::init(cfg.clone(), 1);
        assert_eq!(m.weak.flatten().len(), cfg.head_len());
        assert_eq!(m.transfer.hidden(), cfg.mlp_hidden());
        let f = m.features(&Tensor::zeros(&[3, 64, 64])).unwrap();
        assert_eq!(f.shape(), &[16, 16, 16]);
    }

    #[test]
    fn zero_mlp_transfers_to_zero_head() {
        let mut rng = Rng::seed(5);
        let weak = HeadParams::init(3, &mut rng);
        let cfg = ModelConfig {
            widths: [3, 3, 3, 3],
            ..Default::default()
        };
        let mlp = TransferMlp::zeros(cfg.head_len(), cfg.mlp_hidden(), LEAKY_SLOPE);
        let t = weight_transfer(&weak, &mlp).unwrap();
        assert_eq!(t, HeadParams::zeros(3));
        let out = head_forward(&Tensor::full(&[3, 2, 2], 1.0), &t, 4, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn two_dim_transfer_by_hand() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mlp = TransferMlp {
            w1: eye.clone(),
            b1: Tensor::zeros(&[2]),
            w2: eye,
            b2: Tensor::full(&[2], 0.5),
            slope: 0.01,
        };
        let out = transfer_flat(&[1.0, -1.0], &mlp).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-15);
        assert!((out[1] - 0.49).abs() < 1e-15);
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = Rng::seed(9);
        let h = HeadParams::init(5, &mut rng);
        assert_eq!(HeadParams::unflatten(5, &h.flatten()).unwrap(), h);
        assert!(HeadParams::unflatten(5, &h.flatten()[1..]).is_err());
    }

    #[test]
    fn transfer_blocks_gradient_into_weak_head() {
        let cfg = ModelConfig {
            widths: [2, 2, 2, 2],
            ..Default::default()
        };
        let mut rng = Rng::seed(11);
        let weak = HeadParams::init(2, &mut rng);
        let mut mlp = TransferMlp::init(cfg.head_len(), cfg.mlp_hidden(), LEAKY_SLOPE, &mut rng);
        mlp.w2 = Tensor::from_parts(
            mlp.w2.shape().to_vec(),
            (0..mlp.w2.len()).map(|_| 0.05 * rng.normal()).collect(),
        );
        let feats = Tensor::from_parts(vec![2, 3, 3], (0..18).map(|_| rng.normal()).collect());

        let mut g = Graph::new();
        let f = g.constant(feats);
        let wv = weak.register(&mut g);
        let mv = mlp.register(&mut g);
        let tv = weight_transfer_vars(&mut g, &wv, &mv, LEAKY_SLOPE).unwrap();
        let s = head_forward_vars(&mut g, f, &tv, LEAKY_SLOPE, 6, 6).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        for v in wv.vars() {
            assert!(grads.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        }
        assert!(grads.get(mv.w2).unwrap().data().iter().any(|&x| x != 0.0));
        assert!(grads.get(mv.w1).unwrap().data().iter().any(|&x| x != 0.0));

        // The graph route and the value route agree.
        let direct = weight_transfer(&weak, &mlp).unwrap();
        let via_graph: Vec<f64> = tv.vars().iter().flat_map(|&v| g.value(v).data().to_vec()).collect();
        assert_eq!(direct.flatten(), via_graph);
    }

    #[test]
    fn head_gradcheck() {
        let mut rng = Rng::seed(21);
        let head = HeadParams::init(2, &mut rng);
        let feats = Tensor::from_parts(vec![2, 3, 4], (0..24).map(|_| rng.normal()).collect());
        let err = gradcheck(
            |g, f| {
                let hv = head.register(g);
                let s = head_forward_vars(g, f, &hv, LEAKY_SLOPE, 7, 9)?;
                Ok(g.sum(s))
            },
            &feats,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            widths: [2, 3, 3, 2],
            ..Default::default()
        };
        let m = Model::init(cfg, 4);
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        assert_eq!(Model::load(buf.as_slice()).unwrap(), m);
    }
}
