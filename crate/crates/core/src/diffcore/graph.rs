use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the input values, the recorded output, and the
/// gradient flowing into the output; it returns one optional gradient per
/// input, each shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Upsample {
        x: Var,
    },
    MatVec {
        w: Var,
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Upsample { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Slice { x, .. } => vec![*x],
            Op::MatVec { w, x, b } => vec![*w, *x, *b],
            Op::Add { a, b } => vec![*a, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Copy of `x` that blocks gradient flow back into `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Zero-padded 2-D cross-correlation of `[C,H,W]` with `[K,C,kh,kw]` plus bias `[K]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (is, ks, bs) = (
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
        );
        if is.len() != 3 {
            return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {is:?}")));
        }
        if ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [K,C,kh,kw], got {ks:?}"),
            ));
        }
        if ks[1] != is[0] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel in-channels {} != input channels {}", ks[1], is[0]),
            ));
        }
        if bs != [ks[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {:?} != out-channels {}", bs, ks[0]),
            ));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel height/width must be odd, got {}x{}", ks[2], ks[3]),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if is[1] + 2 * pad < ks[2] || is[2] + 2 * pad < ks[3] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "padded input {}x{} smaller than kernel {}x{}",
                    is[1], is[2], ks[2], ks[3]
                ),
            ));
        }
        let geom = ConvGeom {
            in_c: is[0],
            in_h: is[1],
            in_w: is[2],
            out_c: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_parts(vec![geom.out_c, geom.out_h(), geom.out_w()], out);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            value,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| kernels::leaky_relu(v, slope));
        self.push(Op::LeakyRelu { x, slope }, value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(Op::Sigmoid { x }, value)
    }

    /// Half-pixel bilinear upsampling of `[C,h,w]` (or `[h,w]`) to the requested size.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (c, h, w) = match shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            _ => {
                return Err(Error::shape(
                    "upsample_bilinear",
                    format!("expected [C,h,w], got {shape:?}"),
                ))
            }
        };
        if out_h < h || out_w < w {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("target {out_h}x{out_w} smaller than source {h}x{w}"),
            ));
        }
        let data = kernels::bilinear_forward(self.value(x).data(), c, h, w, out_h, out_w);
        let out_shape = if shape.len() == 3 {
            vec![c, out_h, out_w]
        } else {
            vec![out_h, out_w]
        };
        Ok(self.push(Op::Upsample { x }, Tensor::from_parts(out_shape, data)))
    }

    /// `w · x + b` for `w: [m,n]`, `x: [n]`, `b: [m]`.
    pub fn matvec(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (ws, xs, bs) = (self.value(w).shape(), self.value(x).shape(), self.value(b).shape());
        if ws.len() != 2 || xs != [ws[1]] || bs != [ws[0]] {
            return Err(Error::shape(
                "matvec",
                format!("weight {ws:?}, input {xs:?}, bias {bs:?} do not conform"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let (wd, xd, bd) = (self.value(w).data(), self.value(x).data(), self.value(b).data());
        let out: Vec<f64> = (0..m)
            .map(|i| bd[i] + wd[i * n..(i + 1) * n].iter().zip(xd).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok(self.push(Op::MatVec { w, x, b }, Tensor::from_parts(vec![m], out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    /// Contiguous flat range of `x` starting at `offset`, viewed as `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if offset + n > src.len() || n == 0 {
            return Err(Error::shape(
                "slice",
                format!("range {offset}..{} outside length {}", offset + n, src.len()),
            ));
        }
        let value = Tensor::from_parts(shape, src[offset..offset + n].to_vec());
        Ok(self.push(Op::Slice { x, offset }, value))
    }

    /// Records an externally computed value with its backward rule.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(Op::Custom { inputs, op }, value)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.value(out).shape()),
            ));
        }
        self.backward_with(out, &Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.data().to_vec());
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &g)?;
            // Leave the node's own gradient in place for callers that query it.
            grads[idx] = Some(g);
            for (v, contrib) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let val = |v: Var| self.value(v);
        let need = |v: Var| self.nodes[v.0].needs_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (gi, gk, gb) =
                    kernels::conv2d_backward(geom, val(*input).data(), val(*kernel).data(), g, need(*input));
                let mut out = vec![(*kernel, gk), (*bias, gb)];
                if let Some(gi) = gi {
                    out.push((*input, gi));
                }
                out
            }
            Op::LeakyRelu { x, slope } => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * kernels::leaky_relu_grad(xv, *slope))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid { x } => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Upsample { x } => {
                let s = val(*x).shape();
                let (c, h, w) = if s.len() == 3 {
                    (s[0], s[1], s[2])
                } else {
                    (1, s[0], s[1])
                };
                let os = node.value.shape();
                let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
                vec![(*x, kernels::bilinear_backward(g, c, h, w, oh, ow))]
            }
            Op::MatVec { w, x, b } => {
                let ws = val(*w).shape();
                let (m, n) = (ws[0], ws[1]);
                let xd = val(*x).data();
                let mut out = Vec::with_capacity(3);
                if need(*w) {
                    let mut gw = vec![0.0; m * n];
                    for (i, row) in gw.chunks_exact_mut(n).enumerate() {
                        let gi = g[i];
                        row.iter_mut().zip(xd).for_each(|(r, xv)| *r = gi * xv);
                    }
                    out.push((*w, gw));
                }
                if need(*x) {
                    let wd = val(*w).data();
                    let mut gx = vec![0.0; n];
                    for (i, row) in wd.chunks_exact(n).enumerate() {
                        let gi = g[i];
                        gx.iter_mut().zip(row).for_each(|(a, wv)| *a += gi * wv);
                    }
                    out.push((*x, gx));
                }
                out.push((*b, g.to_vec()));
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
            Op::Sum { x } => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Slice { x, offset } => {
                let mut gx = vec![0.0; val(*x).len()];
                gx[*offset..*offset + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::Custom { inputs, op } => {
                let in_vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let grad_out = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let gs = op.backward(&in_vals, &node.value, &grad_out);
                if gs.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom backward",
                        format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            gs.len(),
                            inputs.len()
                        ),
                    ));
                }
                let mut out = Vec::new();
                for (v, gt) in inputs.iter().zip(gs) {
                    if let Some(gt) = gt {
                        if gt.shape() != val(*v).shape() {
                            return Err(Error::shape(
                                "custom backward",
                                format!("{} gradient {:?} vs input {:?}", op.name(), gt.shape(), val(*v).shape()),
                            ));
                        }
                        out.push((*v, gt.into_data()));
                    }
                }
                out
            }
        })
    }
}
