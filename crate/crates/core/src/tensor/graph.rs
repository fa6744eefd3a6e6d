use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Tanh,
    Relu,
    ScaleByConstant(f64),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Relu(Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of recorded tensor operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. A node requires a gradient iff it is a leaf created
/// with `requires_grad` or any of its inputs requires one; backward work is
/// only done along those nodes.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(op: &'static str, t: &[usize]) -> Result<[usize; 4]> {
    match *t {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            op,
            detail: format!("expected a 4-d NCHW tensor, got {t:?}"),
        }),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in backward iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(true);
        self.push(tensor, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, data, op, &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, data, op, &[a])
    }

    /// Dispatches one of the elementwise primitives. Binary kinds need `b`.
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| Error::InvalidShape {
                op: "elementwise",
                detail: format!("{kind:?} needs two operands"),
            })
        };
        match kind {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Tanh => Ok(self.tanh(a)),
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::ScaleByConstant(c) => Ok(self.scale(a, T::from_f64(c))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, T::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Clamps into `[lo, hi]`. The gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.map(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.derived(vec![1], vec![T::from_f64(total)], Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.derived(shape.to_vec(), t.into_data(), Op::Reshape(a), &[a]))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c_in, h, w] = shape4("conv2d", self.shape(input))?;
        let [c_out, wc_in, k, k2] = shape4("conv2d", self.shape(weight))?;
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input channels)",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(weight).to_vec(),
            });
        }
        if k != k2 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel must be square, got {k}x{k2}"),
            });
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (bias)",
                lhs: vec![c_out],
                rhs: self.shape(bias).to_vec(),
            });
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("stride {stride}, padding {padding}, kernel {k} on {h}x{w} input"),
            });
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        Ok(self.derived(
            vec![n, c_out, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    /// `k x k` max pooling with stride `k`.
    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = shape4("maxpool2d", self.shape(input))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                detail: format!("{h}x{w} is not divisible by stride {k}"),
            });
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(input).data(), n * c, h, w, k, k);
        Ok(self.derived(vec![n, c, h / k, w / k], out, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = shape4("upsample_bilinear", self.shape(input))?;
        if factor < 2 {
            return Err(Error::InvalidShape {
                op: "upsample_bilinear",
                detail: format!("factor must be at least 2, got {factor}"),
            });
        }
        let out = kernels::upsample_forward(self.value(input).data(), n * c, h, w, factor);
        Ok(self.derived(
            vec![n, c, h * factor, w * factor],
            out,
            Op::Upsample { input, factor },
            &[input],
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = shape4("concat_channels", self.shape(a))?;
        let [nb, cb, hb, wb] = shape4("concat_channels", self.shape(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(self.derived(vec![n, ca + cb, h, w], out, Op::Concat(a, b), &[a, b]))
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = shape4("slice_channels", self.shape(input))?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape {
                op: "slice_channels",
                detail: format!("channels {start}..{} of {c}", start + len),
            });
        }
        let plane = h * w;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            let base = (i * c + start) * plane;
            out.extend_from_slice(&src[base..base + len * plane]);
        }
        Ok(self.derived(vec![n, len, h, w], out, Op::SliceChannels { input, start }, &[input]))
    }

    /// Weighted pixelwise cross-entropy, summed over every pixel of every
    /// image: `sum_i sum_k weight_ik * -log softmax(logits)_{i, label_ik, k}`.
    pub fn cross_entropy_pixelwise(&mut self, logits: Var, labels: &[LabelMap], weights: &[T]) -> Result<Var> {
        let [n, c, h, w] = shape4("cross_entropy_pixelwise", self.shape(logits))?;
        if labels.len() != n {
            return Err(Error::InvalidShape {
                op: "cross_entropy_pixelwise",
                detail: format!("{} label maps for a batch of {n}", labels.len()),
            });
        }
        let m = h * w;
        let mut flat = Vec::with_capacity(n * m);
        for lm in labels {
            if (lm.height(), lm.width()) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy_pixelwise (labels)",
                    lhs: vec![h, w],
                    rhs: vec![lm.height(), lm.width()],
                });
            }
            flat.extend_from_slice(lm.data());
        }
        if let Some(pixel) = flat.iter().position(|&l| l as usize >= c) {
            return Err(Error::LabelOutOfRange {
                pixel,
                label: flat[pixel] as u32,
                num_classes: c,
            });
        }
        if weights.len() != n * m {
            return Err(Error::InvalidShape {
                op: "cross_entropy_pixelwise",
                detail: format!("{} weights for {} pixels", weights.len(), n * m),
            });
        }
        if weights.iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::config("cross-entropy weights must be non-negative"));
        }
        let loss = kernels::cross_entropy_forward(self.value(logits).data(), &flat, weights, n, c, m);
        Ok(self.derived(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: flat,
                weights: weights.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every reached node that
    /// requires a gradient holds d(loss)/d(node), readable via [`Graph::grad`].
    /// A graph supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Vec<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(&u, &y)| u * y).collect());
                }
                if self.wants(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(&u, &x)| u * x).collect());
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(&u, &t)| u * (T::one() - t * t)).collect());
            }
            Op::Relu(a) => {
                let x = val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                        .collect(),
                );
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&u| u * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&u, &v)| if v >= *lo && v <= *hi { u } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.nodes[a.0].value.numel()]),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads_c = kernels::conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    geom,
                    (self.wants(*input), self.wants(*weight), self.wants(*bias)),
                );
                if let Some(d) = grads_c.input {
                    send(*input, d);
                }
                if let Some(d) = grads_c.weight {
                    send(*weight, d);
                }
                if let Some(d) = grads_c.bias {
                    send(*bias, d);
                }
            }
            Op::MaxPool { input, argmax } => {
                send(*input, kernels::maxpool_backward(g, argmax, val(*input).len()));
            }
            Op::Upsample { input, factor } => {
                let [n, c, h, w] = shape4("upsample", self.shape(*input)).expect("recorded as 4-d");
                send(*input, kernels::upsample_backward(g, n * c, h, w, *factor));
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = shape4("concat", self.shape(*a)).expect("recorded as 4-d");
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let (mut ga, mut gb) = (Vec::with_capacity(n * ca * plane), Vec::with_capacity(n * cb * plane));
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::SliceChannels { input, start } => {
                let [n, c, h, w] = shape4("slice", self.shape(*input)).expect("recorded as 4-d");
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut d = vec![T::zero(); n * c * plane];
                for i in 0..n {
                    let dst = (i * c + start) * plane;
                    let src = i * len * plane;
                    d[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                send(*input, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
            } => {
                let [_, c, h, w] = shape4("cross_entropy", self.shape(*logits)).expect("recorded as 4-d");
                send(
                    *logits,
                    kernels::cross_entropy_backward(val(*logits), labels, weights, g[0], c, h * w),
                );
            }
        }
    }
}
