//! Computation graph recorded during the forward pass and replayed in reverse.
//!
//! Every operation appends a node to the [`Tape`]; a [`Var`] is just the node's
//! index. Nodes are stored in creation order, which is a valid topological
//! order, so the backward pass is a single reverse sweep.
//!
//! Single-element results additionally carry an `f64` shadow of their value.
//! Reductions accumulate in `f64`, and scalar arithmetic on top of them stays
//! in `f64`, so loss values are not truncated to 24 bits before they are read.

use crate::conv::{self, ConvGeometry};
use crate::error::{AutodiffError, Result};
use crate::sample;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial axis of a rank-4 `[N,C,H,W]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along W (columns).
    X,
    /// Along H (rows).
    Y,
}

/// A differentiable operation implemented outside this crate.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; only the vector-Jacobian product lives here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. Entries may be
    /// `None` when an input needs no gradient.
    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Clamp(Var, f32, f32),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
        cols: Vec<f32>,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    GridSample {
        image: Var,
        flow: Var,
    },
    Diff(Var, Axis),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    exact: Option<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records operations and computes gradients of scalar results.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaf nodes, indexed like `nodes`.
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, exact: Option<f64>, requires_grad: bool, op: Op) -> Var {
        let exact = match exact {
            Some(e) => Some(e),
            None if value.numel() == 1 => Some(value.data()[0] as f64),
            None => None,
        };
        self.nodes.push(Node {
            value,
            exact,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, None, true, Op::Leaf)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The value of a single-element node, at `f64` precision when available.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].exact.ok_or_else(|| {
            AutodiffError::Contract(format!(
                "node {} has shape {:?}, not a scalar",
                v.0,
                self.nodes[v.0].value.shape()
            ))
        })
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::Shape(format!(
                "{what}: operand shapes differ: {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.map(|v| f(v as f64) as f32);
        let exact = node.exact.map(&f);
        let rg = node.requires_grad;
        self.push(value, exact, rg, op)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let data = na
            .value
            .data()
            .iter()
            .zip(nb.value.data())
            .map(|(&x, &y)| f(x as f64, y as f64) as f32)
            .collect();
        let value = Tensor::new(na.value.shape(), data)?;
        let exact = match (na.exact, nb.exact) {
            (Some(x), Some(y)) => Some(f(x, y)),
            _ => None,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, exact, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `x * c`
    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v * c as f64, Op::Scale(x, c))
    }

    /// `x + c`
    pub fn offset(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v + c as f64, Op::Offset(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { v * slope as f64 },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the bounds.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, |v| v.clamp(lo as f64, hi as f64), Op::Clamp(x, lo, hi))
    }

    /// Natural logarithm. Callers keep the argument positive.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let s = node.value.sum_f64();
        let rg = node.requires_grad;
        self.push(Tensor::scalar(s as f32), Some(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let m = node.value.sum_f64() / node.value.numel() as f64;
        let rg = node.requires_grad;
        self.push(Tensor::scalar(m as f32), Some(m), rg, Op::Mean(x))
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` kernel plus bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geometry = ConvGeometry::new(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        let (out, cols) = conv::forward(
            &geometry,
            self.value(input),
            self.value(kernel),
            self.value(bias),
        );
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            out,
            None,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
                cols,
            },
        ))
    }

    /// Nearest-neighbour upsampling by two along H and W.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    d[y * ow + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, None, rg, Op::Upsample2x(x)))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = self.value(*p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(AutodiffError::Shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    self.value(*p).shape(),
                    self.value(*first).shape()
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, None, rg, Op::Concat(parts.to_vec())))
    }

    /// Warps `image` by `flow` with bilinear interpolation and zero padding.
    pub fn grid_sample(&mut self, image: Var, flow: Var) -> Result<Var> {
        sample::check(self.value(image), self.value(flow))?;
        let value = sample::forward(self.value(image), self.value(flow));
        let rg = self.rg(&[image, flow]);
        Ok(self.push(value, None, rg, Op::GridSample { image, flow }))
    }

    /// Forward difference `x[i+1] - x[i]` along a spatial axis.
    pub fn diff(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = match axis {
            Axis::X => (h, w.checked_sub(1).filter(|&v| v > 0)),
            Axis::Y => (h.checked_sub(1).unwrap_or(0), Some(w)),
        };
        let ow = ow.ok_or_else(|| AutodiffError::Shape("diff: width must be >= 2".into()))?;
        if oh == 0 {
            return Err(AutodiffError::Shape("diff: height must be >= 2".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let (a, b) = match axis {
                        Axis::X => (s[y * w + xx + 1], s[y * w + xx]),
                        Axis::Y => (s[(y + 1) * w + xx], s[y * w + xx]),
                    };
                    out.push(a - b);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, None, rg, Op::Diff(x, axis)))
    }

    /// Records an externally computed operation.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        exact: Option<f64>,
        op: Box<dyn CustomOp>,
    ) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            exact,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Back-propagates from a single-element `loss`, adding into leaf gradients.
    ///
    /// Calling this twice without [`Tape::zero_grads`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.grads[idx].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => self.grads[idx] = Some(g),
                }
                continue;
            }
            for (input, grad) in self.input_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match pending[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&grad),
                    None => pending[input.0] = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |a: &Tensor, b: &Tensor, f: &dyn Fn(f32, f32) -> f32| {
            Tensor::new(
                a.shape(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
            .expect("same shape")
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, zip(g, val(*b), &|g, y| g * y)),
                (*b, zip(g, val(*a), &|g, x| g * x)),
            ],
            Op::Div(a, b) => {
                let ga = zip(g, val(*b), &|g, y| g / y);
                let gb = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(val(*a).data())
                        .zip(val(*b).data())
                        .map(|((&g, &x), &y)| -g * x / (y * y))
                        .collect(),
                )
                .expect("same shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Offset(x) => vec![(*x, g.clone())],
            Op::LeakyRelu(x, s) => {
                vec![(*x, zip(g, val(*x), &|g, x| if x > 0.0 { g } else { g * s }))]
            }
            Op::Sigmoid(x) => vec![(*x, zip(g, &node.value, &|g, y| g * y * (1.0 - y)))],
            Op::Clamp(x, lo, hi) => vec![(
                *x,
                zip(g, val(*x), &|g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
            )],
            Op::Ln(x) => vec![(*x, zip(g, val(*x), &|g, x| g / x))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), (g.data()[0] as f64 / n) as f32))]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
                cols,
            } => {
                let need_input = self.nodes[input.0].requires_grad;
                let (gi, gk, gb) = conv::backward(geometry, g, val(*kernel), cols, need_input);
                let mut out = vec![(*kernel, gk), (*bias, gb)];
                if let Some(gi) = gi {
                    out.push((*input, gi));
                }
                out
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = val(*x).dims4().expect("rank 4");
                let (oh, ow) = (2 * h, 2 * w);
                let mut gi = vec![0.0f32; n * c * h * w];
                for plane in 0..n * c {
                    let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
                vec![(*x, Tensor::new(&[n, c, h, w], gi).expect("shape"))]
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = g.dims4().expect("rank 4");
                let hw = h * w;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = val(*p).shape()[1];
                    let mut gp = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * total_c + offset) * hw;
                        gp.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    out.push((*p, Tensor::new(&[n, c, h, w], gp).expect("shape")));
                    offset += c;
                }
                out
            }
            Op::GridSample { image, flow } => {
                let (gi, gf) = sample::backward(
                    val(*image),
                    val(*flow),
                    g,
                    self.nodes[image.0].requires_grad,
                    self.nodes[flow.0].requires_grad,
                );
                let mut out = Vec::new();
                if let Some(gi) = gi {
                    out.push((*image, gi));
                }
                if let Some(gf) = gf {
                    out.push((*flow, gf));
                }
                out
            }
            Op::Diff(x, axis) => {
                let (n, c, h, w) = val(*x).dims4().expect("rank 4");
                let (_, _, oh, ow) = g.dims4().expect("rank 4");
                let mut gi = vec![0.0f32; n * c * h * w];
                for plane in 0..n * c {
                    let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = src[y * ow + xx];
                            let next = match axis {
                                Axis::X => y * w + xx + 1,
                                Axis::Y => (y + 1) * w + xx,
                            };
                            dst[next] += v;
                            dst[y * w + xx] -= v;
                        }
                    }
                }
                vec![(*x, Tensor::new(&[n, c, h, w], gi).expect("shape"))]
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let needs: Vec<bool> = inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect();
                let grads = op.backward(g, &values, &node.value, &needs);
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(v, g)| g.map(|g| (*v, g)))
                    .collect()
            }
        }
    }
}
