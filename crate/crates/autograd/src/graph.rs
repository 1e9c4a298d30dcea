use std::rc::Rc;

use crate::kernels::{self, MatRef, Window};
use crate::{Error, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written adjoint, defined outside this crate.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product. Entry `i` of the result is the gradient for
    /// `inputs[i]`; it may be `None` when `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        out_channels: usize,
        cols: Option<Vec<f64>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        in_channels: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Separable {
        x: Var,
        rows: Rc<Tensor>,
        cols: Rc<Tensor>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use reverse-mode tape. Build a forward pass with the op methods,
/// then call [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v` into a new constant leaf; gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("{name}: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Picks flat elements of `a` into a rank-1 tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return shape_err(format!("gather index {bad} out of range {}", src.len()));
        }
        let out = Tensor::from_vec(indices.iter().map(|&i| src[i]).collect());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gather(a, indices.to_vec()), rg))
    }

    /// Flattens and concatenates into a rank-1 tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data = parts
            .iter()
            .flat_map(|p| self.value(*p).data().iter().copied())
            .collect();
        let rg = self.rg(parts);
        self.push(Tensor::from_vec(data), Op::Concat(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Cross-correlation of a `[C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [o, wc, kh, kw] = ws[..] else {
            return shape_err(format!("conv2d weight must be rank 4, got {ws:?}"));
        };
        if wc != c || kh != kw {
            return shape_err(format!(
                "conv2d weight {ws:?} incompatible with input channels {c}"
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return shape_err(format!("conv2d bias {:?} != [{o}]", self.value(b).shape()));
            }
        }
        let win = Window {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
        };
        if !win.valid() {
            return shape_err(format!("conv2d kernel {kh} does not fit input {h}x{wd}"));
        }
        let (oh, ow) = (win.out_height(), win.out_width());
        let cols = kernels::im2col(self.value(x).data(), &win);
        let mut out = vec![0.0; o * oh * ow];
        if let Some(b) = b {
            for (chunk, &bias) in out.chunks_mut(oh * ow).zip(self.value(b).data()) {
                chunk.fill(bias);
            }
        }
        kernels::gemm(
            MatRef::new(self.value(w).data(), o, win.col_rows()),
            MatRef::new(&cols, win.col_rows(), win.col_cols()),
            1.0,
            &mut out,
        );
        let keep_cols = self.requires_grad(w);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::new(&[o, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                win,
                out_channels: o,
                cols: keep_cols.then_some(cols),
            },
            rg,
        ))
    }

    /// Transposed convolution of `[C, H, W]` with `[C, O, k, k]` weights; output
    /// side is `(H - 1) * stride + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [wc, o, kh, kw] = ws[..] else {
            return shape_err(format!(
                "conv_transpose2d weight must be rank 4, got {ws:?}"
            ));
        };
        if wc != c || kh != kw || stride == 0 {
            return shape_err(format!(
                "conv_transpose2d weight {ws:?} incompatible with input {c}"
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return shape_err(format!(
                    "conv_transpose2d bias {:?} != [{o}]",
                    self.value(b).shape()
                ));
            }
        }
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        // The output plays the role of the im2col "input"; x lives on its window grid.
        let win = Window {
            channels: o,
            height: oh,
            width: ow,
            kernel: kh,
            stride,
            pad: 0,
        };
        debug_assert_eq!(win.col_cols(), h * wd);
        let mut cols = vec![0.0; win.col_rows() * h * wd];
        kernels::gemm(
            MatRef::new(self.value(w).data(), c, win.col_rows()).t(),
            MatRef::new(self.value(x).data(), c, h * wd),
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; o * oh * ow];
        if let Some(b) = b {
            for (chunk, &bias) in out.chunks_mut(oh * ow).zip(self.value(b).data()) {
                chunk.fill(bias);
            }
        }
        kernels::col2im_add(&cols, &win, &mut out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::new(&[o, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                win,
                in_channels: c,
            },
            rg,
        ))
    }

    /// Max pooling without padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let win = Window {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            pad: 0,
        };
        if !win.valid() {
            return shape_err(format!("max_pool2d kernel {kernel} does not fit {h}x{w}"));
        }
        let (oh, ow) = (win.out_height(), win.out_width());
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        for idx in row..row + kernel {
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Per-channel `rows · X_c · colsᵀ` with fixed matrices `rows: [OH, H]`
    /// and `cols: [OW, W]`. Bilinear resizing is an instance of this.
    pub fn separable(&mut self, x: Var, rows: Rc<Tensor>, cols: Rc<Tensor>) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (&[oh, rh], &[ow, cw]) = (rows.shape(), cols.shape()) else {
            return shape_err("separable matrices must be rank 2".into());
        };
        if rh != h || cw != w {
            return shape_err(format!(
                "separable maps [{oh},{rh}] x [{ow},{cw}] do not fit input {h}x{w}"
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut tmp = vec![0.0; oh * w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            kernels::gemm(
                MatRef::new(rows.data(), oh, h),
                MatRef::new(plane, h, w),
                0.0,
                &mut tmp,
            );
            kernels::gemm(
                MatRef::new(&tmp, oh, w),
                MatRef::new(cols.data(), ow, w).t(),
                0.0,
                &mut out[ch * oh * ow..(ch + 1) * oh * ow],
            );
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::Separable { x, rows, cols }, rg))
    }

    pub fn custom(&mut self, inputs: &[Var], mut op: Box<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&values)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(grad);
                continue;
            }
            self.propagate(node, &grad, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, grad.clone())?;
                acc(*b, grad.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, grad.clone())?;
                acc(*b, grad.map(|g| -g))?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = grad
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    acc(*a, Tensor::new(va.shape(), d)?)?;
                }
                if self.needs(*b) {
                    let d = grad
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    acc(*b, Tensor::new(vb.shape(), d)?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, grad.map(|g| g * s))?,
            Op::Offset(a) => acc(*a, grad.clone())?,
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, Tensor::new(x.shape(), d)?)?;
            }
            Op::Exp(a) => {
                let d = grad
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                acc(*a, Tensor::new(node.value.shape(), d)?)?;
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let d = grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*a, Tensor::new(x.shape(), d)?)?;
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), grad.item()))?,
            Op::Gather(a, indices) => {
                let mut d = Tensor::zeros(self.value(*a).shape());
                let dd = d.data_mut();
                for (g, &i) in grad.data().iter().zip(indices) {
                    dd[i] += g;
                }
                acc(*a, d)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let n = self.value(*p).numel();
                    acc(
                        *p,
                        Tensor::new(&shape, grad.data()[offset..offset + n].to_vec())?,
                    )?;
                    offset += n;
                }
            }
            Op::Reshape(a) => acc(*a, grad.clone().reshape(self.value(*a).shape())?)?,
            Op::Conv2d {
                x,
                w,
                b,
                win,
                out_channels,
                cols,
            } => {
                let n = win.col_cols();
                let g = grad.data();
                if let Some(b) = b {
                    if self.needs(*b) {
                        let d = g.chunks(n).map(|c| c.iter().sum()).collect();
                        acc(*b, Tensor::from_vec(d))?;
                    }
                }
                if self.needs(*w) {
                    let cols = cols
                        .as_ref()
                        .expect("conv2d columns kept for weight gradient");
                    let mut dw = vec![0.0; out_channels * win.col_rows()];
                    kernels::gemm(
                        MatRef::new(g, *out_channels, n),
                        MatRef::new(cols, win.col_rows(), n).t(),
                        0.0,
                        &mut dw,
                    );
                    acc(*w, Tensor::new(self.value(*w).shape(), dw)?)?;
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; win.col_rows() * n];
                    kernels::gemm(
                        MatRef::new(self.value(*w).data(), *out_channels, win.col_rows()).t(),
                        MatRef::new(g, *out_channels, n),
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; win.channels * win.height * win.width];
                    kernels::col2im_add(&dcols, win, &mut dx);
                    acc(*x, Tensor::new(self.value(*x).shape(), dx)?)?;
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                win,
                in_channels,
            } => {
                let n = win.col_cols();
                if let Some(b) = b {
                    if self.needs(*b) {
                        let plane = win.height * win.width;
                        let d = grad.data().chunks(plane).map(|c| c.iter().sum()).collect();
                        acc(*b, Tensor::from_vec(d))?;
                    }
                }
                if self.needs(*w) || self.needs(*x) {
                    let dcols = kernels::im2col(grad.data(), win);
                    if self.needs(*w) {
                        let mut dw = vec![0.0; in_channels * win.col_rows()];
                        kernels::gemm(
                            MatRef::new(self.value(*x).data(), *in_channels, n),
                            MatRef::new(&dcols, win.col_rows(), n).t(),
                            0.0,
                            &mut dw,
                        );
                        acc(*w, Tensor::new(self.value(*w).shape(), dw)?)?;
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; in_channels * n];
                        kernels::gemm(
                            MatRef::new(self.value(*w).data(), *in_channels, win.col_rows()),
                            MatRef::new(&dcols, win.col_rows(), n),
                            0.0,
                            &mut dx,
                        );
                        acc(*x, Tensor::new(self.value(*x).shape(), dx)?)?;
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let dd = d.data_mut();
                for (g, &i) in grad.data().iter().zip(argmax) {
                    dd[i] += g;
                }
                acc(*x, d)?;
            }
            Op::Separable { x, rows, cols } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let (oh, ow) = (rows.shape()[0], cols.shape()[0]);
                let mut dx = vec![0.0; c * h * w];
                let mut tmp = vec![0.0; h * ow];
                for ch in 0..c {
                    let g = &grad.data()[ch * oh * ow..(ch + 1) * oh * ow];
                    kernels::gemm(
                        MatRef::new(rows.data(), oh, h).t(),
                        MatRef::new(g, oh, ow),
                        0.0,
                        &mut tmp,
                    );
                    kernels::gemm(
                        MatRef::new(&tmp, h, ow),
                        MatRef::new(cols.data(), ow, w),
                        0.0,
                        &mut dx[ch * h * w..(ch + 1) * h * w],
                    );
                }
                acc(*x, Tensor::new(&[c, h, w], dx)?)?;
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let out = op.backward(&values, &node.value, grad, &needs)?;
                if out.len() != inputs.len() {
                    return Err(Error::Op(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        out.len(),
                        inputs.len()
                    )));
                }
                for ((v, g), need) in inputs.iter().zip(out).zip(needs) {
                    if let (Some(g), true) = (g, need) {
                        if g.shape() != self.value(*v).shape() {
                            return shape_err(format!(
                                "{} gradient shape {:?} != input {:?}",
                                op.name(),
                                g.shape(),
                                self.value(*v).shape()
                            ));
                        }
                        acc(*v, g)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients of every differentiable leaf reached by a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
