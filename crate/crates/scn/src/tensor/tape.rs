use crate::error::{Result, ScnError};
use crate::tensor::Tensor;

/// Norms below this are treated as zero in `squash` and `norm_last`,
/// producing a zero output/gradient instead of dividing by zero.
pub const NORM_EPS: f64 = 1e-9;

/// Handle to a tensor registered on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    /// True when this node is an input with `requires_grad` or depends on one.
    needs_grad: bool,
}

enum Op {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    /// out = mul * x + add, elementwise.
    Affine { x: usize, out: usize, mul: f64, add: f64 },
    Relu { x: usize, out: usize },
    Sum { x: usize, out: usize },
    Softmax { x: usize, out: usize, axis: usize },
    Squash { x: usize, out: usize },
    NormLast { x: usize, out: usize },
    Conv2d {
        input: usize,
        kernels: usize,
        bias: usize,
        out: usize,
        stride: usize,
    },
    /// u[N,I,D] x W[I,J,O,D] -> uhat[N,I,J,O]
    CapsPredict { u: usize, w: usize, out: usize },
    /// c[N,I,J], uhat[N,I,J,O] -> s[N,J,O]
    CapsWeightedSum { c: usize, uhat: usize, out: usize },
    /// uhat[N,I,J,O] . v[N,J,O] -> [N,I,J]
    CapsAgreement { uhat: usize, v: usize, out: usize },
    /// [N, caps*dim, H, W] -> [N, caps*H*W, dim]
    CapsReshape {
        x: usize,
        out: usize,
        caps: usize,
        dim: usize,
    },
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. `None` when `v` was not registered
    /// with `requires_grad`; all-zero when it was registered but is not
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_raw(self.shapes[v.0].clone(), g.clone()))
    }
}

/// Records operations eagerly: each method computes its output immediately
/// and pushes a replayable record. Owned by a single logical thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// a gradient is produced for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Convenience: register a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, needs: bool) -> usize {
        self.nodes.push(Node {
            value,
            needs_grad: needs,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(ScnError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_raw(self.shape(a).to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(t, needs);
        self.ops.push(Op::Add { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_raw(self.shape(a).to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(t, needs);
        self.ops.push(Op::Sub { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_raw(self.shape(a).to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(t, needs);
        self.ops.push(Op::Mul { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|v| mul * v + add)
            .collect();
        let t = Tensor::from_raw(self.shape(x).to_vec(), data);
        let needs = self.needs(x);
        let out = self.push(t, needs);
        self.ops.push(Op::Affine { x: x.0, out, mul, add });
        Var(out)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        let t = Tensor::from_raw(self.shape(x).to_vec(), data);
        let needs = self.needs(x);
        let out = self.push(t, needs);
        self.ops.push(Op::Relu { x: x.0, out });
        Var(out)
    }

    /// Sum of all elements, producing a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        let t = Tensor::from_raw(vec![], vec![total]);
        let needs = self.needs(x);
        let out = self.push(t, needs);
        self.ops.push(Op::Sum { x: x.0, out });
        Var(out)
    }

    /// Numerically stable softmax along `axis`. Outputs are positive and
    /// sum to 1 along the axis.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(ScnError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let data = softmax_forward(self.nodes[x.0].value.data(), &shape, axis);
        let t = Tensor::from_raw(shape, data);
        let needs = self.needs(x);
        let out = self.push(t, needs);
        self.ops.push(Op::Softmax { x: x.0, out, axis });
        Ok(Var(out))
    }

    /// Capsule nonlinearity over the last axis:
    /// `v = (|s|^2 / (1 + |s|^2)) * s / |s|`. Norms below [`NORM_EPS`]
    /// yield a zero vector with zero gradient.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(ScnError::ShapeMismatch {
                op: "squash",
                detail: "rank-0 tensor has no capsule axis".into(),
            });
        }
        let dim = *shape.last().unwrap();
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; src.len()];
        for (chunk_out, chunk_in) in data.chunks_mut(dim).zip(src.chunks(dim)) {
            let n2: f64 = chunk_in.iter().map(|v| v * v).sum();
            let n = n2.sqrt();
            if n >= NORM_EPS {
                let k = n / (1.0 + n2);
                for (o, i) in chunk_out.iter_mut().zip(chunk_in) {
                    *o = k * i;
                }
            }
        }
        let t = Tensor::from_raw(shape, data);
        let needs = self.needs(x);
        let out = self.push(t, needs);
        self.ops.push(Op::Squash { x: x.0, out });
        Ok(Var(out))
    }

    /// L2 norm over the last axis: `[.., D] -> [..]`.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(ScnError::ShapeMismatch {
                op: "norm_last",
                detail: "rank-0 tensor has no axis to reduce".into(),
            });
        }
        let dim = *shape.last().unwrap();
        let src = self.nodes[x.0].value.data();
        let data: Vec<f64> = src
            .chunks(dim)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        let t = Tensor::from_raw(out_shape, data);
        let needs = self.needs(x);
        let out = self.push(t, needs);
        self.ops.push(Op::NormLast { x: x.0, out });
        Ok(Var(out))
    }

    /// Valid (no-padding) 2-D cross-correlation.
    ///
    /// input `[N,C,H,W]`, kernels `[K,C,kh,kw]`, bias `[K]`, output
    /// `[N,K,H',W']` with `H' = (H - kh)/stride + 1`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernels).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(ScnError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "input and kernels must be rank 4, got {:?} and {:?}",
                    ishape, kshape
                ),
            });
        }
        if stride == 0 {
            return Err(ScnError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (k, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c {
            return Err(ScnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {} channels, kernels expect {}", c, kc),
            });
        }
        if bshape != [k] {
            return Err(ScnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?}, expected [{}]", bshape, k),
            });
        }
        if kh > h || kw > w {
            return Err(ScnError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {}x{} larger than input {}x{}",
                    kh, kw, h, w
                ),
            });
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let data = conv2d_forward(
            self.nodes[input.0].value.data(),
            self.nodes[kernels.0].value.data(),
            self.nodes[bias.0].value.data(),
            (n, c, h, w),
            (k, kh, kw),
            stride,
            (oh, ow),
        );
        let t = Tensor::from_raw(vec![n, k, oh, ow], data);
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        let out = self.push(t, needs);
        self.ops.push(Op::Conv2d {
            input: input.0,
            kernels: kernels.0,
            bias: bias.0,
            out,
            stride,
        });
        Ok(Var(out))
    }

    /// Per-pair capsule prediction: `uhat[n,i,j,:] = W[i,j,:,:] u[n,i,:]`.
    pub fn caps_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let ws = self.shape(w).to_vec();
        if us.len() != 3 || ws.len() != 4 || us[1] != ws[0] || us[2] != ws[3] {
            return Err(ScnError::ShapeMismatch {
                op: "caps_predict",
                detail: format!("u {:?} incompatible with W {:?}", us, ws),
            });
        }
        let (n, ni, d) = (us[0], us[1], us[2]);
        let (nj, o) = (ws[1], ws[2]);
        let ud = self.nodes[u.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let mut data = vec![0.0; n * ni * nj * o];
        for bn in 0..n {
            for i in 0..ni {
                let uvec = &ud[(bn * ni + i) * d..(bn * ni + i + 1) * d];
                for j in 0..nj {
                    for oo in 0..o {
                        let wrow = &wd[((i * nj + j) * o + oo) * d..((i * nj + j) * o + oo + 1) * d];
                        let mut acc = 0.0;
                        for dd in 0..d {
                            acc += wrow[dd] * uvec[dd];
                        }
                        data[((bn * ni + i) * nj + j) * o + oo] = acc;
                    }
                }
            }
        }
        let t = Tensor::from_raw(vec![n, ni, nj, o], data);
        let needs = self.needs(u) || self.needs(w);
        let out = self.push(t, needs);
        self.ops.push(Op::CapsPredict { u: u.0, w: w.0, out });
        Ok(Var(out))
    }

    /// `s[n,j,:] = sum_i c[n,i,j] * uhat[n,i,j,:]`.
    pub fn caps_weighted_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let cs = self.shape(c).to_vec();
        let hs = self.shape(uhat).to_vec();
        if cs.len() != 3 || hs.len() != 4 || cs[..3] != hs[..3] {
            return Err(ScnError::ShapeMismatch {
                op: "caps_weighted_sum",
                detail: format!("c {:?} incompatible with uhat {:?}", cs, hs),
            });
        }
        let (n, ni, nj, o) = (hs[0], hs[1], hs[2], hs[3]);
        let cd = self.nodes[c.0].value.data();
        let hd = self.nodes[uhat.0].value.data();
        let mut data = vec![0.0; n * nj * o];
        for bn in 0..n {
            for i in 0..ni {
                for j in 0..nj {
                    let coeff = cd[(bn * ni + i) * nj + j];
                    let src = &hd[((bn * ni + i) * nj + j) * o..((bn * ni + i) * nj + j + 1) * o];
                    let dst = &mut data[(bn * nj + j) * o..(bn * nj + j + 1) * o];
                    for (dv, sv) in dst.iter_mut().zip(src) {
                        *dv += coeff * sv;
                    }
                }
            }
        }
        let t = Tensor::from_raw(vec![n, nj, o], data);
        let needs = self.needs(c) || self.needs(uhat);
        let out = self.push(t, needs);
        self.ops.push(Op::CapsWeightedSum {
            c: c.0,
            uhat: uhat.0,
            out,
        });
        Ok(Var(out))
    }

    /// Agreement logits: `a[n,i,j] = uhat[n,i,j,:] . v[n,j,:]`.
    pub fn caps_agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let hs = self.shape(uhat).to_vec();
        let vs = self.shape(v).to_vec();
        if hs.len() != 4 || vs.len() != 3 || vs[0] != hs[0] || vs[1] != hs[2] || vs[2] != hs[3] {
            return Err(ScnError::ShapeMismatch {
                op: "caps_agreement",
                detail: format!("uhat {:?} incompatible with v {:?}", hs, vs),
            });
        }
        let (n, ni, nj, o) = (hs[0], hs[1], hs[2], hs[3]);
        let hd = self.nodes[uhat.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let mut data = vec![0.0; n * ni * nj];
        for bn in 0..n {
            for i in 0..ni {
                for j in 0..nj {
                    let hrow = &hd[((bn * ni + i) * nj + j) * o..((bn * ni + i) * nj + j + 1) * o];
                    let vrow = &vd[(bn * nj + j) * o..(bn * nj + j + 1) * o];
                    let mut acc = 0.0;
                    for oo in 0..o {
                        acc += hrow[oo] * vrow[oo];
                    }
                    data[(bn * ni + i) * nj + j] = acc;
                }
            }
        }
        let t = Tensor::from_raw(vec![n, ni, nj], data);
        let needs = self.needs(uhat) || self.needs(v);
        let out = self.push(t, needs);
        self.ops.push(Op::CapsAgreement {
            uhat: uhat.0,
            v: v.0,
            out,
        });
        Ok(Var(out))
    }

    /// Regroups a convolutional map `[N, caps*dim, H, W]` into capsule
    /// vectors `[N, caps*H*W, dim]`.
    pub fn caps_reshape(&mut self, x: Var, caps: usize, dim: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != caps * dim {
            return Err(ScnError::ShapeMismatch {
                op: "caps_reshape",
                detail: format!(
                    "input {:?} incompatible with {} capsules of dim {}",
                    xs, caps, dim
                ),
            });
        }
        let (n, h, w) = (xs[0], xs[2], xs[3]);
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![0.0; xd.len()];
        for bn in 0..n {
            for cz in 0..caps {
                for dd in 0..dim {
                    let ch = cz * dim + dd;
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((bn * caps * dim + ch) * h + y) * w + xx;
                            let cap_index = (cz * h + y) * w + xx;
                            let dst = (bn * caps * h * w + cap_index) * dim + dd;
                            data[dst] = xd[src];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_raw(vec![n, caps * h * w, dim], data);
        let needs = self.needs(x);
        let out = self.push(t, needs);
        self.ops.push(Op::CapsReshape {
            x: x.0,
            out,
            caps,
            dim,
        });
        Ok(Var(out))
    }

    /// Reverse pass from a scalar loss. Returns a gradient for every input
    /// registered with `requires_grad` (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(ScnError::InvalidArgument {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.shape(loss)
                ),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            self.replay(op, &mut grads);
        }

        // Inputs with requires_grad that the loss never reached get zeros.
        let mut out: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            shapes.push(node.value.shape().to_vec());
            if node.value.requires_grad() {
                out[idx] = Some(
                    grads[idx]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.len()]),
                );
            }
        }
        Ok(Gradients { grads: out, shapes })
    }

    fn replay(&self, op: &Op, grads: &mut [Option<Vec<f64>>]) {
        macro_rules! out_grad {
            ($idx:expr) => {
                match grads[$idx].take() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        match *op {
            Op::Add { a, b, out } => {
                let g = out_grad!(out);
                if self.nodes[a].needs_grad {
                    accumulate(&mut grads[a], &g, self.nodes[a].value.len());
                }
                if self.nodes[b].needs_grad {
                    accumulate(&mut grads[b], &g, self.nodes[b].value.len());
                }
            }
            Op::Sub { a, b, out } => {
                let g = out_grad!(out);
                if self.nodes[a].needs_grad {
                    accumulate(&mut grads[a], &g, self.nodes[a].value.len());
                }
                if self.nodes[b].needs_grad {
                    let buf = ensure(&mut grads[b], self.nodes[b].value.len());
                    for (dst, gv) in buf.iter_mut().zip(&g) {
                        *dst -= gv;
                    }
                }
            }
            Op::Mul { a, b, out } => {
                let g = out_grad!(out);
                if self.nodes[a].needs_grad {
                    let bd = self.nodes[b].value.data();
                    let buf = ensure(&mut grads[a], self.nodes[a].value.len());
                    for ((dst, gv), bv) in buf.iter_mut().zip(&g).zip(bd) {
                        *dst += gv * bv;
                    }
                }
                if self.nodes[b].needs_grad {
                    let ad = self.nodes[a].value.data();
                    let buf = ensure(&mut grads[b], self.nodes[b].value.len());
                    for ((dst, gv), av) in buf.iter_mut().zip(&g).zip(ad) {
                        *dst += gv * av;
                    }
                }
            }
            Op::Affine { x, out, mul, .. } => {
                let g = out_grad!(out);
                if self.nodes[x].needs_grad {
                    let buf = ensure(&mut grads[x], self.nodes[x].value.len());
                    for (dst, gv) in buf.iter_mut().zip(&g) {
                        *dst += mul * gv;
                    }
                }
            }
            Op::Relu { x, out } => {
                let g = out_grad!(out);
                if self.nodes[x].needs_grad {
                    let xd = self.nodes[x].value.data();
                    let buf = ensure(&mut grads[x], self.nodes[x].value.len());
                    for ((dst, gv), xv) in buf.iter_mut().zip(&g).zip(xd) {
                        if *xv > 0.0 {
                            *dst += gv;
                        }
                    }
                }
            }
            Op::Sum { x, out } => {
                let g = out_grad!(out);
                if self.nodes[x].needs_grad {
                    let gv = g[0];
                    let buf = ensure(&mut grads[x], self.nodes[x].value.len());
                    for dst in buf.iter_mut() {
                        *dst += gv;
                    }
                }
            }
            Op::Softmax { x, out, axis } => {
                let g = out_grad!(out);
                if self.nodes[x].needs_grad {
                    let y = self.nodes[out].value.data();
                    let shape = self.nodes[out].value.shape();
                    let gx = softmax_backward(y, &g, shape, axis);
                    accumulate(&mut grads[x], &gx, self.nodes[x].value.len());
                }
            }
            Op::Squash { x, out } => {
                let g = out_grad!(out);
                if self.nodes[x].needs_grad {
                    let xd = self.nodes[x].value.data();
                    let dim = *self.nodes[x].value.shape().last().unwrap();
                    let buf = ensure(&mut grads[x], xd.len());
                    for ci in 0..xd.len() / dim {
                        let s = &xd[ci * dim..(ci + 1) * dim];
                        let gc = &g[ci * dim..(ci + 1) * dim];
                        let n2: f64 = s.iter().map(|v| v * v).sum();
                        let n = n2.sqrt();
                        if n < NORM_EPS {
                            continue;
                        }
                        let k = n / (1.0 + n2);
                        let kp = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
                        let gdot: f64 = gc.iter().zip(s).map(|(gv, sv)| gv * sv).sum();
                        let coef = kp / n * gdot;
                        let dst = &mut buf[ci * dim..(ci + 1) * dim];
                        for ((dv, gv), sv) in dst.iter_mut().zip(gc).zip(s) {
                            *dv += k * gv + coef * sv;
                        }
                    }
                }
            }
            Op::NormLast { x, out } => {
                let g = out_grad!(out);
                if self.nodes[x].needs_grad {
                    let xd = self.nodes[x].value.data();
                    let nd = self.nodes[out].value.data();
                    let dim = *self.nodes[x].value.shape().last().unwrap();
                    let buf = ensure(&mut grads[x], xd.len());
                    for ci in 0..nd.len() {
                        let n = nd[ci];
                        if n < NORM_EPS {
                            continue;
                        }
                        let coef = g[ci] / n;
                        let src = &xd[ci * dim..(ci + 1) * dim];
                        let dst = &mut buf[ci * dim..(ci + 1) * dim];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += coef * sv;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                out,
                stride,
            } => {
                let g = out_grad!(out);
                let ishape = self.nodes[input].value.shape();
                let kshape = self.nodes[kernels].value.shape();
                let oshape = self.nodes[out].value.shape();
                let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (k, kh, kw) = (kshape[0], kshape[2], kshape[3]);
                let (oh, ow) = (oshape[2], oshape[3]);
                if self.nodes[bias].needs_grad {
                    let buf = ensure(&mut grads[bias], k);
                    for bn in 0..n {
                        for kk in 0..k {
                            let base = (bn * k + kk) * oh * ow;
                            buf[kk] += g[base..base + oh * ow].iter().sum::<f64>();
                        }
                    }
                }
                if self.nodes[kernels].needs_grad {
                    let id = self.nodes[input].value.data();
                    let buf = ensure(&mut grads[kernels], k * c * kh * kw);
                    conv2d_grad_kernels(
                        id,
                        &g,
                        buf,
                        (n, c, h, w),
                        (k, kh, kw),
                        stride,
                        (oh, ow),
                    );
                }
                if self.nodes[input].needs_grad {
                    let kd = self.nodes[kernels].value.data();
                    let buf = ensure(&mut grads[input], n * c * h * w);
                    conv2d_grad_input(
                        kd,
                        &g,
                        buf,
                        (n, c, h, w),
                        (k, kh, kw),
                        stride,
                        (oh, ow),
                    );
                }
            }
            Op::CapsPredict { u, w, out } => {
                let g = out_grad!(out);
                let us = self.nodes[u].value.shape();
                let ws = self.nodes[w].value.shape();
                let (n, ni, d) = (us[0], us[1], us[2]);
                let (nj, o) = (ws[1], ws[2]);
                if self.nodes[w].needs_grad {
                    let ud = self.nodes[u].value.data();
                    let buf = ensure(&mut grads[w], ni * nj * o * d);
                    for bn in 0..n {
                        for i in 0..ni {
                            let uvec = &ud[(bn * ni + i) * d..(bn * ni + i + 1) * d];
                            for j in 0..nj {
                                for oo in 0..o {
                                    let gv = g[((bn * ni + i) * nj + j) * o + oo];
                                    let dst = &mut buf
                                        [((i * nj + j) * o + oo) * d..((i * nj + j) * o + oo + 1) * d];
                                    for (dv, uv) in dst.iter_mut().zip(uvec) {
                                        *dv += gv * uv;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.nodes[u].needs_grad {
                    let wd = self.nodes[w].value.data();
                    let buf = ensure(&mut grads[u], n * ni * d);
                    for bn in 0..n {
                        for i in 0..ni {
                            let dst = &mut buf[(bn * ni + i) * d..(bn * ni + i + 1) * d];
                            for j in 0..nj {
                                for oo in 0..o {
                                    let gv = g[((bn * ni + i) * nj + j) * o + oo];
                                    let wrow = &wd
                                        [((i * nj + j) * o + oo) * d..((i * nj + j) * o + oo + 1) * d];
                                    for (dv, wv) in dst.iter_mut().zip(wrow) {
                                        *dv += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::CapsWeightedSum { c, uhat, out } => {
                let g = out_grad!(out);
                let hs = self.nodes[uhat].value.shape();
                let (n, ni, nj, o) = (hs[0], hs[1], hs[2], hs[3]);
                if self.nodes[c].needs_grad {
                    let hd = self.nodes[uhat].value.data();
                    let buf = ensure(&mut grads[c], n * ni * nj);
                    for bn in 0..n {
                        for i in 0..ni {
                            for j in 0..nj {
                                let hrow = &hd[((bn * ni + i) * nj + j) * o
                                    ..((bn * ni + i) * nj + j + 1) * o];
                                let grow = &g[(bn * nj + j) * o..(bn * nj + j + 1) * o];
                                let mut acc = 0.0;
                                for oo in 0..o {
                                    acc += hrow[oo] * grow[oo];
                                }
                                buf[(bn * ni + i) * nj + j] += acc;
                            }
                        }
                    }
                }
                if self.nodes[uhat].needs_grad {
                    let cd = self.nodes[c].value.data();
                    let buf = ensure(&mut grads[uhat], n * ni * nj * o);
                    for bn in 0..n {
                        for i in 0..ni {
                            for j in 0..nj {
                                let coeff = cd[(bn * ni + i) * nj + j];
                                let grow = &g[(bn * nj + j) * o..(bn * nj + j + 1) * o];
                                let dst = &mut buf[((bn * ni + i) * nj + j) * o
                                    ..((bn * ni + i) * nj + j + 1) * o];
                                for (dv, gv) in dst.iter_mut().zip(grow) {
                                    *dv += coeff * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::CapsAgreement { uhat, v, out } => {
                let g = out_grad!(out);
                let hs = self.nodes[uhat].value.shape();
                let (n, ni, nj, o) = (hs[0], hs[1], hs[2], hs[3]);
                if self.nodes[uhat].needs_grad {
                    let vd = self.nodes[v].value.data();
                    let buf = ensure(&mut grads[uhat], n * ni * nj * o);
                    for bn in 0..n {
                        for i in 0..ni {
                            for j in 0..nj {
                                let gv = g[(bn * ni + i) * nj + j];
                                let vrow = &vd[(bn * nj + j) * o..(bn * nj + j + 1) * o];
                                let dst = &mut buf[((bn * ni + i) * nj + j) * o
                                    ..((bn * ni + i) * nj + j + 1) * o];
                                for (dv, vv) in dst.iter_mut().zip(vrow) {
                                    *dv += gv * vv;
                                }
                            }
                        }
                    }
                }
                if self.nodes[v].needs_grad {
                    let hd = self.nodes[uhat].value.data();
                    let buf = ensure(&mut grads[v], n * nj * o);
                    for bn in 0..n {
                        for i in 0..ni {
                            for j in 0..nj {
                                let gv = g[(bn * ni + i) * nj + j];
                                let hrow = &hd[((bn * ni + i) * nj + j) * o
                                    ..((bn * ni + i) * nj + j + 1) * o];
                                let dst =
                                    &mut buf[(bn * nj + j) * o..(bn * nj + j + 1) * o];
                                for (dv, hv) in dst.iter_mut().zip(hrow) {
                                    *dv += gv * hv;
                                }
                            }
                        }
                    }
                }
            }
            Op::CapsReshape { x, out, caps, dim } => {
                let g = out_grad!(out);
                if self.nodes[x].needs_grad {
                    let xs = self.nodes[x].value.shape();
                    let (n, h, w) = (xs[0], xs[2], xs[3]);
                    let buf = ensure(&mut grads[x], self.nodes[x].value.len());
                    for bn in 0..n {
                        for cz in 0..caps {
                            for dd in 0..dim {
                                let ch = cz * dim + dd;
                                for y in 0..h {
                                    for xx in 0..w {
                                        let src = ((bn * caps * dim + ch) * h + y) * w + xx;
                                        let cap_index = (cz * h + y) * w + xx;
                                        let dst = (bn * caps * h * w + cap_index) * dim + dd;
                                        buf[src] += g[dst];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn ensure<'a>(slot: &'a mut Option<Vec<f64>>, len: usize) -> &'a mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64], len: usize) {
    let buf = ensure(slot, len);
    for (dst, gv) in buf.iter_mut().zip(g) {
        *dst += gv;
    }
}

fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for oi in 0..outer {
        for ii in 0..inner {
            let base = oi * axis_len * inner + ii;
            let mut maxv = f64::NEG_INFINITY;
            for a in 0..axis_len {
                maxv = maxv.max(x[base + a * inner]);
            }
            let mut total = 0.0;
            for a in 0..axis_len {
                let e = (x[base + a * inner] - maxv).exp();
                out[base + a * inner] = e;
                total += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= total;
            }
        }
    }
    out
}

fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; y.len()];
    for oi in 0..outer {
        for ii in 0..inner {
            let base = oi * axis_len * inner + ii;
            let mut dot = 0.0;
            for a in 0..axis_len {
                let idx = base + a * inner;
                dot += g[idx] * y[idx];
            }
            for a in 0..axis_len {
                let idx = base + a * inner;
                out[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (k, kh, kw): (usize, usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; n * k * oh * ow];
    for bn in 0..n {
        for kk in 0..k {
            let obase = (bn * k + kk) * oh * ow;
            out[obase..obase + oh * ow].fill(bias[kk]);
            for cc in 0..c {
                let ibase = (bn * c + cc) * h * w;
                let kbase = (kk * c + cc) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = kernels[kbase + ky * kw + kx];
                        for oy in 0..oh {
                            let irow = ibase + (oy * stride + ky) * w + kx;
                            let orow = obase + oy * ow;
                            if stride == 1 {
                                let src = &input[irow..irow + ow];
                                let dst = &mut out[orow..orow + ow];
                                for (dv, sv) in dst.iter_mut().zip(src) {
                                    *dv += wgt * sv;
                                }
                            } else {
                                for ox in 0..ow {
                                    out[orow + ox] += wgt * input[irow + ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_kernels(
    input: &[f64],
    gout: &[f64],
    gker: &mut [f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (k, kh, kw): (usize, usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
) {
    for bn in 0..n {
        for kk in 0..k {
            let obase = (bn * k + kk) * oh * ow;
            for cc in 0..c {
                let ibase = (bn * c + cc) * h * w;
                let kbase = (kk * c + cc) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let irow = ibase + (oy * stride + ky) * w + kx;
                            let orow = obase + oy * ow;
                            if stride == 1 {
                                let src = &input[irow..irow + ow];
                                let grow = &gout[orow..orow + ow];
                                for (sv, gv) in src.iter().zip(grow) {
                                    acc += sv * gv;
                                }
                            } else {
                                for ox in 0..ow {
                                    acc += input[irow + ox * stride] * gout[orow + ox];
                                }
                            }
                        }
                        gker[kbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_input(
    kernels: &[f64],
    gout: &[f64],
    ginp: &mut [f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (k, kh, kw): (usize, usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
) {
    let _ = h;
    for bn in 0..n {
        for kk in 0..k {
            let obase = (bn * k + kk) * oh * ow;
            for cc in 0..c {
                let ibase = (bn * c + cc) * h * w;
                let kbase = (kk * c + cc) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = kernels[kbase + ky * kw + kx];
                        for oy in 0..oh {
                            let irow = ibase + (oy * stride + ky) * w + kx;
                            let orow = obase + oy * ow;
                            for ox in 0..ow {
                                ginp[irow + ox * stride] += wgt * gout[orow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 3, 3], &[1.0; 9]));
        let k = tape.input(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.input(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data(), &[1.0; 9]);
    }

    #[test]
    fn conv_hand_dot_product() {
        // [[1,2],[3,4]] against kernel [[1,0],[0,1]] -> 1 + 4 = 5
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.input(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.input(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_shape_mismatch_is_descriptive() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2, 3, 3], &[0.0; 18]));
        let k = tape.input(t(&[1, 1, 2, 2], &[0.0; 4]));
        let b = tape.input(t(&[1], &[0.0]));
        let err = tape.conv2d(x, k, b, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn squash_zero_and_unit_and_three() {
        let mut tape = Tape::new();
        let z = tape.input(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let v = tape.squash(z).unwrap();
        assert_eq!(tape.value(v).data(), &[0.0, 0.0, 0.0]);

        let u = tape.input(t(&[1, 2], &[1.0, 0.0]));
        let v = tape.squash(u).unwrap();
        assert!((tape.value(v).data()[0] - 0.5).abs() < 1e-15);

        // |s| = 3 -> |v| = 9/10
        let s = tape.input(t(&[1, 1], &[3.0]));
        let v = tape.squash(s).unwrap();
        assert!((tape.value(v).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn squash_norm_below_one_and_monotone() {
        let mut tape = Tape::new();
        let mut prev = 0.0;
        for i in 1..50 {
            let len = i as f64 * 0.5;
            let x = tape.input(t(&[1, 2], &[len, 0.0]));
            let v = tape.squash(x).unwrap();
            let out_len = tape.value(v).data()[0].hypot(tape.value(v).data()[1]);
            assert!(out_len < 1.0);
            assert!(out_len > prev);
            prev = out_len;
        }
    }

    #[test]
    fn softmax_uniform_closed_form_and_shift() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[10], &[0.7; 10]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.1).abs() < 1e-15);
        }

        let x = tape.input(t(&[2], &[2.0f64.ln(), 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);

        // shift invariance
        let x1 = tape.input(t(&[3], &[0.3, -1.2, 2.0]));
        let x2 = tape.input(t(&[3], &[0.3 + 7.5, -1.2 + 7.5, 2.0 + 7.5]));
        let y1 = tape.softmax(x1, 0).unwrap();
        let y2 = tape.softmax(x2, 0).unwrap();
        for (a, b) in tape.value(y1).data().iter().zip(tape.value(y2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3, 2], &[0.1, -0.4, 2.0, 1.1, -3.0, 0.5, 0.0, 0.2, 0.9, -1.0, 4.0, 1.5]));
        let y = tape.softmax(x, 1).unwrap();
        let yd = tape.value(y).data();
        for outer in 0..2 {
            for inner in 0..2 {
                let mut total = 0.0;
                for a in 0..3 {
                    total += yd[outer * 6 + a * 2 + inner];
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[4], &[1.0, -2.0, 0.5, 3.0]).with_grad());
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_squared_norm_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_unreachable_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]).with_grad());
        let y = tape.input(t(&[2], &[5.0, 6.0]).with_grad());
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[0.3, -0.7, 1.9]).with_grad());
        let s = tape.squash(x).unwrap();
        let m = tape.mul(s, s).unwrap();
        let l = tape.sum(m);
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        let a = g1.get(x).unwrap();
        let b = g2.get(x).unwrap();
        for (x1, x2) in a.iter().zip(b) {
            assert_eq!(x1.to_bits(), x2.to_bits());
        }
    }
}
