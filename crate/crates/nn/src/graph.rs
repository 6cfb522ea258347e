//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! Every op appends a node holding its output; [`Graph::backward`] walks the
//! tape in reverse. Convolutions are lowered to im2col + GEMM in column
//! chunks and recompute the column matrix during the backward pass instead of
//! keeping it.

use matrixmultiply::dgemm;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Target number of output positions per im2col chunk.
const CONV_CHUNK_COLS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gather table for one sample: `table[r * positions + p]` is the input
/// offset feeding row `r` of output position `p`, or `-1` for padding.
#[derive(Debug, Clone)]
struct ConvGeom {
    rows: usize,
    positions: usize,
    sample_len: usize,
    out_spatial: Vec<usize>,
    table: Vec<isize>,
}

impl ConvGeom {
    /// `spatial` and `kernel` are (H, W) pairs; 1-D uses H = 1.
    fn new(
        cin: usize,
        spatial: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Option<Self> {
        let (h, w) = spatial;
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        if h + 2 * ph < kh || w + 2 * pw < kw || sh == 0 || sw == 0 {
            return None;
        }
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;
        let rows = cin * kh * kw;
        let positions = ho * wo;
        let mut table = vec![-1isize; rows * positions];
        for c in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    let r = (c * kh + i) * kw + j;
                    for oy in 0..ho {
                        let y = (oy * sh + i) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let x = (ox * sw + j) as isize - pw as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            table[r * positions + oy * wo + ox] =
                                ((c * h) as isize + y) * w as isize + x;
                        }
                    }
                }
            }
        }
        Some(Self {
            rows,
            positions,
            sample_len: cin * h * w,
            out_spatial: if h == 1 && kh == 1 {
                vec![wo]
            } else {
                vec![ho, wo]
            },
            table,
        })
    }

    fn samples_per_chunk(&self) -> usize {
        (CONV_CHUNK_COLS / self.positions).max(1)
    }

    /// Column matrix `[rows, ns * positions]` for samples `n0..n0 + ns`.
    fn im2col(&self, x: &[f64], n0: usize, ns: usize, cols: &mut [f64]) {
        let width = ns * self.positions;
        for r in 0..self.rows {
            let trow = &self.table[r * self.positions..(r + 1) * self.positions];
            for s in 0..ns {
                let xs = &x[(n0 + s) * self.sample_len..(n0 + s + 1) * self.sample_len];
                let dst =
                    &mut cols[r * width + s * self.positions..r * width + (s + 1) * self.positions];
                for (d, &src) in dst.iter_mut().zip(trow) {
                    *d = if src >= 0 { xs[src as usize] } else { 0.0 };
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], n0: usize, ns: usize, dx: &mut [f64]) {
        let width = ns * self.positions;
        for r in 0..self.rows {
            let trow = &self.table[r * self.positions..(r + 1) * self.positions];
            for s in 0..ns {
                let dxs = &mut dx[(n0 + s) * self.sample_len..(n0 + s + 1) * self.sample_len];
                let src =
                    &cols[r * width + s * self.positions..r * width + (s + 1) * self.positions];
                for (&v, &t) in src.iter().zip(trow) {
                    if t >= 0 {
                        dxs[t as usize] += v;
                    }
                }
            }
        }
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided index
    // touched for the given m, k, n; `c` is dense row-major m x n.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Box<ConvGeom>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Add(Var, Var),
    AdaptiveAvgPool1d {
        x: Var,
        out_len: usize,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    DotConst {
        x: Var,
        c: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance per channel.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let inner = shape[2..].iter().product();
    (n, c, inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn adaptive_bins(len: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|b| (len * b / out_len, len * (b + 1) / out_len))
        .collect()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return shape_err("conv1d", format!("input {xs:?}, weight {ws:?}"));
        }
        let geom = ConvGeom::new(xs[1], (1, xs[2]), (1, ws[2]), (1, stride), (0, padding))
            .ok_or_else(|| NnError::Shape {
                op: "conv1d",
                detail: format!(
                    "kernel {} does not fit length {} with padding {padding}",
                    ws[2], xs[2]
                ),
            })?;
        self.conv(x, w, b, geom, "conv1d")
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return shape_err("conv2d", format!("input {xs:?}, weight {ws:?}"));
        }
        let geom = ConvGeom::new(
            xs[1],
            (xs[2], xs[3]),
            (ws[2], ws[3]),
            (stride, stride),
            (padding, padding),
        )
        .ok_or_else(|| NnError::Shape {
            op: "conv2d",
            detail: format!("kernel {:?} does not fit input {:?}", &ws[2..], &xs[2..]),
        })?;
        self.conv(x, w, b, geom, "conv2d")
    }

    fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        op: &'static str,
    ) -> Result<Var> {
        let n = self.value(x).shape()[0];
        let cout = self.value(w).shape()[0];
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return shape_err(
                    op,
                    format!(
                        "bias {:?} for {cout} output channels",
                        self.value(b).shape()
                    ),
                );
            }
        }
        let p = geom.positions;
        let mut out = vec![0.0; n * cout * p];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let chunk = geom.samples_per_chunk();
            let mut cols = vec![0.0; geom.rows * chunk * p];
            let mut y = vec![0.0; cout * chunk * p];
            let mut n0 = 0;
            while n0 < n {
                let ns = chunk.min(n - n0);
                let width = ns * p;
                geom.im2col(xd, n0, ns, &mut cols[..geom.rows * width]);
                gemm(
                    cout,
                    geom.rows,
                    width,
                    wd,
                    geom.rows,
                    1,
                    &cols,
                    width,
                    1,
                    0.0,
                    &mut y[..cout * width],
                );
                for s in 0..ns {
                    for co in 0..cout {
                        let dst =
                            &mut out[((n0 + s) * cout + co) * p..((n0 + s) * cout + co + 1) * p];
                        dst.copy_from_slice(&y[co * width + s * p..co * width + (s + 1) * p]);
                    }
                }
                n0 += ns;
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (i, v) in out.iter_mut().enumerate() {
                    *v += bd[(i / p) % cout];
                }
            }
        }
        let mut shape = vec![n, cout];
        shape.extend_from_slice(&geom.out_spatial);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv {
                x,
                w,
                b,
                geom: Box::new(geom),
            },
            rg,
        ))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape();
        if xs.len() < 2 {
            return shape_err("batchnorm", format!("input {xs:?} has no channel axis"));
        }
        let (n, c, inner) = bn_layout(xs);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(
                "batchnorm",
                format!("affine parameters do not match {c} channels"),
            );
        }
        Ok((n, c, inner))
    }

    /// Training-mode batch norm over every axis except 1.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.check_bn(x, gamma, beta)?;
        if n < 2 {
            return Err(NnError::InvalidArgument(
                "batch norm in training mode needs a batch of at least 2".into(),
            ));
        }
        let count = n * inner;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let s = &xd[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                mean[ci] += s.iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for ni in 0..n {
            for ci in 0..c {
                let s = &xd[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                var[ci] += s
                    .iter()
                    .map(|v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count as f64;
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &invstd, n, c, inner);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
                train: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm with fixed statistics; affine in `x`.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, inner) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batchnorm", "running statistics do not match channel count");
        }
        let invstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, running_mean, &invstd, n, c, inner);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
                train: false,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        invstd: &[f64],
        n: usize,
        c: usize,
        inner: usize,
    ) -> Tensor {
        let xt = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xt.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let scale = g[ci] * invstd[ci];
                let shift = b[ci] - mean[ci] * scale;
                for v in &mut out[(ni * c + ci) * inner..(ni * c + ci + 1) * inner] {
                    *v = *v * scale + shift;
                }
            }
        }
        Tensor::new(xt.shape(), out).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Max pooling over the last axis of `[N, C, L]`.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || kernel == 0 || stride == 0 || xs[2] < kernel {
            return shape_err(
                "maxpool1d",
                format!("input {xs:?}, kernel {kernel}, stride {stride}"),
            );
        }
        self.maxpool(
            x,
            xs[0] * xs[1],
            (1, xs[2]),
            (1, kernel),
            (1, stride),
            "maxpool1d",
        )
    }

    /// Max pooling over the last two axes of `[N, C, H, W]` with a square window.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return shape_err(
                "maxpool2d",
                format!("input {xs:?}, kernel {kernel}, stride {stride}"),
            );
        }
        self.maxpool(
            x,
            xs[0] * xs[1],
            (xs[2], xs[3]),
            (kernel, kernel),
            (stride, stride),
            "maxpool2d",
        )
    }

    fn maxpool(
        &mut self,
        x: Var,
        planes: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        op: &'static str,
    ) -> Result<Var> {
        let ho = (h - kh) / sh + 1;
        let wo = (w - kw) / sw + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * sh * w + ox * sw;
                    for i in 0..kh {
                        for j in 0..kw {
                            let idx = base + (oy * sh + i) * w + ox * sw + j;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = self.value(x).shape().to_vec();
        if op == "maxpool1d" {
            shape[2] = wo;
        } else {
            shape[2] = ho;
            shape[3] = wo;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", format!("input {xs:?}, weight {ws:?}"));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [fout] {
                return shape_err(
                    "linear",
                    format!("bias {:?} for {fout} outputs", self.value(b).shape()),
                );
            }
        }
        let mut out = vec![0.0; n * fout];
        gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            fin,
            1,
            self.value(w).data(),
            1,
            fin,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(fout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.is_empty() {
            return shape_err("flatten", "scalar input");
        }
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let nd = t.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd
            || axes
                .iter()
                .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return shape_err("permute", format!("axes {axes:?} for rank {nd}"));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Mean over bins `[floor(L b / out), floor(L (b + 1) / out))` of the last
    /// axis of `[N, C, L]`.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || out_len == 0 || xs[2] < out_len {
            return shape_err(
                "adaptive_avg_pool1d",
                format!("input {xs:?} to length {out_len}"),
            );
        }
        let len = xs[2];
        let bins = adaptive_bins(len, out_len);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xs[0] * xs[1] * out_len);
        for row in xd.chunks_exact(len) {
            for &(s, e) in &bins {
                out.push(row[s..e].iter().sum::<f64>() / (e - s) as f64);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[xs[0], xs[1], out_len], out)?,
            Op::AdaptiveAvgPool1d { x, out_len },
            rg,
        ))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return shape_err(
                "softmax_cross_entropy",
                format!("logits {ls:?}, {} labels", labels.len()),
            );
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NnError::InvalidArgument(format!(
                "label {bad} outside 0..{k}"
            )));
        }
        let mut probs = Vec::with_capacity(ls[0] * k);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks_exact(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `sum(x * c)` for a constant `c` of the same shape.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return shape_err(
                "dot_const",
                format!("{:?} . {:?}", self.value(x).shape(), c.shape()),
            );
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, c }, rg))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Reverse pass from a one-element output. Leaf gradients are kept;
    /// intermediate gradients are released as the walk passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(
                "backward",
                format!("output {:?} is not a scalar", self.value(loss).shape()),
            );
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            for (target, g) in self.op_backward(i, &gy) {
                self.accumulate(target, g);
            }
        }
        Ok(())
    }

    fn op_backward(&self, i: usize, gy: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let gyd = gy.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let n = xt.shape()[0];
                let cout = wt.shape()[0];
                let p = geom.positions;
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut dx = vec![0.0; if need_x { xt.numel() } else { 0 }];
                let mut dw = vec![0.0; if need_w { wt.numel() } else { 0 }];
                let chunk = geom.samples_per_chunk();
                let mut cols = vec![0.0; geom.rows * chunk * p];
                let mut dy = vec![0.0; cout * chunk * p];
                let mut n0 = 0;
                while n0 < n {
                    let ns = chunk.min(n - n0);
                    let width = ns * p;
                    for s in 0..ns {
                        for co in 0..cout {
                            dy[co * width + s * p..co * width + (s + 1) * p].copy_from_slice(
                                &gyd[((n0 + s) * cout + co) * p..((n0 + s) * cout + co + 1) * p],
                            );
                        }
                    }
                    if need_w {
                        geom.im2col(xt.data(), n0, ns, &mut cols[..geom.rows * width]);
                        gemm(
                            cout, width, geom.rows, &dy, width, 1, &cols, 1, width, 1.0, &mut dw,
                        );
                    }
                    if need_x {
                        let dcols = &mut cols[..geom.rows * width];
                        gemm(
                            geom.rows,
                            cout,
                            width,
                            wt.data(),
                            1,
                            geom.rows,
                            &dy,
                            width,
                            1,
                            0.0,
                            dcols,
                        );
                        geom.col2im_add(dcols, n0, ns, &mut dx);
                    }
                    n0 += ns;
                }
                if need_x {
                    out.push((*x, Tensor::new(xt.shape(), dx).expect("shape")));
                }
                if need_w {
                    out.push((*w, Tensor::new(wt.shape(), dw).expect("shape")));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; cout];
                        for (j, v) in gyd.iter().enumerate() {
                            db[(j / p) % cout] += v;
                        }
                        out.push((*b, Tensor::new(&[cout], db).expect("shape")));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => {
                let xt = self.value(*x);
                let (n, c, inner) = bn_layout(xt.shape());
                let xd = xt.data();
                let g = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let r = (ni * c + ci) * inner..(ni * c + ci + 1) * inner;
                        for (xv, dv) in xd[r.clone()].iter().zip(&gyd[r]) {
                            sum_dy[ci] += dv;
                            sum_dy_xhat[ci] += dv * (xv - mean[ci]) * invstd[ci];
                        }
                    }
                }
                if self.rg(*x) {
                    let m = (n * inner) as f64;
                    let mut dx = vec![0.0; xd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let r = (ni * c + ci) * inner..(ni * c + ci + 1) * inner;
                            let k = g[ci] * invstd[ci];
                            for ((o, xv), dv) in
                                dx[r.clone()].iter_mut().zip(&xd[r.clone()]).zip(&gyd[r])
                            {
                                *o = if *train {
                                    let xhat = (xv - mean[ci]) * invstd[ci];
                                    k * (dv - sum_dy[ci] / m - xhat * sum_dy_xhat[ci] / m)
                                } else {
                                    k * dv
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(xt.shape(), dx).expect("shape")));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, Tensor::new(&[c], sum_dy_xhat).expect("shape")));
                }
                if self.rg(*beta) {
                    out.push((*beta, Tensor::new(&[c], sum_dy).expect("shape")));
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let d = xd
                    .iter()
                    .zip(gyd)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                out.push((*x, Tensor::new(self.value(*x).shape(), d).expect("shape")));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (&j, g) in argmax.iter().zip(gyd) {
                    d[j] += g;
                }
                out.push((*x, Tensor::new(self.value(*x).shape(), d).expect("shape")));
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, fin, fout) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * fin];
                    gemm(n, fout, fin, gyd, fout, 1, wt.data(), fin, 1, 0.0, &mut dx);
                    out.push((*x, Tensor::new(&[n, fin], dx).expect("shape")));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(fout, n, fin, gyd, 1, fout, xt.data(), fin, 1, 0.0, &mut dw);
                    out.push((*w, Tensor::new(&[fout, fin], dw).expect("shape")));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; fout];
                        for row in gyd.chunks_exact(fout) {
                            for (o, g) in db.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        out.push((*b, Tensor::new(&[fout], db).expect("shape")));
                    }
                }
            }
            Op::Reshape(x) => {
                out.push((
                    *x,
                    gy.clone().reshaped(self.value(*x).shape()).expect("shape"),
                ));
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (d, shape) = permute_data(gyd, gy.shape(), &inv);
                out.push((*x, Tensor::new(&shape, d).expect("shape")));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::AdaptiveAvgPool1d { x, out_len } => {
                let xs = self.value(*x).shape();
                let len = xs[2];
                let bins = adaptive_bins(len, *out_len);
                let mut d = vec![0.0; self.value(*x).numel()];
                for (row, grow) in d.chunks_exact_mut(len).zip(gyd.chunks_exact(*out_len)) {
                    for (&(s, e), g) in bins.iter().zip(grow) {
                        let share = g / (e - s) as f64;
                        for v in &mut row[s..e] {
                            *v += share;
                        }
                    }
                }
                out.push((*x, Tensor::new(xs, d).expect("shape")));
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = gyd[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &l) in d.chunks_exact_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                out.push((
                    *logits,
                    Tensor::new(self.value(*logits).shape(), d).expect("shape"),
                ));
            }
            Op::DotConst { x, c } => {
                let d = c.data().iter().map(|v| v * gyd[0]).collect();
                out.push((*x, Tensor::new(c.shape(), d).expect("shape")));
            }
        }
        out
    }

    /// Adds the gradients of parameter leaves into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}
