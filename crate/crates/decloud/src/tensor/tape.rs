//! Define-by-run computation tape.
//!
//! Every forward op appends a node; `backward` walks the nodes in reverse
//! construction order (which is reverse topological order by construction)
//! and accumulates vector-Jacobian products. Leaves may point back into a
//! [`ParamStore`] so gradients can be collected for the optimizer.

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Relu(Var),
    Sqrt(Var),
    Log10(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    UpsampleNearest2(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    Transpose2d(Var),
    ChannelSlice { input: Var, channel: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass; confined to a single logical thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Right-aligned broadcast of `b` onto `a`: `b` may omit leading axes and may
/// have extent 1 where `a` does not. Returns None if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let da = a.len().checked_sub(rank - i).map_or(1, |j| a[j]);
        let db = b.len().checked_sub(rank - i).map_or(1, |j| b[j]);
        if da == db {
            out.push(da);
        } else if da == 1 {
            out.push(db);
        } else if db == 1 {
            out.push(da);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Maps a flat index in `out_shape` to the flat index in `shape` under
/// right-aligned broadcasting.
fn broadcast_index(flat: usize, out_shape: &[usize], shape: &[usize]) -> usize {
    let mut rem = flat;
    let mut idx = 0usize;
    let mut stride_acc = 1usize;
    // walk axes from the last to the first
    let mut strides = vec![0usize; out_shape.len()];
    for ax in (0..out_shape.len()).rev() {
        strides[ax] = stride_acc;
        stride_acc *= out_shape[ax];
    }
    let offset = out_shape.len() - shape.len();
    let mut own_stride = 1usize;
    let mut own_strides = vec![0usize; shape.len()];
    for ax in (0..shape.len()).rev() {
        own_strides[ax] = own_stride;
        own_stride *= shape[ax];
    }
    for ax in 0..out_shape.len() {
        let coord = rem / strides[ax];
        rem %= strides[ax];
        if ax >= offset {
            let own_ax = ax - offset;
            if shape[own_ax] != 1 {
                idx += coord * own_strides[own_ax];
            }
        }
    }
    idx
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "op produced {bad} (node {})",
                self.nodes.len()
            )));
        }
        let n = data.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: vec![0.0; n],
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf { param: None }, false)
    }

    /// Differentiable leaf detached from any store (used by `grad_check`).
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf { param: None }, true)
    }

    /// Leaf bound to a stored parameter; gradient flows iff the parameter
    /// has `requires_grad`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        self.push(
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf { param: Some(id) },
            t.requires_grad,
        )
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(format!("cannot broadcast {:?} with {:?}", sa, sb))
        })?;
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if sa == sb {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..n {
                data.push(f(da[i], db[i]));
            }
        } else {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..n {
                let ia = broadcast_index(i, &out_shape, &sa);
                let ib = broadcast_index(i, &out_shape, &sb);
                data.push(f(da[ia], db[ib]));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out_shape, data, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|v| v * c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|v| v + c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::AddScalar(a), needs)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Silu(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x < 0.0) {
            return Err(Error::domain(format!("sqrt of negative input {bad}")));
        }
        let data = self.data(a).iter().map(|x| x.sqrt()).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Sqrt(a), needs)
    }

    pub fn log10(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain(format!("log10 of non-positive input {bad}")));
        }
        let data = self.data(a).iter().map(|x| x.log10()).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Log10(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![s / n], Op::Mean(a), needs)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul expects [m,k]x[k,n], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..m {
                for p in 0..k {
                    let av = da[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let row = &db[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(row) {
                        *o += av * bv;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::Matmul(a, b), needs)
    }

    /// Cross-correlation of `[N,C,H,W]` with `[F,C,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects 4-d input and kernel, got {:?} and {:?}",
                si, sk
            )));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, ck, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if c != ck {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {ck}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel must be square with odd extent, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        let hp = h + 2 * padding;
        let wp = w + 2 * padding;
        if hp < kh || wp < kw {
            return Err(Error::shape(format!(
                "conv2d input {h}x{w} (padding {padding}) smaller than kernel {kh}x{kw}"
            )));
        }
        // floor semantics: trailing rows/cols that do not fit a full window are dropped
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        {
            let din = self.data(input);
            let dker = self.data(kernel);
            for ni in 0..n {
                for fi in 0..f {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                let kbase = ((fi * c + ci) * kh) * kw;
                                let ibase = (ni * c + ci) * h * w;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let irow = ibase + iy as usize * w;
                                    let krow = kbase + ky * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += din[irow + ix as usize] * dker[krow + kx];
                                    }
                                }
                            }
                            out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel);
        self.push(
            vec![n, f, oh, ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            needs,
        )
    }

    /// Nearest-neighbor 2x upsampling of `[N,C,H,W]`.
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("upsample expects 4-d input, got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; n * c * 4 * h * w];
        let din = self.data(a);
        for nc in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    let v = din[(nc * h + y) * w + x];
                    let base = nc * 4 * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[base + (2 * y + dy) * 2 * w + 2 * x + dx] = v;
                        }
                    }
                }
            }
        }
        let needs = self.needs(a);
        self.push(vec![n, c, 2 * h, 2 * w], out, Op::UpsampleNearest2(a), needs)
    }

    /// Concatenates two `[N,C,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::shape(format!(
                "concat_channels expects matching N,H,W: {:?} vs {:?}",
                sa, sb
            )));
        }
        let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        let (da, db) = (self.data(a), self.data(b));
        for ni in 0..n {
            out.extend_from_slice(&da[ni * ca * plane..(ni + 1) * ca * plane]);
            out.extend_from_slice(&db[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            vec![n, ca + cb, h, w],
            out,
            Op::ConcatChannels(a, b),
            needs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        self.push(shape.to_vec(), data, Op::Reshape(a), needs)
    }

    /// Extracts one channel of an `[N,C,H,W]` var as `[N,1,H,W]`.
    pub fn channel_slice(&mut self, a: Var, channel: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!(
                "channel_slice expects 4-d input, got {:?}",
                s
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if channel >= c {
            return Err(Error::shape(format!(
                "channel {channel} out of range for {c} channels"
            )));
        }
        let plane = h * w;
        let din = self.data(a);
        let mut out = Vec::with_capacity(n * plane);
        for ni in 0..n {
            let base = (ni * c + channel) * plane;
            out.extend_from_slice(&din[base..base + plane]);
        }
        let needs = self.needs(a);
        self.push(
            vec![n, 1, h, w],
            out,
            Op::ChannelSlice { input: a, channel },
            needs,
        )
    }

    /// Transpose of a 2-d var.
    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose2d expects 2-d, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let din = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = din[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(vec![n, m], out, Op::Transpose2d(a), needs)
    }

    fn add_grad_broadcast(&mut self, target: Var, out_shape: &[usize], g: &[f64], weight: &[f64]) {
        // grad flowing to a broadcast operand reduces over expanded axes
        let tshape = self.nodes[target.0].shape.clone();
        if tshape[..] == out_shape[..] {
            let tg = &mut self.nodes[target.0].grad;
            for i in 0..g.len() {
                tg[i] += g[i] * weight[i];
            }
        } else {
            let tg = &mut self.nodes[target.0].grad;
            for i in 0..g.len() {
                let ti = broadcast_index(i, out_shape, &tshape);
                tg[ti] += g[i] * weight[i];
            }
        }
    }

    /// Reverse pass from a scalar output. Call once per tape.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.nodes[out.0].data.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[out.0].shape
            )));
        }
        self.nodes[out.0].grad[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out_shape = self.nodes[i].shape.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    let ones = vec![1.0; g.len()];
                    if self.needs(a) {
                        self.add_grad_broadcast(a, &out_shape, &g, &ones);
                    }
                    if self.needs(b) {
                        self.add_grad_broadcast(b, &out_shape, &g, &ones);
                    }
                }
                Op::Sub(a, b) => {
                    let ones = vec![1.0; g.len()];
                    if self.needs(a) {
                        self.add_grad_broadcast(a, &out_shape, &g, &ones);
                    }
                    if self.needs(b) {
                        let neg: Vec<f64> = vec![-1.0; g.len()];
                        self.add_grad_broadcast(b, &out_shape, &g, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let sb = self.nodes[b.0].shape.clone();
                        let w: Vec<f64> = (0..g.len())
                            .map(|k| self.nodes[b.0].data[broadcast_index(k, &out_shape, &sb)])
                            .collect();
                        self.add_grad_broadcast(a, &out_shape, &g, &w);
                    }
                    if self.needs(b) {
                        let sa = self.nodes[a.0].shape.clone();
                        let w: Vec<f64> = (0..g.len())
                            .map(|k| self.nodes[a.0].data[broadcast_index(k, &out_shape, &sa)])
                            .collect();
                        self.add_grad_broadcast(b, &out_shape, &g, &w);
                    }
                }
                Op::Div(a, b) => {
                    let sa = self.nodes[a.0].shape.clone();
                    let sb = self.nodes[b.0].shape.clone();
                    if self.needs(a) {
                        let w: Vec<f64> = (0..g.len())
                            .map(|k| {
                                1.0 / self.nodes[b.0].data[broadcast_index(k, &out_shape, &sb)]
                            })
                            .collect();
                        self.add_grad_broadcast(a, &out_shape, &g, &w);
                    }
                    if self.needs(b) {
                        let w: Vec<f64> = (0..g.len())
                            .map(|k| {
                                let av =
                                    self.nodes[a.0].data[broadcast_index(k, &out_shape, &sa)];
                                let bv =
                                    self.nodes[b.0].data[broadcast_index(k, &out_shape, &sb)];
                                -av / (bv * bv)
                            })
                            .collect();
                        self.add_grad_broadcast(b, &out_shape, &g, &w);
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(a) {
                        let ag = &mut self.nodes[a.0].grad;
                        for k in 0..g.len() {
                            ag[k] += g[k] * c;
                        }
                    }
                }
                Op::AddScalar(a) => {
                    if self.needs(a) {
                        let ag = &mut self.nodes[a.0].grad;
                        for k in 0..g.len() {
                            ag[k] += g[k];
                        }
                    }
                }
                Op::Silu(a) => {
                    if self.needs(a) {
                        let xs = self.nodes[a.0].data.clone();
                        let ag = &mut self.nodes[a.0].grad;
                        for k in 0..g.len() {
                            let s = 1.0 / (1.0 + (-xs[k]).exp());
                            ag[k] += g[k] * s * (1.0 + xs[k] * (1.0 - s));
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.needs(a) {
                        let xs = self.nodes[a.0].data.clone();
                        let ag = &mut self.nodes[a.0].grad;
                        for k in 0..g.len() {
                            if xs[k] > 0.0 {
                                ag[k] += g[k];
                            }
                        }
                    }
                }
                Op::Sqrt(a) => {
                    if self.needs(a) {
                        let ys = self.nodes[i].data.clone();
                        let ag = &mut self.nodes[a.0].grad;
                        for k in 0..g.len() {
                            ag[k] += g[k] * 0.5 / ys[k];
                        }
                    }
                }
                Op::Log10(a) => {
                    if self.needs(a) {
                        let xs = self.nodes[a.0].data.clone();
                        let ag = &mut self.nodes[a.0].grad;
                        let ln10 = std::f64::consts::LN_10;
                        for k in 0..g.len() {
                            ag[k] += g[k] / (xs[k] * ln10);
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.needs(a) {
                        let g0 = g[0];
                        let ag = &mut self.nodes[a.0].grad;
                        for v in ag.iter_mut() {
                            *v += g0;
                        }
                    }
                }
                Op::Mean(a) => {
                    if self.needs(a) {
                        let n = self.nodes[a.0].data.len() as f64;
                        let g0 = g[0] / n;
                        let ag = &mut self.nodes[a.0].grad;
                        for v in ag.iter_mut() {
                            *v += g0;
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let m = self.nodes[a.0].shape[0];
                    let k = self.nodes[a.0].shape[1];
                    let n = self.nodes[b.0].shape[1];
                    if self.needs(a) {
                        let db = self.nodes[b.0].data.clone();
                        let ag = &mut self.nodes[a.0].grad;
                        for ii in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[ii * n + j] * db[p * n + j];
                                }
                                ag[ii * k + p] += acc;
                            }
                        }
                    }
                    if self.needs(b) {
                        let da = self.nodes[a.0].data.clone();
                        let bg = &mut self.nodes[b.0].grad;
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for ii in 0..m {
                                    acc += da[ii * k + p] * g[ii * n + j];
                                }
                                bg[p * n + j] += acc;
                            }
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let si = self.nodes[input.0].shape.clone();
                    let sk = self.nodes[kernel.0].shape.clone();
                    let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                    let (f, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
                    let oh = out_shape[2];
                    let ow = out_shape[3];
                    let din = self.nodes[input.0].data.clone();
                    let dker = self.nodes[kernel.0].data.clone();
                    let needs_in = self.needs(input);
                    let needs_ker = self.needs(kernel);
                    let mut gin = vec![0.0; din.len()];
                    let mut gker = vec![0.0; dker.len()];
                    for ni in 0..n {
                        for fi in 0..f {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[((ni * f + fi) * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        let kbase = ((fi * c + ci) * kh) * kw;
                                        let ibase = (ni * c + ci) * h * w;
                                        for ky in 0..kh {
                                            let iy =
                                                (oy * stride + ky) as isize - padding as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let irow = ibase + iy as usize * w;
                                            let krow = kbase + ky * kw;
                                            for kx in 0..kw {
                                                let ix = (ox * stride + kx) as isize
                                                    - padding as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                if needs_in {
                                                    gin[irow + ix as usize] +=
                                                        gv * dker[krow + kx];
                                                }
                                                if needs_ker {
                                                    gker[krow + kx] +=
                                                        gv * din[irow + ix as usize];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if needs_in {
                        let ig = &mut self.nodes[input.0].grad;
                        for (t, v) in ig.iter_mut().zip(&gin) {
                            *t += v;
                        }
                    }
                    if needs_ker {
                        let kg = &mut self.nodes[kernel.0].grad;
                        for (t, v) in kg.iter_mut().zip(&gker) {
                            *t += v;
                        }
                    }
                }
                Op::UpsampleNearest2(a) => {
                    if self.needs(a) {
                        let sa = self.nodes[a.0].shape.clone();
                        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                        let ag = &mut self.nodes[a.0].grad;
                        for nc in 0..n * c {
                            for y in 0..h {
                                for x in 0..w {
                                    let base = nc * 4 * h * w;
                                    let mut acc = 0.0;
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            acc += g[base + (2 * y + dy) * 2 * w + 2 * x + dx];
                                        }
                                    }
                                    ag[(nc * h + y) * w + x] += acc;
                                }
                            }
                        }
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let sa = self.nodes[a.0].shape.clone();
                    let sb = self.nodes[b.0].shape.clone();
                    let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                    let plane = sa[2] * sa[3];
                    if self.needs(a) {
                        let ag = &mut self.nodes[a.0].grad;
                        for ni in 0..n {
                            let src = ni * (ca + cb) * plane;
                            let dst = ni * ca * plane;
                            for k in 0..ca * plane {
                                ag[dst + k] += g[src + k];
                            }
                        }
                    }
                    if self.needs(b) {
                        let bg = &mut self.nodes[b.0].grad;
                        for ni in 0..n {
                            let src = ni * (ca + cb) * plane + ca * plane;
                            let dst = ni * cb * plane;
                            for k in 0..cb * plane {
                                bg[dst + k] += g[src + k];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(a) {
                        let ag = &mut self.nodes[a.0].grad;
                        for k in 0..g.len() {
                            ag[k] += g[k];
                        }
                    }
                }
                Op::Transpose2d(a) => {
                    if self.needs(a) {
                        let (n, m) = (out_shape[0], out_shape[1]);
                        let ag = &mut self.nodes[a.0].grad;
                        for i in 0..n {
                            for j in 0..m {
                                ag[j * n + i] += g[i * m + j];
                            }
                        }
                    }
                }
                Op::ChannelSlice { input, channel } => {
                    if self.needs(input) {
                        let (n, h, w) = (out_shape[0], out_shape[2], out_shape[3]);
                        let c = self.nodes[input.0].shape[1];
                        let plane = h * w;
                        let ag = &mut self.nodes[input.0].grad;
                        for ni in 0..n {
                            let base = (ni * c + channel) * plane;
                            for k in 0..plane {
                                ag[base + k] += g[ni * plane + k];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Deposits leaf gradients into the store's parameter `grad` buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                let t = store.get_mut(id);
                if t.requires_grad {
                    if node.grad.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "gradient of parameter {id:?}"
                        )));
                    }
                    t.accumulate_grad(&node.grad);
                }
            }
        }
        Ok(())
    }

    /// Output tensor snapshot for a var.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.data(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }
}
