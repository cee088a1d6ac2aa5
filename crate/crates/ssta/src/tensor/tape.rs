//! Wengert tape: records the forward pass, replays it in reverse.
//!
//! Values live in the tape arena and are addressed by [`ValueId`]. Leaves
//! are either constants or named inputs; [`Tape::backward`] walks the
//! recorded ops in reverse creation order (which is reverse topological
//! order by construction) and returns the accumulated adjoints of every
//! named leaf. A tape can be differentiated once.

use std::collections::BTreeMap;

use super::{ParameterSet, Result, Scalar, Tensor, TensorError};

/// Handle to a value in one tape's arena. Ids are only meaningful on the
/// tape that issued them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: usize, kernel: usize, bias: usize },
    Tanh { input: usize },
    Sigmoid { input: usize },
    Add { lhs: usize, rhs: usize },
    ScalarMul { input: usize, factor: Scalar },
    ConcatChannels { inputs: Vec<usize> },
    GlobalAvgPool { input: usize },
    Dense { weight: usize, input: usize, bias: usize },
    BroadcastGrid { input: usize },
    MseLoss { lhs: usize, rhs: usize },
}

struct Val {
    data: Vec<Scalar>,
    shape: Vec<usize>,
    op: Op,
}

/// Adjoints of every named leaf, keyed by leaf name.
#[derive(Clone, Debug, Default)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Gradients(map)
    }

    /// L2 norm over the concatenation of the named entries.
    pub fn l2_norm_of<'a>(&self, names: impl Iterator<Item = &'a str>) -> Scalar {
        let mut acc = 0.0;
        for name in names {
            if let Some(t) = self.0.get(name) {
                acc += t.data().iter().map(|v| v * v).sum::<Scalar>();
            }
        }
        acc.sqrt()
    }
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Val>,
    named: BTreeMap<String, usize>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<Scalar>, op: Op, opname: &str) -> Result<ValueId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: opname.into() });
        }
        let id = self.vals.len();
        self.vals.push(Val { data, shape, op });
        Ok(ValueId(id))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        let id = self.vals.len();
        self.vals.push(Val {
            data: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
        });
        ValueId(id)
    }

    /// Differentiable leaf; its adjoint appears in the backward result
    /// under `name`.
    pub fn input(&mut self, name: &str, t: &Tensor) -> Result<ValueId> {
        if self.named.contains_key(name) {
            return Err(TensorError::DuplicateName(name.into()));
        }
        let id = self.constant(t);
        self.named.insert(name.into(), id.0);
        Ok(id)
    }

    /// Registers every slice of a parameter set as a named leaf
    /// `{prefix}{slice name}` and returns the slice-name → id map.
    pub fn params(&mut self, set: &ParameterSet, prefix: &str) -> Result<BTreeMap<String, ValueId>> {
        let mut ids = BTreeMap::new();
        for (name, tensor) in set.iter() {
            let id = self.input(&format!("{prefix}{name}"), tensor)?;
            ids.insert(name.clone(), id);
        }
        Ok(ids)
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.vals[id.0].shape
    }

    pub fn data(&self, id: ValueId) -> &[Scalar] {
        &self.vals[id.0].data
    }

    pub fn value(&self, id: ValueId) -> Tensor {
        Tensor::new(self.vals[id.0].shape.clone(), self.vals[id.0].data.clone())
            .expect("tape values are valid by construction")
    }

    /// 2-D convolution, stride 1, zero padding `(k-1)/2`: spatial extents
    /// are preserved. `input` is `[C_in,H,W]`, `kernel` `[C_out,C_in,k,k]`,
    /// `bias` `[C_out]`.
    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, bias: ValueId) -> Result<ValueId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: ishape, rhs: kshape });
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kc_in, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc_in != c_in || kh != kw {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: ishape, rhs: kshape });
        }
        if kh % 2 == 0 {
            return Err(TensorError::EvenKernel(kh));
        }
        if bshape != [c_out] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: vec![c_out], rhs: bshape });
        }
        let out = conv2d_forward(
            &self.vals[input.0].data,
            &self.vals[kernel.0].data,
            &self.vals[bias.0].data,
            c_in,
            c_out,
            h,
            w,
            kh,
        );
        self.push(
            vec![c_out, h, w],
            out,
            Op::Conv2d { input: input.0, kernel: kernel.0, bias: bias.0 },
            "conv2d",
        )
    }

    pub fn tanh(&mut self, input: ValueId) -> Result<ValueId> {
        let data: Vec<Scalar> = self.vals[input.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.vals[input.0].shape.clone();
        self.push(shape, data, Op::Tanh { input: input.0 }, "tanh")
    }

    pub fn sigmoid(&mut self, input: ValueId) -> Result<ValueId> {
        let data: Vec<Scalar> = self.vals[input.0]
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.vals[input.0].shape.clone();
        self.push(shape, data, Op::Sigmoid { input: input.0 }, "sigmoid")
    }

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(lhs).to_vec(),
                rhs: self.shape(rhs).to_vec(),
            });
        }
        let data: Vec<Scalar> = self.vals[lhs.0]
            .data
            .iter()
            .zip(&self.vals[rhs.0].data)
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.vals[lhs.0].shape.clone();
        self.push(shape, data, Op::Add { lhs: lhs.0, rhs: rhs.0 }, "add")
    }

    pub fn scalar_mul(&mut self, input: ValueId, factor: Scalar) -> Result<ValueId> {
        let data: Vec<Scalar> = self.vals[input.0].data.iter().map(|v| v * factor).collect();
        let shape = self.vals[input.0].shape.clone();
        self.push(shape, data, Op::ScalarMul { input: input.0, factor }, "scalar_mul")
    }

    /// Concatenates `[C_i,H,W]` values along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        assert!(!inputs.is_empty(), "concat_channels of no inputs");
        let first = self.shape(inputs[0]).to_vec();
        if first.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", lhs: first, rhs: vec![] });
        }
        let (h, w) = (first[1], first[2]);
        let mut channels = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            channels += s[0];
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &id in inputs {
            data.extend_from_slice(&self.vals[id.0].data);
        }
        self.push(
            vec![channels, h, w],
            data,
            Op::ConcatChannels { inputs: inputs.iter().map(|v| v.0).collect() },
            "concat_channels",
        )
    }

    /// `[C,H,W]` → `[C]`, mean over each channel's grid.
    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "global_avg_pool", lhs: shape, rhs: vec![] });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let grid = h * w;
        let src = &self.vals[input.0].data;
        let data: Vec<Scalar> = (0..c)
            .map(|ch| src[ch * grid..(ch + 1) * grid].iter().sum::<Scalar>() / grid as Scalar)
            .collect();
        self.push(vec![c], data, Op::GlobalAvgPool { input: input.0 }, "global_avg_pool")
    }

    /// Matrix-vector product with bias: `weight [out,in] · input [in] + bias [out]`.
    pub fn dense(&mut self, weight: ValueId, input: ValueId, bias: ValueId) -> Result<ValueId> {
        let wshape = self.shape(weight).to_vec();
        let ishape = self.shape(input).to_vec();
        let bshape = self.shape(bias).to_vec();
        if wshape.len() != 2 || ishape.len() != 1 || wshape[1] != ishape[0] {
            return Err(TensorError::ShapeMismatch { op: "dense", lhs: wshape, rhs: ishape });
        }
        let (rows, cols) = (wshape[0], wshape[1]);
        if bshape != [rows] {
            return Err(TensorError::ShapeMismatch { op: "dense", lhs: vec![rows], rhs: bshape });
        }
        let wdata = &self.vals[weight.0].data;
        let idata = &self.vals[input.0].data;
        let bdata = &self.vals[bias.0].data;
        let data: Vec<Scalar> = (0..rows)
            .map(|r| {
                let row = &wdata[r * cols..(r + 1) * cols];
                bdata[r] + row.iter().zip(idata).map(|(w, x)| w * x).sum::<Scalar>()
            })
            .collect();
        self.push(
            vec![rows],
            data,
            Op::Dense { weight: weight.0, input: input.0, bias: bias.0 },
            "dense",
        )
    }

    /// `[C]` → `[C,H,W]`, replicating each entry over an `h × w` grid.
    pub fn broadcast_grid(&mut self, input: ValueId, h: usize, w: usize) -> Result<ValueId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 1 {
            return Err(TensorError::ShapeMismatch { op: "broadcast_grid", lhs: shape, rhs: vec![] });
        }
        let c = shape[0];
        let grid = h * w;
        let src = &self.vals[input.0].data;
        let mut data = Vec::with_capacity(c * grid);
        for ch in 0..c {
            data.extend(std::iter::repeat(src[ch]).take(grid));
        }
        self.push(vec![c, h, w], data, Op::BroadcastGrid { input: input.0 }, "broadcast_grid")
    }

    /// Mean squared difference, a rank-0 scalar.
    pub fn mse_loss(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                lhs: self.shape(lhs).to_vec(),
                rhs: self.shape(rhs).to_vec(),
            });
        }
        let n = self.vals[lhs.0].data.len() as Scalar;
        let sum: Scalar = self.vals[lhs.0]
            .data
            .iter()
            .zip(&self.vals[rhs.0].data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(
            Vec::new(),
            vec![sum / n],
            Op::MseLoss { lhs: lhs.0, rhs: rhs.0 },
            "mse_loss",
        )
    }

    /// Reverse sweep from a scalar loss. Returns the adjoint of every
    /// named leaf (zero tensors for leaves the loss does not reach).
    /// A second call on the same tape is rejected.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.vals[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.vals[loss.0].shape.clone(),
            });
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<Scalar>>> = (0..self.vals.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..self.vals.len()).rev() {
            let Some(out_adj) = adj[id].take() else { continue };
            // Re-seat so named-leaf extraction below can still read it.
            let op = self.vals[id].op.clone();
            match op {
                Op::Leaf => {
                    adj[id] = Some(out_adj);
                }
                Op::Conv2d { input, kernel, bias } => {
                    let (c_in, h, w) = {
                        let s = &self.vals[input].shape;
                        (s[0], s[1], s[2])
                    };
                    let (c_out, k) = {
                        let s = &self.vals[kernel].shape;
                        (s[0], s[2])
                    };
                    {
                        let d_in = grad_buf(&mut adj, input, c_in * h * w);
                        conv2d_backward_input(&out_adj, &self.vals[kernel].data, d_in, c_in, c_out, h, w, k);
                    }
                    {
                        let d_ker = grad_buf(&mut adj, kernel, c_out * c_in * k * k);
                        conv2d_backward_kernel(
                            &out_adj,
                            &self.vals[input].data,
                            d_ker,
                            c_in,
                            c_out,
                            h,
                            w,
                            k,
                        );
                    }
                    {
                        let d_bias = grad_buf(&mut adj, bias, c_out);
                        for co in 0..c_out {
                            d_bias[co] += out_adj[co * h * w..(co + 1) * h * w].iter().sum::<Scalar>();
                        }
                    }
                }
                Op::Tanh { input } => {
                    let n = self.vals[id].data.len();
                    let d_in = grad_buf(&mut adj, input, n);
                    for (i, (g, y)) in out_adj.iter().zip(&self.vals[id].data).enumerate() {
                        d_in[i] += g * (1.0 - y * y);
                    }
                }
                Op::Sigmoid { input } => {
                    let n = self.vals[id].data.len();
                    let d_in = grad_buf(&mut adj, input, n);
                    for (i, (g, y)) in out_adj.iter().zip(&self.vals[id].data).enumerate() {
                        d_in[i] += g * y * (1.0 - y);
                    }
                }
                Op::Add { lhs, rhs } => {
                    let n = out_adj.len();
                    {
                        let d = grad_buf(&mut adj, lhs, n);
                        for (di, g) in d.iter_mut().zip(&out_adj) {
                            *di += g;
                        }
                    }
                    {
                        let d = grad_buf(&mut adj, rhs, n);
                        for (di, g) in d.iter_mut().zip(&out_adj) {
                            *di += g;
                        }
                    }
                }
                Op::ScalarMul { input, factor } => {
                    let n = out_adj.len();
                    let d = grad_buf(&mut adj, input, n);
                    for (di, g) in d.iter_mut().zip(&out_adj) {
                        *di += factor * g;
                    }
                }
                Op::ConcatChannels { inputs } => {
                    let mut offset = 0;
                    for src in inputs {
                        let n = self.vals[src].data.len();
                        let d = grad_buf(&mut adj, src, n);
                        for (di, g) in d.iter_mut().zip(&out_adj[offset..offset + n]) {
                            *di += g;
                        }
                        offset += n;
                    }
                }
                Op::GlobalAvgPool { input } => {
                    let s = self.vals[input].shape.clone();
                    let (c, grid) = (s[0], s[1] * s[2]);
                    let inv = 1.0 / grid as Scalar;
                    let d = grad_buf(&mut adj, input, c * grid);
                    for ch in 0..c {
                        let g = out_adj[ch] * inv;
                        for di in &mut d[ch * grid..(ch + 1) * grid] {
                            *di += g;
                        }
                    }
                }
                Op::Dense { weight, input, bias } => {
                    let (rows, cols) = {
                        let s = &self.vals[weight].shape;
                        (s[0], s[1])
                    };
                    {
                        let d_w = grad_buf(&mut adj, weight, rows * cols);
                        let x = &self.vals[input].data;
                        for r in 0..rows {
                            let g = out_adj[r];
                            for (dw, xv) in d_w[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                                *dw += g * xv;
                            }
                        }
                    }
                    {
                        let d_x = grad_buf(&mut adj, input, cols);
                        let wd = &self.vals[weight].data;
                        for r in 0..rows {
                            let g = out_adj[r];
                            for (dx, wv) in d_x.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                                *dx += g * wv;
                            }
                        }
                    }
                    {
                        let d_b = grad_buf(&mut adj, bias, rows);
                        for (db, g) in d_b.iter_mut().zip(&out_adj) {
                            *db += g;
                        }
                    }
                }
                Op::BroadcastGrid { input } => {
                    let c = self.vals[input].shape[0];
                    let grid = out_adj.len() / c;
                    let d = grad_buf(&mut adj, input, c);
                    for ch in 0..c {
                        d[ch] += out_adj[ch * grid..(ch + 1) * grid].iter().sum::<Scalar>();
                    }
                }
                Op::MseLoss { lhs, rhs } => {
                    let n = self.vals[lhs].data.len();
                    let scale = out_adj[0] * 2.0 / n as Scalar;
                    let diffs: Vec<Scalar> = self.vals[lhs]
                        .data
                        .iter()
                        .zip(&self.vals[rhs].data)
                        .map(|(a, b)| a - b)
                        .collect();
                    {
                        let d = grad_buf(&mut adj, lhs, n);
                        for (di, diff) in d.iter_mut().zip(&diffs) {
                            *di += scale * diff;
                        }
                    }
                    {
                        let d = grad_buf(&mut adj, rhs, n);
                        for (di, diff) in d.iter_mut().zip(&diffs) {
                            *di -= scale * diff;
                        }
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, &idx) in &self.named {
            let shape = self.vals[idx].shape.clone();
            let data = match adj[idx].take() {
                Some(buf) => buf,
                None => vec![0.0; self.vals[idx].data.len()],
            };
            if !data.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: format!("backward adjoint of {name:?}"),
                });
            }
            out.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(Gradients(out))
    }
}

fn grad_buf<'a>(adj: &'a mut [Option<Vec<Scalar>>], id: usize, len: usize) -> &'a mut Vec<Scalar> {
    adj[id].get_or_insert_with(|| vec![0.0; len])
}

/// out[co,y,x] = bias[co] + Σ_{ci,dy,dx} in[ci,y+dy-p,x+dx-p] · ker[co,ci,dy,dx]
/// with zero padding p = (k-1)/2. The inner loop runs over contiguous rows.
fn conv2d_forward(
    input: &[Scalar],
    kernel: &[Scalar],
    bias: &[Scalar],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<Scalar> {
    let p = (k - 1) / 2;
    let grid = h * w;
    let mut out = vec![0.0; c_out * grid];
    for co in 0..c_out {
        let out_ch = &mut out[co * grid..(co + 1) * grid];
        out_ch.fill(bias[co]);
        for ci in 0..c_in {
            let in_ch = &input[ci * grid..(ci + 1) * grid];
            for dy in 0..k {
                for dx in 0..k {
                    let wgt = kernel[((co * c_in + ci) * k + dy) * k + dx];
                    // y + dy - p ∈ [0, h): y ∈ [y0, y1)
                    let y0 = p.saturating_sub(dy);
                    let y1 = (h + p - dy).min(h);
                    let x0 = p.saturating_sub(dx);
                    let x1 = (w + p - dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = y + dy - p;
                        let orow = &mut out_ch[y * w + x0..y * w + x1];
                        let irow = &in_ch[iy * w + (x0 + dx - p)..iy * w + (x1 + dx - p)];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wgt * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// d_in[ci,iy,ix] += Σ ker[co,ci,dy,dx] · d_out[co,iy-dy+p,ix-dx+p]
fn conv2d_backward_input(
    d_out: &[Scalar],
    kernel: &[Scalar],
    d_in: &mut [Scalar],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = (k - 1) / 2;
    let grid = h * w;
    for co in 0..c_out {
        let dout_ch = &d_out[co * grid..(co + 1) * grid];
        for ci in 0..c_in {
            let din_ch = &mut d_in[ci * grid..(ci + 1) * grid];
            for dy in 0..k {
                for dx in 0..k {
                    let wgt = kernel[((co * c_in + ci) * k + dy) * k + dx];
                    // oy = iy - dy + p must lie in [0, h): iy ∈ [iy_lo, iy_hi)
                    let iy_lo = dy.saturating_sub(p);
                    let iy_hi = (h + dy).saturating_sub(p).min(h);
                    let ix_lo = dx.saturating_sub(p);
                    let ix_hi = (w + dx).saturating_sub(p).min(w);
                    if ix_lo >= ix_hi {
                        continue;
                    }
                    for iy in iy_lo..iy_hi {
                        let oy = iy + p - dy;
                        let drow = &mut din_ch[iy * w + ix_lo..iy * w + ix_hi];
                        let grow = &dout_ch[oy * w + (ix_lo + p - dx)..oy * w + (ix_hi + p - dx)];
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += wgt * g;
                        }
                    }
                }
            }
        }
    }
}

/// d_ker[co,ci,dy,dx] += Σ_{y,x} d_out[co,y,x] · in[ci,y+dy-p,x+dx-p]
fn conv2d_backward_kernel(
    d_out: &[Scalar],
    input: &[Scalar],
    d_ker: &mut [Scalar],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = (k - 1) / 2;
    let grid = h * w;
    for co in 0..c_out {
        let dout_ch = &d_out[co * grid..(co + 1) * grid];
        for ci in 0..c_in {
            let in_ch = &input[ci * grid..(ci + 1) * grid];
            for dy in 0..k {
                for dx in 0..k {
                    let y0 = p.saturating_sub(dy);
                    let y1 = (h + p).saturating_sub(dy).min(h);
                    let x0 = p.saturating_sub(dx);
                    let x1 = (w + p).saturating_sub(dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + dy - p;
                        let grow = &dout_ch[y * w + x0..y * w + x1];
                        let irow = &in_ch[iy * w + (x0 + dx - p)..iy * w + (x1 + dx - p)];
                        for (g, i) in grow.iter().zip(irow) {
                            acc += g * i;
                        }
                    }
                    d_ker[((co * c_in + ci) * k + dy) * k + dx] += acc;
                }
            }
        }
    }
}
