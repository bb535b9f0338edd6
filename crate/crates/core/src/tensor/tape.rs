use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Stabilizer added under the square root of per-sample L2 norms.
pub const NORM_EPS: f32 = 1e-12;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Recip(Var),
    Sqrt(Var),
    Exp(Var),
    Tanh(Var),
    LeakyRelu(Var, f32),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvInputGrad { gy: Var, w: Var, stride: usize, pad: usize },
    ConvWeightGrad { x: Var, gy: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    SumPool2x(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    PadCols { x: Var, start: usize },
    GatherRows { table: Var, idx: Rc<[usize]> },
    ScatterRows { src: Var, idx: Rc<[usize]> },
    SumAll(Var),
    ExpandAll(Var),
    SumPerSample(Var),
    ExpandPerSample(Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumChannels(Var),
    BroadcastChannels(Var),
    LogSoftmax(Var),
    Pick { x: Var, labels: Rc<[usize]> },
    Unpick { x: Var, labels: Rc<[usize]> },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ConcatCols(a, b) => [Some(a), Some(b)],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Conv2d { x, w, .. } => [Some(x), Some(w)],
            ConvInputGrad { gy, w, .. } => [Some(gy), Some(w)],
            ConvWeightGrad { x, gy, .. } => [Some(x), Some(gy)],
            Scale(a, _) | LeakyRelu(a, _) => [Some(a), None],
            AddScalar(a) | Recip(a) | Sqrt(a) | Exp(a) | Tanh(a) | Upsample2x(a)
            | SumPool2x(a) | Reshape(a) | SumAll(a) | ExpandAll(a) | SumPerSample(a)
            | ExpandPerSample(a) | SumRows(a) | BroadcastRows(a) | SumChannels(a)
            | BroadcastChannels(a) | LogSoftmax(a) => [Some(a), None],
            SliceCols { x, .. } | PadCols { x, .. } => [Some(x), None],
            GatherRows { table, .. } => [Some(table), None],
            ScatterRows { src, .. } => [Some(src), None],
            Pick { x, .. } | Unpick { x, .. } => [Some(x), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// While recording is paused, operations still compute values but nothing
/// downstream of them requires a gradient.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::dim(format!("{what} expects a rank-4 tensor, got {s:?}"))),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(format!("{what} expects a rank-2 tensor, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    /// Runs `f` with recording paused, restoring the previous mode afterwards.
    pub fn paused<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.recording;
        self.recording = false;
        let out = f(self);
        self.recording = prev;
        out
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Graph(format!("variable {} is not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input. Parameters and inputs that will be differentiated
    /// against need `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.node(v)?.value.clone();
        Ok(self.constant(value))
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.recording
            && op
                .inputs()
                .iter()
                .flatten()
                .any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape(ta, tb, "add")?;
        let out = zip(ta, tb, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape(ta, tb, "sub")?;
        let out = zip(ta, tb, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape(ta, tb, "mul")?;
        let out = zip(ta, tb, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = map(&self.node(a)?.value, |x| x * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = map(&self.node(a)?.value, |x| x + s);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.node(a)?.value, |x| 1.0 / x);
        self.push(out, Op::Recip(a), "recip")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.node(a)?.value, f32::sqrt);
        self.push(out, Op::Sqrt(a), "sqrt")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.node(a)?.value, f32::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.node(a)?.value, f32::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    /// `x` for `x >= 0`, `slope·x` otherwise. The derivative at exactly 0 is 1.
    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!("leaky_relu slope {slope} not in (0, 1)")));
        }
        let out = map(&self.node(a)?.value, |x| if x >= 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: Var, rate: f32, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.node(a)?.value.shape().to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.uniform_f32() < rate { 0.0 } else { keep });
        let mask = self.constant(mask);
        self.mul(a, mask)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` for rank-2 tensors, where `op` transposes when its flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (ra, ca) = dims2(va, "matmul")?;
        let (rb, cb) = dims2(vb, "matmul")?;
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?}{} · {:?}{}",
                va.shape(),
                if ta { "ᵀ" } else { "" },
                vb.shape(),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0f32; m * n];
        kernels::gemm(m, ka, n, va.data(), ta, vb.data(), tb, &mut out);
        self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul { a, b, ta, tb },
            "matmul",
        )
    }

    /// `input[B,I] · weight[I,O] + bias[O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(input, weight)?;
        let (batch, out) = dims2(self.value(y), "dense")?;
        if self.node(bias)?.value.shape() != [out] {
            return Err(Error::dim(format!(
                "dense bias shape {:?} does not match output width {out}",
                self.value(bias).shape()
            )));
        }
        let b = self.broadcast_rows(bias, batch)?;
        self.add(y, b)
    }

    // ---- convolution -------------------------------------------------------

    fn conv_geom(
        x_shape: (usize, usize, usize, usize),
        w_shape: (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let (batch, in_ch, h, w) = x_shape;
        let (out_ch, w_in, kh, kw) = w_shape;
        if w_in != in_ch {
            return Err(Error::dim(format!(
                "convolution kernel expects {w_in} input channels, input has {in_ch}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!("kernel must be square and odd, got {kh}×{kw}")));
        }
        let oh = kernels::conv_out_size(h, kh, stride, pad)?;
        let ow = kernels::conv_out_size(w, kw, stride, pad)?;
        Ok(ConvGeom {
            batch,
            in_ch,
            out_ch,
            h,
            w,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Cross-correlation (no kernel flip) of `[B,Cin,H,W]` with `[Cout,Cin,K,K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (&self.node(x)?.value, &self.node(w)?.value);
        let g = Self::conv_geom(dims4(vx, "conv2d input")?, dims4(vw, "conv2d kernel")?, stride, pad)?;
        let out = kernels::conv2d(vx.data(), vw.data(), &g);
        self.push(
            Tensor {
                shape: vec![g.batch, g.out_ch, g.oh, g.ow],
                data: out,
            },
            Op::Conv2d { x, w, stride, pad },
            "conv2d",
        )
    }

    /// Gradient of `conv2d` with respect to an input of spatial size `hw`.
    pub fn conv2d_input_grad(
        &mut self,
        gy: Var,
        w: Var,
        stride: usize,
        pad: usize,
        hw: (usize, usize),
    ) -> Result<Var> {
        let (vg, vw) = (&self.node(gy)?.value, &self.node(w)?.value);
        let (batch, gch, gh, gw) = dims4(vg, "conv2d_input_grad")?;
        let wd = dims4(vw, "conv2d_input_grad kernel")?;
        if gch != wd.0 {
            return Err(Error::dim("conv2d_input_grad channel mismatch"));
        }
        let g = Self::conv_geom((batch, wd.1, hw.0, hw.1), wd, stride, pad)?;
        if (g.oh, g.ow) != (gh, gw) {
            return Err(Error::dim(format!(
                "conv2d_input_grad: gradient spatial {gh}×{gw} does not match {}×{}",
                g.oh, g.ow
            )));
        }
        let out = kernels::conv2d_input_grad(vg.data(), vw.data(), &g);
        self.push(
            Tensor {
                shape: vec![batch, g.in_ch, g.h, g.w],
                data: out,
            },
            Op::ConvInputGrad { gy, w, stride, pad },
            "conv2d_input_grad",
        )
    }

    /// Gradient of `conv2d` with respect to a `k×k` kernel.
    pub fn conv2d_weight_grad(
        &mut self,
        x: Var,
        gy: Var,
        stride: usize,
        pad: usize,
        k: usize,
    ) -> Result<Var> {
        let (vx, vg) = (&self.node(x)?.value, &self.node(gy)?.value);
        let xd = dims4(vx, "conv2d_weight_grad input")?;
        let (gb, gch, gh, gw) = dims4(vg, "conv2d_weight_grad gradient")?;
        if gb != xd.0 {
            return Err(Error::dim("conv2d_weight_grad batch mismatch"));
        }
        let g = Self::conv_geom(xd, (gch, xd.1, k, k), stride, pad)?;
        if (g.oh, g.ow) != (gh, gw) {
            return Err(Error::dim("conv2d_weight_grad spatial mismatch"));
        }
        let out = kernels::conv2d_weight_grad(vx.data(), vg.data(), &g);
        self.push(
            Tensor {
                shape: vec![g.out_ch, g.in_ch, k, k],
                data: out,
            },
            Op::ConvWeightGrad { x, gy, stride, pad },
            "conv2d_weight_grad",
        )
    }

    /// `conv2d` followed by a per-output-channel bias.
    pub fn conv2d_bias(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv2d(x, w, stride, pad)?;
        let bias = self.broadcast_channels(b, y)?;
        self.add(y, bias)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (b, c, h, w) = dims4(v, "upsample_nearest2x")?;
        let out = kernels::upsample2x(v.data(), b * c, h, w);
        self.push(
            Tensor {
                shape: vec![b, c, 2 * h, 2 * w],
                data: out,
            },
            Op::Upsample2x(x),
            "upsample_nearest2x",
        )
    }

    /// 2×2 sum pooling; the adjoint of [`Tape::upsample_nearest2x`].
    pub fn sumpool2x(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (b, c, h, w) = dims4(v, "sumpool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("sumpool2x needs even extents, got {h}×{w}")));
        }
        let out = kernels::sumpool2x(v.data(), b * c, h, w);
        self.push(
            Tensor {
                shape: vec![b, c, h / 2, w / 2],
                data: out,
            },
            Op::SumPool2x(x),
            "sumpool2x",
        )
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Flattens every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.node(x)?.value.shape().to_vec();
        let batch = *shape.first().ok_or_else(|| Error::dim("flatten of scalar"))?;
        let rest = shape[1..].iter().product();
        self.reshape(x, &[batch, rest])
    }

    /// Concatenates two `[B, ·]` tensors along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (ra, ca) = dims2(va, "concat_cols")?;
        let (rb, cb) = dims2(vb, "concat_cols")?;
        if ra != rb {
            return Err(Error::dim(format!("concat_cols row mismatch {ra} vs {rb}")));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        self.push(
            Tensor {
                shape: vec![ra, ca + cb],
                data,
            },
            Op::ConcatCols(a, b),
            "concat_cols",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (rows, cols) = dims2(v, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::dim(format!("slice_cols {start}+{len} exceeds width {cols}")));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        self.push(
            Tensor {
                shape: vec![rows, len],
                data,
            },
            Op::SliceCols { x, start },
            "slice_cols",
        )
    }

    /// Places `x` at column `start` of a zero `[B, total]` tensor.
    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (rows, cols) = dims2(v, "pad_cols")?;
        if start + cols > total {
            return Err(Error::dim(format!("pad_cols {start}+{cols} exceeds width {total}")));
        }
        let mut data = vec![0.0f32; rows * total];
        for r in 0..rows {
            data[r * total + start..r * total + start + cols]
                .copy_from_slice(&v.data()[r * cols..(r + 1) * cols]);
        }
        self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::PadCols { x, start },
            "pad_cols",
        )
    }

    /// Row lookup `table[idx[b], :]` (embedding).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let v = &self.node(table)?.value;
        let (rows, cols) = dims2(v, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::dim("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Label {
                    label: i,
                    num_classes: rows,
                });
            }
            data.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        self.push(
            Tensor {
                shape: vec![idx.len(), cols],
                data,
            },
            Op::GatherRows {
                table,
                idx: idx.into(),
            },
            "gather_rows",
        )
    }

    /// Adjoint of [`Tape::gather_rows`]: adds row `b` of `src` into row `idx[b]`.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let v = &self.node(src)?.value;
        let (n, cols) = dims2(v, "scatter_rows")?;
        if n != idx.len() {
            return Err(Error::dim("scatter_rows index count mismatch"));
        }
        let mut data = vec![0.0f32; rows * cols];
        for (b, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::Label {
                    label: i,
                    num_classes: rows,
                });
            }
            for c in 0..cols {
                data[i * cols + c] += v.data()[b * cols + c];
            }
        }
        self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ScatterRows {
                src,
                idx: idx.into(),
            },
            "scatter_rows",
        )
    }

    // ---- reductions and broadcasts ----------------------------------------

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.node(x)?.value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len() as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.node(x)?.value;
        if v.len() != 1 {
            return Err(Error::dim(format!("expand needs one element, got {:?}", v.shape())));
        }
        let out = Tensor::full(shape, v.data()[0]);
        self.push(out, Op::ExpandAll(x), "expand")
    }

    /// Sums over every non-leading axis: `[B, ...] -> [B]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        let batch = *v.shape().first().ok_or_else(|| Error::dim("sum_per_sample of scalar"))?;
        let row = v.len() / batch;
        let data = v.data().chunks(row).map(|c| c.iter().sum()).collect();
        self.push(
            Tensor {
                shape: vec![batch],
                data,
            },
            Op::SumPerSample(x),
            "sum_per_sample",
        )
    }

    /// Broadcasts `[B]` to `shape = [B, ...]`.
    pub fn expand_per_sample(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.node(x)?.value;
        if v.rank() != 1 || shape.first() != Some(&v.len()) {
            return Err(Error::dim(format!(
                "expand_per_sample {:?} -> {shape:?}",
                v.shape()
            )));
        }
        let row: usize = shape[1..].iter().product();
        let data = v
            .data()
            .iter()
            .flat_map(|&s| std::iter::repeat(s).take(row))
            .collect();
        self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::ExpandPerSample(x),
            "expand_per_sample",
        )
    }

    /// Column sums of `[B, O]`, giving `[O]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (rows, cols) = dims2(v, "sum_rows")?;
        let mut data = vec![0.0f32; cols];
        for r in 0..rows {
            for (acc, &val) in data.iter_mut().zip(&v.data()[r * cols..(r + 1) * cols]) {
                *acc += val;
            }
        }
        self.push(
            Tensor {
                shape: vec![cols],
                data,
            },
            Op::SumRows(x),
            "sum_rows",
        )
    }

    /// Repeats `[O]` as `rows` rows of `[rows, O]`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        if v.rank() != 1 {
            return Err(Error::dim(format!("broadcast_rows of {:?}", v.shape())));
        }
        let mut data = Vec::with_capacity(rows * v.len());
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        self.push(
            Tensor {
                shape: vec![rows, v.len()],
                data,
            },
            Op::BroadcastRows(x),
            "broadcast_rows",
        )
    }

    /// Per-channel sums of `[B, C, H, W]`, giving `[C]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (b, c, h, w) = dims4(v, "sum_channels")?;
        let plane = h * w;
        let mut data = vec![0.0f32; c];
        for bi in 0..b {
            for (ci, acc) in data.iter_mut().enumerate() {
                let start = (bi * c + ci) * plane;
                *acc += v.data()[start..start + plane].iter().sum::<f32>();
            }
        }
        self.push(
            Tensor {
                shape: vec![c],
                data,
            },
            Op::SumChannels(x),
            "sum_channels",
        )
    }

    /// Broadcasts a `[C]` bias to the shape of the rank-4 tensor `like`.
    pub fn broadcast_channels(&mut self, x: Var, like: Var) -> Result<Var> {
        let shape = self.node(like)?.value.shape().to_vec();
        self.broadcast_channels_to(x, &shape)
    }

    fn broadcast_channels_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.node(x)?.value;
        let &[b, c, h, w] = shape else {
            return Err(Error::dim(format!("broadcast_channels target {shape:?}")));
        };
        if v.shape() != [c] {
            return Err(Error::dim(format!(
                "channel bias {:?} does not match {c} channels",
                v.shape()
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * c * plane);
        for _ in 0..b {
            for &val in v.data() {
                data.extend(std::iter::repeat(val).take(plane));
            }
        }
        self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::BroadcastChannels(x),
            "broadcast_channels",
        )
    }

    // ---- classification ----------------------------------------------------

    /// Row-wise log-softmax of `[B, K]`, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (rows, k) = dims2(v, "log_softmax")?;
        let mut data = Vec::with_capacity(rows * k);
        for row in v.data().chunks(k) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f32>().ln();
            data.extend(row.iter().map(|&z| z - lse));
        }
        self.push(
            Tensor {
                shape: vec![rows, k],
                data,
            },
            Op::LogSoftmax(x),
            "log_softmax",
        )
    }

    /// `x[b, labels[b]]` for each row, giving `[B]`.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (rows, k) = dims2(v, "pick")?;
        if labels.len() != rows {
            return Err(Error::dim(format!("{} labels for {rows} rows", labels.len())));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Label {
                    label: l,
                    num_classes: k,
                });
            }
            data.push(v.data()[r * k + l]);
        }
        self.push(
            Tensor {
                shape: vec![rows],
                data,
            },
            Op::Pick {
                x,
                labels: labels.into(),
            },
            "pick",
        )
    }

    /// Adjoint of [`Tape::pick`]: a `[B, k]` tensor holding `x[b]` at `labels[b]`.
    pub fn unpick(&mut self, x: Var, labels: &[usize], k: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        if v.rank() != 1 || v.len() != labels.len() {
            return Err(Error::dim("unpick expects one value per label"));
        }
        let mut data = vec![0.0f32; labels.len() * k];
        for (r, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Label {
                    label: l,
                    num_classes: k,
                });
            }
            data[r * k + l] = v.data()[r];
        }
        self.push(
            Tensor {
                shape: vec![labels.len(), k],
                data,
            },
            Op::Unpick {
                x,
                labels: labels.into(),
            },
            "unpick",
        )
    }

    /// Mean over the batch of `-log softmax(logits)[b, labels[b]]`.
    pub fn sparse_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        let picked = self.pick(ls, labels)?;
        let m = self.mean(picked)?;
        self.neg(m)
    }

    /// `sqrt(Σ x² + ε)` over all non-batch axes, giving `[B]`.
    pub fn l2_norm_per_sample(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x)?;
        let s = self.sum_per_sample(sq)?;
        let s = self.add_scalar(s, NORM_EPS)?;
        self.sqrt(s)
    }

    // ---- differentiation ---------------------------------------------------

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph`, the backward computation is itself recorded, so
    /// the returned gradients can be differentiated again. Inputs that do
    /// not influence `output` get a zero gradient.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let out_node = self.node(output)?;
        if out_node.value.len() != 1 {
            return Err(Error::Graph(format!(
                "grad needs a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }
        if !out_node.requires_grad {
            return Err(Error::Graph(
                "output was not recorded on the tape with gradient tracking".into(),
            ));
        }
        for &w in wrt {
            if !self.node(w)?.requires_grad {
                return Err(Error::Graph(format!(
                    "variable {} does not require a gradient",
                    w.0
                )));
            }
        }

        let n = output.0 + 1;
        let mut dep = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                dep[w.0] = true;
            }
        }
        for i in 0..n {
            if !dep[i] && self.nodes[i].requires_grad {
                dep[i] = self.nodes[i].op.inputs().iter().flatten().any(|v| dep[v.0]);
            }
        }

        let prev = self.recording;
        self.recording = create_graph;
        let result = self.backpropagate(output, &dep);
        self.recording = prev;
        let grads = result?;

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match grads.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let zeros = Tensor::zeros(self.value(w).shape());
                    out.push(self.constant(zeros));
                }
            }
        }
        Ok(out)
    }

    /// Plain gradient values (no graph retained).
    pub fn gradients(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let vars = self.grad(output, wrt, false)?;
        Ok(vars.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn backpropagate(&mut self, output: Var, dep: &[bool]) -> Result<Vec<Option<Var>>> {
        let n = dep.len();
        let mut grads: Vec<Option<Var>> = vec![None; n];
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        grads[output.0] = Some(self.constant(seed));
        for i in (0..n).rev() {
            if !dep[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let contributions = self.backward_rule(i, g, dep)?;
            for (input, gi) in contributions {
                grads[input.0] = Some(match grads[input.0] {
                    Some(existing) => self.add(existing, gi)?,
                    None => gi,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of node `i` for the inputs in `dep`, written
    /// entirely in terms of tape operations so they are themselves differentiable.
    fn backward_rule(&mut self, i: usize, g: Var, dep: &[bool]) -> Result<Vec<(Var, Var)>> {
        let y = Var(i);
        let op = self.nodes[i].op.clone();
        let need = |v: Var| dep[v.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if need(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, s) => out.push((a, self.scale(g, s)?)),
            Op::AddScalar(a) => out.push((a, g)),
            Op::Recip(a) => {
                let y2 = self.square(y)?;
                let t = self.mul(g, y2)?;
                out.push((a, self.neg(t)?));
            }
            Op::Sqrt(a) => {
                let r = self.recip(y)?;
                let r = self.scale(r, 0.5)?;
                out.push((a, self.mul(g, r)?));
            }
            Op::Exp(a) => out.push((a, self.mul(g, y)?)),
            Op::Tanh(a) => {
                let y2 = self.square(y)?;
                let d = self.scale(y2, -1.0)?;
                let d = self.add_scalar(d, 1.0)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::LeakyRelu(a, slope) => {
                let mask = map(self.value(a), |x| if x >= 0.0 { 1.0 } else { slope });
                let mask = self.constant(mask);
                out.push((a, self.mul(g, mask)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                if need(a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul_t(g, b, false, true)?,
                        (false, true) => self.matmul_t(g, b, false, false)?,
                        (true, false) => self.matmul_t(b, g, false, true)?,
                        (true, true) => self.matmul_t(b, g, true, true)?,
                    };
                    out.push((a, ga));
                }
                if need(b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul_t(a, g, true, false)?,
                        (false, true) => self.matmul_t(g, a, true, false)?,
                        (true, false) => self.matmul_t(a, g, false, false)?,
                        (true, true) => self.matmul_t(g, a, true, true)?,
                    };
                    out.push((b, gb));
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                if need(x) {
                    let (_, _, h, wd) = dims4(self.value(x), "conv2d")?;
                    out.push((x, self.conv2d_input_grad(g, w, stride, pad, (h, wd))?));
                }
                if need(w) {
                    let k = self.value(w).shape()[2];
                    out.push((w, self.conv2d_weight_grad(x, g, stride, pad, k)?));
                }
            }
            Op::ConvInputGrad { gy, w, stride, pad } => {
                if need(gy) {
                    out.push((gy, self.conv2d(g, w, stride, pad)?));
                }
                if need(w) {
                    let k = self.value(w).shape()[2];
                    out.push((w, self.conv2d_weight_grad(g, gy, stride, pad, k)?));
                }
            }
            Op::ConvWeightGrad { x, gy, stride, pad } => {
                if need(x) {
                    let (_, _, h, wd) = dims4(self.value(x), "conv2d_weight_grad")?;
                    out.push((x, self.conv2d_input_grad(gy, g, stride, pad, (h, wd))?));
                }
                if need(gy) {
                    out.push((gy, self.conv2d(x, g, stride, pad)?));
                }
            }
            Op::Upsample2x(a) => out.push((a, self.sumpool2x(g)?)),
            Op::SumPool2x(a) => out.push((a, self.upsample_nearest2x(g)?)),
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.reshape(g, &shape)?));
            }
            Op::ConcatCols(a, b) => {
                let wa = self.value(a).shape()[1];
                let wb = self.value(b).shape()[1];
                if need(a) {
                    out.push((a, self.slice_cols(g, 0, wa)?));
                }
                if need(b) {
                    out.push((b, self.slice_cols(g, wa, wb)?));
                }
            }
            Op::SliceCols { x, start } => {
                let total = self.value(x).shape()[1];
                out.push((x, self.pad_cols(g, start, total)?));
            }
            Op::PadCols { x, start } => {
                let len = self.value(x).shape()[1];
                out.push((x, self.slice_cols(g, start, len)?));
            }
            Op::GatherRows { table, idx } => {
                let rows = self.value(table).shape()[0];
                out.push((table, self.scatter_rows(g, &idx, rows)?));
            }
            Op::ScatterRows { src, idx } => out.push((src, self.gather_rows(g, &idx)?)),
            Op::SumAll(a) => {
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.expand(g, &shape)?));
            }
            Op::ExpandAll(a) => {
                let s = self.sum(g)?;
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.reshape(s, &shape)?));
            }
            Op::SumPerSample(a) => {
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.expand_per_sample(g, &shape)?));
            }
            Op::ExpandPerSample(a) => out.push((a, self.sum_per_sample(g)?)),
            Op::SumRows(a) => {
                let rows = self.value(a).shape()[0];
                out.push((a, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(a) => out.push((a, self.sum_rows(g)?)),
            Op::SumChannels(a) => {
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.broadcast_channels_to(g, &shape)?));
            }
            Op::BroadcastChannels(a) => out.push((a, self.sum_channels(g)?)),
            Op::LogSoftmax(a) => {
                let shape = self.value(a).shape().to_vec();
                let p = self.exp(y)?;
                let gs = self.sum_per_sample(g)?;
                let gs = self.expand_per_sample(gs, &shape)?;
                let t = self.mul(p, gs)?;
                out.push((a, self.sub(g, t)?));
            }
            Op::Pick { x, labels } => {
                let k = self.value(x).shape()[1];
                out.push((x, self.unpick(g, &labels, k)?));
            }
            Op::Unpick { x, labels } => out.push((x, self.pick(g, &labels)?)),
        }
        Ok(out)
    }
}
