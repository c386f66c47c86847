use super::graph::{grad_slot, Node, Op};
use super::{Graph, Tensor, Var};
use crate::error::TensorError;

fn expect_rank(op: &'static str, what: &str, shape: &[usize], rank: usize) -> Result<(), TensorError> {
    if shape.len() != rank {
        return Err(TensorError::shape(
            op,
            format!("{what} must have rank {rank}, got shape {shape:?}"),
        ));
    }
    Ok(())
}

/// Range of output positions `t` for which `t * stride + k - padding` lands
/// inside `0..len`.
fn valid_range(len: usize, out_len: usize, k: usize, padding: usize, stride: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let hi = if len + padding > k {
        ((len + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())?;
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )?;
        self.push(out, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", "lhs", ta.shape(), 2)?;
        expect_rank("matmul", "rhs", tb.shape(), 2)?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner axes differ: lhs axis 1 = {k}, rhs axis 0 = {k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        expect_rank("transpose", "input", ta.shape(), 2)?;
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::new(vec![c, r], transpose_data(ta.data(), r, c))?;
        self.push(out, Op::Transpose(a))
    }

    /// `input[T×C_in] · weight[C_in×C_out] + bias[C_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        expect_rank("linear", "input", tx.shape(), 2)?;
        expect_rank("linear", "weight", tw.shape(), 2)?;
        let (t, cin) = (tx.shape()[0], tx.shape()[1]);
        let (cin2, cout) = (tw.shape()[0], tw.shape()[1]);
        if cin != cin2 {
            return Err(TensorError::shape(
                "linear",
                format!("input axis 1 = {cin} but weight axis 0 = {cin2}"),
            ));
        }
        if tb.shape() != [cout] {
            return Err(TensorError::shape(
                "linear",
                format!("bias shape {:?}, expected [{cout}]", tb.shape()),
            ));
        }
        let mut out = Vec::with_capacity(t * cout);
        for _ in 0..t {
            out.extend_from_slice(tb.data());
        }
        matmul_acc(tx.data(), tw.data(), &mut out, t, cin, cout);
        let out = Tensor::new(vec![t, cout], out)?;
        self.push(out, Op::Linear { x, w, b })
    }

    /// 1-D cross-correlation over the time axis with zero padding.
    /// `input[C_in×T]`, `weight[C_out×C_in×K]`, `bias[C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        padding: usize,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        expect_rank("conv1d", "input", tx.shape(), 2)?;
        expect_rank("conv1d", "weight", tw.shape(), 3)?;
        let (cin, len) = (tx.shape()[0], tx.shape()[1]);
        let (cout, cin2, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if cin != cin2 {
            return Err(TensorError::shape(
                "conv1d",
                format!("input channels (axis 0) = {cin} but weight axis 1 = {cin2}"),
            ));
        }
        if tb.shape() != [cout] {
            return Err(TensorError::shape(
                "conv1d",
                format!("bias shape {:?}, expected [{cout}]", tb.shape()),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv1d", "stride must be at least 1"));
        }
        if len + 2 * padding < k {
            return Err(TensorError::shape(
                "conv1d",
                format!("time axis {len} + 2*padding {padding} shorter than kernel {k}"),
            ));
        }
        let out_len = (len + 2 * padding - k) / stride + 1;
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![0.0; cout * out_len];
        for o in 0..cout {
            let yrow = &mut out[o * out_len..(o + 1) * out_len];
            yrow.fill(tb.data()[o]);
            for i in 0..cin {
                let xrow = &xd[i * len..(i + 1) * len];
                for kk in 0..k {
                    let wv = wd[(o * cin + i) * k + kk];
                    let (lo, hi) = valid_range(len, out_len, kk, padding, stride);
                    for (t, y) in yrow.iter_mut().enumerate().take(hi).skip(lo) {
                        *y += wv * xrow[t * stride + kk - padding];
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, out_len], out)?;
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                padding,
                stride,
            },
        )
    }

    /// 2-D cross-correlation without padding.
    /// `input[C_in×H×W]`, `weight[C_out×C_in×KH×KW]`, `bias[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride_h: usize,
        stride_w: usize,
    ) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        expect_rank("conv2d", "input", tx.shape(), 3)?;
        expect_rank("conv2d", "weight", tw.shape(), 4)?;
        let (cin, h, wdt) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, cin2, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if cin != cin2 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input channels (axis 0) = {cin} but weight axis 1 = {cin2}"),
            ));
        }
        if h < kh || wdt < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!("input H×W = {h}×{wdt} smaller than kernel {kh}×{kw}"),
            ));
        }
        if tb.shape() != [cout] {
            return Err(TensorError::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{cout}]", tb.shape()),
            ));
        }
        if stride_h == 0 || stride_w == 0 {
            return Err(TensorError::shape("conv2d", "strides must be at least 1"));
        }
        let ho = (h - kh) / stride_h + 1;
        let wo = (wdt - kw) / stride_w + 1;
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            let yplane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            yplane.fill(tb.data()[o]);
            for c in 0..cin {
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = wd[((o * cin + c) * kh + i) * kw + j];
                        for r in 0..ho {
                            let xrow = &xd[(c * h + r * stride_h + i) * wdt..][..wdt];
                            let yrow = &mut yplane[r * wo..(r + 1) * wo];
                            for (q, y) in yrow.iter_mut().enumerate() {
                                *y += wv * xrow[q * stride_w + j];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, ho, wo], out)?;
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride_h,
                stride_w,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        expect_rank("softmax_rows", "input", ta.shape(), 2)?;
        let c = ta.shape()[1];
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        expect_rank("log_softmax_rows", "input", ta.shape(), 2)?;
        let c = ta.shape()[1];
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row normalization (biased variance) followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        expect_rank("layer_norm", "input", tx.shape(), 2)?;
        let c = tx.shape()[1];
        if c < 2 {
            return Err(TensorError::shape("layer_norm", "needs at least 2 columns"));
        }
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("gamma {:?} / beta {:?}, expected [{c}]", tg.shape(), tb.shape()),
            ));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            let (mean, rstd) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        expect_rank("slice_cols", "input", tx.shape(), 2)?;
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        if len == 0 || start + len > c {
            return Err(TensorError::shape(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in tx.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::shape("concat_cols", "no inputs"));
        };
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            expect_rank("concat_cols", "input", s, 2)?;
            if s[0] != rows {
                return Err(TensorError::shape(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {}", s[0]),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks `n` tensors of shape `C×T` into one `C×n×T` tensor, inserting
    /// the new axis between channels and time.
    pub fn stack_scales(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::shape("stack_scales", "no inputs"));
        };
        let shape = self.shape(first).to_vec();
        expect_rank("stack_scales", "input", &shape, 2)?;
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(TensorError::shape(
                    "stack_scales",
                    format!("{:?} vs {:?}", self.shape(p), shape),
                ));
            }
        }
        let (c, t, n) = (shape[0], shape[1], parts.len());
        let mut out = vec![0.0; c * n * t];
        for (s, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for ch in 0..c {
                out[(ch * n + s) * t..(ch * n + s + 1) * t].copy_from_slice(&src[ch * t..(ch + 1) * t]);
            }
        }
        let out = Tensor::new(vec![c, n, t], out)?;
        self.push(out, Op::StackScales(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let out = Tensor::new(shape.to_vec(), tx.data().to_vec()).map_err(|_| {
            TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", tx.shape()),
            )
        })?;
        self.push(out, Op::Reshape(x))
    }

    /// Identity on values; the backward pass drops the gradient of every row
    /// whose entry in `stopped` is true.
    pub fn grad_stop_rows(&mut self, x: Var, stopped: Vec<bool>) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if stopped.len() != tx.rows() {
            return Err(TensorError::shape(
                "grad_stop_rows",
                format!("mask length {} vs {} rows", stopped.len(), tx.rows()),
            ));
        }
        let out = tx.clone();
        self.push(out, Op::GradStopRows { x, stopped })
    }

    /// Appends a scalar node whose gradient with respect to `input` is known
    /// in closed form. Used by losses that run their own dynamic programme.
    pub(crate) fn custom_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var, TensorError> {
        debug_assert_eq!(grad.len(), self.value(input).numel());
        self.push(Tensor::scalar(value), Op::Custom { input, grad })
    }

    pub(crate) fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = grad_slot(nodes, grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * tb[i];
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ta[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                let ta = val(*a).data();
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        if ta[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    // dA = G · Bᵀ
                    let bt = transpose_data(tb.data(), k, n);
                    matmul_acc(g, &bt, ga, m, n, k);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    // dB = Aᵀ · G
                    let at = transpose_data(ta.data(), m, k);
                    matmul_acc(&at, g, gb, k, m, n);
                }
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                let (r, c) = (s[0], s[1]);
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    let gt = transpose_data(g, c, r);
                    ga.iter_mut().zip(&gt).for_each(|(x, y)| *x += y);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (t, cin, cout) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    let wt = transpose_data(tw.data(), cin, cout);
                    matmul_acc(g, &wt, gx, t, cout, cin);
                }
                if let Some(gw) = grad_slot(nodes, grads, *w) {
                    let xt = transpose_data(tx.data(), t, cin);
                    matmul_acc(&xt, g, gw, cin, t, cout);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                padding,
                stride,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let (cin, len) = (tx.shape()[0], tx.shape()[1]);
                let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                let out_len = node.value.shape()[1];
                let (p, s) = (*padding, *stride);
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for o in 0..cout {
                        let grow = &g[o * out_len..(o + 1) * out_len];
                        for i in 0..cin {
                            let gxrow = &mut gx[i * len..(i + 1) * len];
                            for kk in 0..k {
                                let wv = tw.data()[(o * cin + i) * k + kk];
                                let (lo, hi) = valid_range(len, out_len, kk, p, s);
                                for t in lo..hi {
                                    gxrow[t * s + kk - p] += wv * grow[t];
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = grad_slot(nodes, grads, *w) {
                    for o in 0..cout {
                        let grow = &g[o * out_len..(o + 1) * out_len];
                        for i in 0..cin {
                            let xrow = &tx.data()[i * len..(i + 1) * len];
                            for kk in 0..k {
                                let (lo, hi) = valid_range(len, out_len, kk, p, s);
                                let mut acc = 0.0;
                                for t in lo..hi {
                                    acc += xrow[t * s + kk - p] * grow[t];
                                }
                                gw[(o * cin + i) * k + kk] += acc;
                            }
                        }
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for (o, row) in g.chunks(out_len).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride_h,
                stride_w,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let (cin, h, wdt) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (cout, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
                let (sh, sw) = (*stride_h, *stride_w);
                let gx = grad_slot(nodes, grads, *x).map(std::mem::take);
                let gw = grad_slot(nodes, grads, *w).map(std::mem::take);
                let (mut gx, mut gw) = (gx, gw);
                for o in 0..cout {
                    let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let widx = ((o * cin + c) * kh + i) * kw + j;
                                let wv = tw.data()[widx];
                                let mut acc = 0.0;
                                for r in 0..ho {
                                    let base = (c * h + r * sh + i) * wdt;
                                    let grow = &gplane[r * wo..(r + 1) * wo];
                                    for (q, gv) in grow.iter().enumerate() {
                                        let xi = base + q * sw + j;
                                        acc += tx.data()[xi] * gv;
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xi] += wv * gv;
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(buf) = gx {
                    grads[x.0] = Some(buf);
                }
                if let Some(buf) = gw {
                    grads[w.0] = Some(buf);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for (o, plane) in g.chunks(ho * wo).enumerate() {
                        gb[o] += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = val(*x);
                let tg = val(*gamma).data();
                let c = tx.cols();
                let rows = tx.rows();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; tx.numel()];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..rows {
                    let xr = &tx.data()[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let (mean, rstd) = row_stats(xr, *eps);
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * tg[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                for (v, d) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if let Some(gv) = grad_slot(nodes, grads, v) {
                        gv.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let len = node.value.cols();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for (r, row) in g.chunks(len).enumerate() {
                        for (j, v) in row.iter().enumerate() {
                            gx[r * c + start + j] += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(gp) = grad_slot(nodes, grads, p) {
                        for (r, row) in g.chunks(total).enumerate() {
                            for j in 0..w {
                                gp[r * w + j] += row[offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::StackScales(parts) => {
                let s = node.value.shape();
                let (c, n, t) = (s[0], s[1], s[2]);
                for (k, &p) in parts.iter().enumerate() {
                    if let Some(gp) = grad_slot(nodes, grads, p) {
                        for ch in 0..c {
                            let src = &g[(ch * n + k) * t..(ch * n + k + 1) * t];
                            gp[ch * t..(ch + 1) * t]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::GradStopRows { x, stopped } => {
                let c = node.value.cols();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for (r, &stop) in stopped.iter().enumerate() {
                        if !stop {
                            for j in r * c..(r + 1) * c {
                                gx[j] += g[j];
                            }
                        }
                    }
                }
            }
            Op::Custom { input, grad } => {
                if let Some(gi) = grad_slot(nodes, grads, *input) {
                    gi.iter_mut().zip(grad).for_each(|(a, b)| *a += g[0] * b);
                }
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Numerically stable `ln Σ exp(v)`; `-inf` for an empty or all `-inf` slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
