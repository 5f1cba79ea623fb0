//! Reverse-mode automatic differentiation on a flat tape of `Tensor` ops.
//!
//! The set of operations is exactly what the encoder, the drop-context
//! network, and the losses need: matmul, attention-shaped reshuffles
//! (slice / concat / gather), row softmaxes, layer norm, pairwise squared
//! distances, and a handful of pointwise maps. Each op stores its parents
//! and enough forward state for the vector-Jacobian product.
//!
//! Graphs are built per evaluation (define-by-run). Parameters enter as
//! leaves tagged with an external slot index so callers can collect
//! gradients back into their parameter store after `backward`.

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// matrix + row vector broadcast over rows
    AddRowVec(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// layer norm over features per row: (input, gain, shift)
    LayerNorm(Var, Var, Var),
    Tanh(Var),
    Abs(Var),
    Ln(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    ClampMax(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    /// tensor scaled by a 1x1 graph scalar
    ScaleBy(Var, Var),
    CdistSq(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    /// external parameter slot, for gradient collection
    param_slot: Option<usize>,
}

const LN_EPS: f64 = 1e-6;

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, param_slot: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves ----

    /// Constant input; receives no gradient slot.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter leaf tagged with an external slot index.
    pub fn param(&mut self, t: Tensor, slot: usize) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].param_slot = Some(slot);
        v
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let mut out = ta.clone();
        for (o, x) in out.data.iter_mut().zip(tb.data.iter()) {
            *o += x;
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let mut out = ta.clone();
        for (o, x) in out.data.iter_mut().zip(tb.data.iter()) {
            *o -= x;
        }
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let mut out = ta.clone();
        for (o, x) in out.data.iter_mut().zip(tb.data.iter()) {
            *o *= x;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "div shape mismatch");
        let mut out = ta.clone();
        for (o, x) in out.data.iter_mut().zip(tb.data.iter()) {
            *o /= x;
        }
        self.push(out, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.scale_inplace(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v += s;
        }
        self.push(out, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// matrix (r x c) + row vector (1 x c), broadcast over rows.
    pub fn add_rowvec(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(tb.rows, 1, "bias must be a row vector");
        assert_eq!(ta.cols, tb.cols, "bias width mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += tb.data[c];
            }
        }
        self.push(out, Op::AddRowVec(a, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        assert!(start < end && end <= ta.rows, "slice_rows out of range");
        let cols = ta.cols;
        let out = Tensor::from_vec(end - start, cols, ta.data[start * cols..end * cols].to_vec());
        self.push(out, Op::SliceRows(a, start, end))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols, cols, "concat_rows width mismatch");
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows;
        let total_cols: usize = parts.iter().map(|&p| self.nodes[p.0].value.cols).sum();
        let mut out = Tensor::zeros(rows, total_cols);
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                for c in 0..t.cols {
                    out.data[r * total_cols + offset + c] = t.data[r * t.cols + c];
                }
            }
            offset += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let ta = &self.nodes[a.0].value;
        let cols = ta.cols;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < ta.rows, "gather_rows index out of range");
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::from_vec(indices.len(), cols, data);
        self.push(out, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows_value(&self.nodes[a.0].value);
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mut out = ta.clone();
        for r in 0..ta.rows {
            let row = &ta.data[r * ta.cols..(r + 1) * ta.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for c in 0..ta.cols {
                out.data[r * ta.cols + c] = row[c] - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row layer norm with learned gain/shift (both 1 x cols).
    pub fn layer_norm(&mut self, a: Var, gain: Var, shift: Var) -> Var {
        let (ta, tg, ts) = (
            &self.nodes[a.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[shift.0].value,
        );
        assert_eq!(tg.shape(), (1, ta.cols), "layer_norm gain shape");
        assert_eq!(ts.shape(), (1, ta.cols), "layer_norm shift shape");
        let mut out = ta.clone();
        let n = ta.cols as f64;
        for r in 0..ta.rows {
            let row = &ta.data[r * ta.cols..(r + 1) * ta.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..ta.cols {
                let xhat = (row[c] - mean) * inv_std;
                out.data[r * ta.cols + c] = tg.data[c] * xhat + ts.data[c];
            }
        }
        self.push(out, Op::LayerNorm(a, gain, shift))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = v.abs();
        }
        self.push(out, Op::Abs(a))
    }

    /// Natural log; inputs must be strictly positive by construction.
    pub fn ln(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            debug_assert!(*v > 0.0, "ln of non-positive value {v}");
            *v = v.ln();
        }
        self.push(out, Op::Ln(a))
    }

    /// Square root with a zero-gradient guard at exactly zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = v.max(0.0).sqrt();
        }
        self.push(out, Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = v.max(floor);
        }
        self.push(out, Op::ClampMin(a, floor))
    }

    pub fn clamp_max(&mut self, a: Var, ceil: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = v.min(ceil);
        }
        self.push(out, Op::ClampMax(a, ceil))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column means: T x e -> 1 x e.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for c in 0..t.cols {
                out.data[c] += t.data[r * t.cols + c];
            }
        }
        out.scale_inplace(1.0 / t.rows as f64);
        self.push(out, Op::MeanRows(a))
    }

    /// Multiply a tensor by a 1x1 graph scalar.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.item();
        let mut out = self.nodes[a.0].value.clone();
        out.scale_inplace(sv);
        self.push(out, Op::ScaleBy(a, s))
    }

    /// Pairwise squared distances between rows: (Ta x e, Tb x e) -> Ta x Tb.
    pub fn cdist_sq(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.cdist_sq(&self.nodes[b.0].value);
        self.push(out, Op::CdistSq(a, b))
    }

    // ---- backward ----

    /// Reverse pass from a scalar root. Returns per-node gradients; use
    /// [`Tape::grads_by_slot`] to collect parameter gradients.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // re-store: callers may want intermediate grads too
            let gi = g.clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &gi);
                    accumulate(&mut grads, *b, &gi);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &gi);
                    let mut neg = gi.clone();
                    neg.scale_inplace(-1.0);
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let mut ga = gi.clone();
                    for (v, x) in ga.data.iter_mut().zip(self.nodes[b.0].value.data.iter()) {
                        *v *= x;
                    }
                    let mut gb = gi.clone();
                    for (v, x) in gb.data.iter_mut().zip(self.nodes[a.0].value.data.iter()) {
                        *v *= x;
                    }
                    accumulate(&mut grads, a, &ga);
                    accumulate(&mut grads, b, &gb);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let bt = &self.nodes[b.0].value;
                    let at = &self.nodes[a.0].value;
                    let mut ga = gi.clone();
                    for (v, x) in ga.data.iter_mut().zip(bt.data.iter()) {
                        *v /= x;
                    }
                    let mut gb = gi.clone();
                    for i in 0..gb.data.len() {
                        gb.data[i] *= -at.data[i] / (bt.data[i] * bt.data[i]);
                    }
                    accumulate(&mut grads, a, &ga);
                    accumulate(&mut grads, b, &gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = gi.clone();
                    ga.scale_inplace(*s);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &gi),
                Op::AddRowVec(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    accumulate(&mut grads, a, &gi);
                    let mut gb = Tensor::zeros(1, gi.cols);
                    for r in 0..gi.rows {
                        for c in 0..gi.cols {
                            gb.data[c] += gi.data[r * gi.cols + c];
                        }
                    }
                    accumulate(&mut grads, bias, &gb);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bt = self.nodes[b.0].value.transpose();
                    let ga = gi.matmul(&bt);
                    let at = self.nodes[a.0].value.transpose();
                    let gb = at.matmul(&gi);
                    accumulate(&mut grads, a, &ga);
                    accumulate(&mut grads, b, &gb);
                }
                Op::Transpose(a) => {
                    let ga = gi.transpose();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SliceRows(a, start, _end) => {
                    let (a, start) = (*a, *start);
                    let ta = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    ga.data[start * ta.cols..start * ta.cols + gi.data.len()]
                        .copy_from_slice(&gi.data);
                    accumulate(&mut grads, a, &ga);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let cols = gi.cols;
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.rows;
                        let gp = Tensor::from_vec(
                            rows,
                            cols,
                            gi.data[offset * cols..(offset + rows) * cols].to_vec(),
                        );
                        offset += rows;
                        accumulate(&mut grads, p, &gp);
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let rows = gi.rows;
                    let total = gi.cols;
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.cols;
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gp.data[r * cols + c] = gi.data[r * total + offset + c];
                            }
                        }
                        offset += cols;
                        accumulate(&mut grads, p, &gp);
                    }
                }
                Op::GatherRows(a, indices) => {
                    let (a, indices) = (*a, indices.clone());
                    let ta = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for c in 0..ta.cols {
                            ga.data[src_r * ta.cols + c] += gi.data[out_r * ta.cols + c];
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = &self.nodes[idx].value;
                    let mut ga = gi.clone();
                    for r in 0..y.rows {
                        let yr = &y.data[r * y.cols..(r + 1) * y.cols];
                        let gr = &mut ga.data[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for (g, y) in gr.iter_mut().zip(yr.iter()) {
                            *g = y * (*g - dot);
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let soft = softmax_rows_value(x);
                    let mut ga = gi.clone();
                    for r in 0..x.rows {
                        let gr = &mut ga.data[r * x.cols..(r + 1) * x.cols];
                        let sr = &soft.data[r * x.cols..(r + 1) * x.cols];
                        let gsum: f64 = gr.iter().sum();
                        for (g, s) in gr.iter_mut().zip(sr.iter()) {
                            *g -= s * gsum;
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::LayerNorm(a, gain, shift) => {
                    let (a, gain, shift) = (*a, *gain, *shift);
                    let x = &self.nodes[a.0].value;
                    let tg = &self.nodes[gain.0].value;
                    let n = x.cols as f64;
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    let mut ggain = Tensor::zeros(1, x.cols);
                    let mut gshift = Tensor::zeros(1, x.cols);
                    for r in 0..x.rows {
                        let row = &x.data[r * x.cols..(r + 1) * x.cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv_std = 1.0 / (var + LN_EPS).sqrt();
                        let gr = &gi.data[r * x.cols..(r + 1) * x.cols];
                        // xhat and the two row reductions
                        let mut sum_gxh = 0.0;
                        let mut sum_gxh_xhat = 0.0;
                        let mut xhat = vec![0.0; x.cols];
                        for c in 0..x.cols {
                            xhat[c] = (row[c] - mean) * inv_std;
                            let gxh = gr[c] * tg.data[c];
                            sum_gxh += gxh;
                            sum_gxh_xhat += gxh * xhat[c];
                            ggain.data[c] += gr[c] * xhat[c];
                            gshift.data[c] += gr[c];
                        }
                        for c in 0..x.cols {
                            let gxh = gr[c] * tg.data[c];
                            ga.data[r * x.cols + c] =
                                inv_std * (gxh - sum_gxh / n - xhat[c] * sum_gxh_xhat / n);
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                    accumulate(&mut grads, gain, &ggain);
                    accumulate(&mut grads, shift, &gshift);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let y = &self.nodes[idx].value;
                    let mut ga = gi.clone();
                    for (g, y) in ga.data.iter_mut().zip(y.data.iter()) {
                        *g *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::Abs(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let mut ga = gi.clone();
                    for (g, x) in ga.data.iter_mut().zip(x.data.iter()) {
                        *g *= if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let mut ga = gi.clone();
                    for (g, x) in ga.data.iter_mut().zip(x.data.iter()) {
                        *g /= x;
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let y = &self.nodes[idx].value;
                    let mut ga = gi.clone();
                    for (g, y) in ga.data.iter_mut().zip(y.data.iter()) {
                        *g = if *y > 0.0 { *g / (2.0 * y) } else { 0.0 };
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::ClampMin(a, floor) => {
                    let (a, floor) = (*a, *floor);
                    let x = &self.nodes[a.0].value;
                    let mut ga = gi.clone();
                    for (g, x) in ga.data.iter_mut().zip(x.data.iter()) {
                        if *x <= floor {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::ClampMax(a, ceil) => {
                    let (a, ceil) = (*a, *ceil);
                    let x = &self.nodes[a.0].value;
                    let mut ga = gi.clone();
                    for (g, x) in ga.data.iter_mut().zip(x.data.iter()) {
                        if *x >= ceil {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let ta = &self.nodes[a.0].value;
                    let ga = Tensor::filled(ta.rows, ta.cols, gi.item());
                    accumulate(&mut grads, a, &ga);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let ta = &self.nodes[a.0].value;
                    let ga = Tensor::filled(ta.rows, ta.cols, gi.item() / ta.data.len() as f64);
                    accumulate(&mut grads, a, &ga);
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let ta = &self.nodes[a.0].value;
                    let scale = 1.0 / ta.rows as f64;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        for c in 0..ta.cols {
                            ga.data[r * ta.cols + c] = gi.data[c] * scale;
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::ScaleBy(a, s) => {
                    let (a, s) = (*a, *s);
                    let sv = self.nodes[s.0].value.item();
                    let mut ga = gi.clone();
                    ga.scale_inplace(sv);
                    accumulate(&mut grads, a, &ga);
                    let dot: f64 = gi
                        .data
                        .iter()
                        .zip(self.nodes[a.0].value.data.iter())
                        .map(|(g, x)| g * x)
                        .sum();
                    accumulate(&mut grads, s, &Tensor::scalar(dot));
                }
                Op::CdistSq(a, b) => {
                    let (a, b) = (*a, *b);
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    for i in 0..ta.rows {
                        for j in 0..tb.rows {
                            let g = gi.data[i * tb.rows + j];
                            if g == 0.0 {
                                continue;
                            }
                            for c in 0..ta.cols {
                                let d = ta.data[i * ta.cols + c] - tb.data[j * tb.cols + c];
                                ga.data[i * ta.cols + c] += 2.0 * g * d;
                                gb.data[j * tb.cols + c] -= 2.0 * g * d;
                            }
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                    accumulate(&mut grads, b, &gb);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn softmax_rows_value(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_inplace(g),
        slot => *slot = Some(g.clone()),
    }
}

/// Gradients resulting from a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Collect gradients of parameter leaves into per-slot tensors.
    /// Slots never touched by the graph come back as `None`.
    pub fn by_slot(&self, tape: &Tape, n_slots: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_slots).map(|_| None).collect();
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let Some(slot) = node.param_slot {
                if let Some(g) = &self.grads[idx] {
                    match &mut out[slot] {
                        Some(acc) => acc.add_inplace(g),
                        dest => *dest = Some(g.clone()),
                    }
                }
            }
        }
        out
    }
}

/// Central finite-difference gradient of `f` at `point`.
///
/// Test-side oracle for every gradient check in the crate; deliberately
/// independent of the tape machinery above.
pub fn finite_difference<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let fp = f(&x);
        x[i] = point[i] - h;
        let fm = f(&x);
        x[i] = point[i];
        grads.push((fp - fm) / (2.0 * h));
    }
    grads
}

/// Relative L2 error between two gradient vectors.
pub fn gradient_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in analytic.iter().zip(numeric.iter()) {
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Build a scalar from a parameter vector through a mix of tape ops and
    /// compare the tape gradient against finite differences.
    fn check_composite(seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let n = 12;
        let theta: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();

        let eval = |p: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let a = tape.param(Tensor::from_vec(3, 2, p[0..6].to_vec()), 0);
            let b = tape.param(Tensor::from_vec(2, 3, p[6..12].to_vec()), 1);
            let m = tape.matmul(a, b); // 3x3
            let sm = tape.softmax_rows(m);
            let lsm = tape.log_softmax_rows(m);
            let tanh = tape.tanh(m);
            let d = tape.cdist_sq(sm, tanh);
            let part = tape.slice_rows(d, 0, 2);
            let joined = tape.concat_rows(&[part, d]);
            let gathered = tape.gather_rows(joined, &[0, 2, 4]);
            let shifted = tape.add_scalar(gathered, 1.0);
            let logged = tape.ln(shifted);
            let s1 = tape.mean(logged);
            let s2 = tape.sum(lsm);
            let s2s = tape.scale(s2, 0.01);
            let total = tape.add(s1, s2s);
            let loss = tape.clamp_min(total, -10.0);
            let v = tape.value(loss).item();
            let grads = tape.backward(loss);
            let by_slot = grads.by_slot(&tape, 2);
            let mut flat = Vec::new();
            for g in by_slot {
                flat.extend(g.expect("both params used").data);
            }
            (v, Some(flat))
        };

        let (_, analytic) = eval(&theta);
        let numeric = finite_difference(|p| eval(p).0, &theta, 1e-6);
        gradient_rel_error(&analytic.unwrap(), &numeric)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        for seed in 0..5 {
            let err = check_composite(seed);
            assert!(err < 1e-7, "seed {seed}: rel error {err}");
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = Rng::new(9);
        let theta: Vec<f64> = (0..8 + 4 + 4).map(|_| rng.next_gaussian()).collect();
        let eval = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::from_vec(2, 4, p[0..8].to_vec()), 0);
            let g = tape.param(Tensor::from_vec(1, 4, p[8..12].to_vec()), 1);
            let b = tape.param(Tensor::from_vec(1, 4, p[12..16].to_vec()), 2);
            let y = tape.layer_norm(x, g, b);
            let sq = tape.mul(y, y);
            let loss = tape.sum(sq);
            let v = tape.value(loss).item();
            let grads = tape.backward(loss);
            let mut flat = Vec::new();
            for g in grads.by_slot(&tape, 3) {
                flat.extend(g.unwrap().data);
            }
            (v, flat)
        };
        let (_, analytic) = eval(&theta);
        let numeric = finite_difference(|p| eval(p).0, &theta, 1e-6);
        let err = gradient_rel_error(&analytic, &numeric);
        assert!(err < 1e-7, "rel error {err}");
    }

    #[test]
    fn div_scaleby_meanrows_gradients() {
        let mut rng = Rng::new(21);
        let theta: Vec<f64> = (0..9).map(|_| rng.next_gaussian() + 3.0).collect();
        let eval = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::from_vec(2, 4, p[0..8].to_vec()), 0);
            let s = tape.param(Tensor::scalar(p[8]), 1);
            let m = tape.mean_rows(x); // 1x4
            let top = tape.slice_rows(x, 0, 1);
            let bot = tape.slice_rows(x, 1, 2);
            let q = tape.div(top, bot);
            let scaled = tape.scale_by(q, s);
            let joined = tape.concat_cols(&[scaled, m]);
            let sq = tape.mul(joined, joined);
            let total = tape.sum(sq);
            let root = tape.sqrt(total);
            let v = tape.value(root).item();
            let grads = tape.backward(root);
            let mut flat = Vec::new();
            for g in grads.by_slot(&tape, 2) {
                flat.extend(g.unwrap().data);
            }
            (v, flat)
        };
        let (_, analytic) = eval(&theta);
        let numeric = finite_difference(|p| eval(p).0, &theta, 1e-6);
        let err = gradient_rel_error(&analytic, &numeric);
        assert!(err < 1e-7, "rel error {err}");
    }

    #[test]
    fn reused_node_accumulates() {
        // y = x*x + x ; dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0), 0);
        let sq = tape.mul(x, x);
        let y = tape.add(sq, x);
        let grads = tape.backward(y);
        let gx = grads.by_slot(&tape, 1)[0].clone().unwrap();
        assert_eq!(gx.item(), 7.0);
    }

    #[test]
    fn untouched_slot_is_none() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0), 0);
        let _unused = tape.param(Tensor::scalar(5.0), 1);
        let y = tape.mul(x, x);
        let grads = tape.backward(y);
        let by_slot = grads.by_slot(&tape, 2);
        assert!(by_slot[0].is_some());
        assert!(by_slot[1].is_none());
    }
}
