//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every operation records its output value and the handles of its inputs on
//! a [`Tape`]. [`Tape::gradients`] walks the record backwards once and
//! accumulates exact gradients into a [`GradRecord`]. Row 0 of every matrix is
//! a batch element; the primitives below broadcast over that leading axis.

use ndarray::{s, Array2, Axis, Zip};

use super::params::{GradRecord, Matrix, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial layout of a valid (unpadded) strided 2-D cross-correlation.
///
/// Rows are laid out channel-major, then row-major within each channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidInput("conv kernel and stride must be positive".into()));
        }
        if self.in_h < self.kernel || self.in_w < self.kernel {
            return Err(shape_err(
                "conv2d",
                format!("spatial dims >= kernel {}", self.kernel),
                format!("{}x{}", self.in_h, self.in_w),
            ));
        }
        Ok(())
    }

    /// Unfold one input row into a `[positions × patch]` matrix.
    fn im2col(&self, input: ndarray::ArrayView1<f64>) -> Matrix {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let mut cols = Matrix::zeros((oh * ow, self.patch_len()));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                let mut j = 0;
                for c in 0..self.in_channels {
                    let base = c * self.in_h * self.in_w;
                    for ky in 0..k {
                        let off = base + (oy * self.stride + ky) * self.in_w + ox * self.stride;
                        for kx in 0..k {
                            row[j] = input[off + kx];
                            j += 1;
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &Matrix, mut out: ndarray::ArrayViewMut1<f64>) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = cols.row(oy * ow + ox);
                let mut j = 0;
                for c in 0..self.in_channels {
                    let base = c * self.in_h * self.in_w;
                    for ky in 0..k {
                        let off = base + (oy * self.stride + ky) * self.in_w + ox * self.stride;
                        for kx in 0..k {
                            out[off + kx] += row[j];
                            j += 1;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    LnFloor(Var, f64),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    LogSoftmax(Var),
    MaskedSoftmax(Var),
    LogSumExp(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::LnFloor(..) => "ln",
            Op::Square(..) => "square",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum_all",
            Op::SumCols(..) => "sum_cols",
            Op::SumRows(..) => "sum_rows",
            Op::LogSoftmax(..) => "log_softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
///
/// The tape borrows the parameter store immutably, so many tapes may run
/// against the same parameters at once.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::ConcatCols(vs) => vs.iter().any(|v| self.nodes[v.0].needs_grad),
            Op::Conv2d {
                input, kernel, bias, ..
            } => [input, kernel, bias].iter().any(|v| self.nodes[v.0].needs_grad),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::LnFloor(a, _)
            | Op::Square(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::SumRows(a)
            | Op::LogSoftmax(a)
            | Op::MaskedSoftmax(a)
            | Op::LogSumExp(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return Err(shape_err(
                "matmul",
                format!("[{ra}x{ca}]·[{ca}x_]"),
                format!("[{rb}x{cb}]"),
            ));
        }
        let out = self.value(a).dot(self.value(b));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a) / self.value(b);
        Ok(self.push(out, Op::Div(a, b)))
    }

    /// `[m×n] + [1×n]`, broadcasting the row over the batch.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(shape_err(
                "add_row",
                format!("[1x{n}]"),
                format!("{:?}", self.shape(row)),
            ));
        }
        let out = self.value(a) + self.value(row);
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `[m×n] ⊙ [m×1]`, broadcasting the column across features.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, _) = self.shape(a);
        if self.shape(col) != (m, 1) {
            return Err(shape_err(
                "mul_col",
                format!("[{m}x1]"),
                format!("{:?}", self.shape(col)),
            ));
        }
        let out = self.value(a) * self.value(col);
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(floor).ln());
        self.push(out, Op::LnFloor(a, floor))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidInput("concat_cols of zero parts".into()));
        };
        let rows = self.shape(*first).0;
        if let Some(bad) = parts.iter().find(|v| self.shape(**v).0 != rows) {
            return Err(shape_err(
                "concat_cols",
                format!("{rows} rows"),
                format!("{:?}", self.shape(*bad)),
            ));
        }
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, n) = self.shape(a);
        if start + len > n {
            return Err(shape_err(
                "slice_cols",
                format!("cols {start}..{} within {n}", start + len),
                n,
            ));
        }
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Row gather: output row `i` is input row `indices[i]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, _) = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("row index < {m}"), bad));
        }
        let out = self.value(a).select(Axis(0), indices);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec())))
    }

    /// Row-major reshape preserving element order.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m * n != rows * cols {
            return Err(shape_err(
                "reshape",
                format!("{} elements", m * n),
                format!("[{rows}x{cols}]"),
            ));
        }
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("element count checked");
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    /// Sum of each row, `[m×n] → [m×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    /// Sum over the batch, `[m×n] → [1×n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumRows(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let lse = logsumexp(row.iter().copied());
            row.mapv_inplace(|x| x - lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let l = self.log_softmax(a);
        self.exp(l)
    }

    /// Row-wise softmax restricted to entries where `mask` is nonzero.
    /// Rows with no unmasked entry produce all-zero weights.
    pub fn masked_softmax(&mut self, a: Var, mask: &Matrix) -> Result<Var> {
        if mask.dim() != self.shape(a) {
            return Err(shape_err(
                "masked_softmax",
                format!("{:?}", self.shape(a)),
                format!("{:?}", mask.dim()),
            ));
        }
        let mut out = self.value(a).clone();
        for (mut row, mrow) in out.rows_mut().into_iter().zip(mask.rows()) {
            let active = row.iter().zip(mrow.iter()).filter(|(_, m)| **m != 0.0).map(|(x, _)| *x);
            let lse = logsumexp(active);
            for (x, m) in row.iter_mut().zip(mrow.iter()) {
                *x = if *m != 0.0 && lse.is_finite() {
                    (*x - lse).exp()
                } else {
                    0.0
                };
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax(a)))
    }

    /// Row-wise log-sum-exp, `[m×n] → [m×1]`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .rows()
            .into_iter()
            .map(|r| logsumexp(r.iter().copied()))
            .collect::<Vec<_>>();
        let m = out.len();
        let out = Array2::from_shape_vec((m, 1), out).expect("one value per row");
        self.push(out, Op::LogSumExp(a))
    }

    /// Valid strided cross-correlation plus per-channel bias.
    ///
    /// `input` is `[B × C·H·W]`, `kernel` is `[OC × C·k·k]`, `bias` is `[1 × OC]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        geom.validate()?;
        let (b, len) = self.shape(input);
        if len != geom.in_len() {
            return Err(shape_err("conv2d", format!("input width {}", geom.in_len()), len));
        }
        if self.shape(kernel) != (geom.out_channels, geom.patch_len()) {
            return Err(shape_err(
                "conv2d",
                format!("kernel [{}x{}]", geom.out_channels, geom.patch_len()),
                format!("{:?}", self.shape(kernel)),
            ));
        }
        if self.shape(bias) != (1, geom.out_channels) {
            return Err(shape_err(
                "conv2d",
                format!("bias [1x{}]", geom.out_channels),
                format!("{:?}", self.shape(bias)),
            ));
        }
        let positions = geom.out_h() * geom.out_w();
        let mut out = Matrix::zeros((b, geom.out_len()));
        {
            let x = self.value(input);
            let k = self.value(kernel);
            let bias_v = self.value(bias);
            for (row_in, mut row_out) in x.rows().into_iter().zip(out.rows_mut()) {
                let cols = geom.im2col(row_in);
                let res = cols.dot(&k.t());
                for oc in 0..geom.out_channels {
                    let bv = bias_v[[0, oc]];
                    for p in 0..positions {
                        row_out[oc * positions + p] = res[[p, oc]] + bv;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to every
    /// parameter used on this tape. Parameters not reachable from the loss get
    /// exactly zero.
    pub fn gradients(&self, loss: Var) -> Result<GradRecord> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("gradients", "[1x1] loss", format!("{:?}", self.shape(loss))));
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        let mut record = GradRecord::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            self.backprop(node, g, &mut grads, &mut record);
        }
        Ok(record)
    }

    fn backprop(&self, node: &Node, g: Matrix, grads: &mut [Option<Matrix>], record: &mut GradRecord) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Matrix| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Constant => {}
            Op::Param(id) => *record.get_mut(*id) += &g,
            Op::MatMul(a, b) => {
                if nodes[a.0].needs_grad {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if nodes[b.0].needs_grad {
                    acc(*b, val(*a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                acc(*b, -&g);
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                acc(*a, &g * val(*b));
                acc(*b, &g * val(*a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, &g / bv);
                let mut db = Matrix::zeros(g.dim());
                Zip::from(&mut db)
                    .and(&g)
                    .and(val(*a))
                    .and(bv)
                    .for_each(|d, &g, &a, &b| *d = -g * a / (b * b));
                acc(*b, db);
            }
            Op::AddRow(a, row) => {
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*a, g);
            }
            Op::MulCol(a, col) => {
                let dcol = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, &g * val(*col));
                acc(*col, dcol);
            }
            Op::Scale(a, f) => acc(*a, g * *f),
            Op::Offset(a) => acc(*a, g),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g;
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let mut d = g;
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = g;
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::LnFloor(a, floor) => {
                let mut d = g;
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    *d = if x > *floor { *d / x } else { 0.0 };
                });
                acc(*a, d);
            }
            Op::Square(a) => {
                let mut d = g;
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= 2.0 * x);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = nodes[p.0].value.ncols();
                    acc(*p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Matrix::zeros(val(*a).dim());
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(&g);
                acc(*a, d);
            }
            Op::GatherRows(a, indices) => {
                let mut d = Matrix::zeros(val(*a).dim());
                for (i, &src) in indices.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(i);
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let dim = val(*a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                acc(*a, Array2::from_shape_vec(dim, flat).expect("same element count"));
            }
            Op::SumAll(a) => acc(*a, Matrix::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::SumCols(a) => {
                let dim = val(*a).dim();
                acc(*a, g.broadcast(dim).expect("column broadcast").to_owned());
            }
            Op::SumRows(a) => {
                let dim = val(*a).dim();
                acc(*a, g.broadcast(dim).expect("row broadcast").to_owned());
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut d = g;
                Zip::from(&mut d)
                    .and(y)
                    .and_broadcast(&gsum)
                    .for_each(|d, &y, &s| *d -= y.exp() * s);
                acc(*a, d);
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut d = g;
                Zip::from(&mut d)
                    .and(y)
                    .and_broadcast(&dot)
                    .for_each(|d, &y, &s| *d = y * (*d - s));
                acc(*a, d);
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = Matrix::zeros(x.dim());
                Zip::from(&mut d)
                    .and(x)
                    .and_broadcast(y)
                    .and_broadcast(&g)
                    .for_each(|d, &x, &y, &g| *d = g * (x - y).exp());
                acc(*a, d);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let positions = geom.out_h() * geom.out_w();
                let x = val(*input);
                let k = val(*kernel);
                let mut dk = Matrix::zeros(k.dim());
                let mut dx = Matrix::zeros(x.dim());
                let mut db = Matrix::zeros((1, geom.out_channels));
                let need_x = nodes[input.0].needs_grad;
                for (b, grow) in g.rows().into_iter().enumerate() {
                    let gb = grow
                        .to_owned()
                        .into_shape_with_order((geom.out_channels, positions))
                        .expect("conv output layout");
                    db += &gb.sum_axis(Axis(1)).insert_axis(Axis(0));
                    let cols = geom.im2col(x.row(b));
                    dk += &gb.dot(&cols);
                    if need_x {
                        let dcols = gb.t().dot(k);
                        geom.col2im_add(&dcols, dx.row_mut(b));
                    }
                }
                acc(*kernel, dk);
                acc(*bias, db);
                if need_x {
                    acc(*input, dx);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(x_i)`; `-∞` for an empty input.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_store(values: &[(&str, Matrix)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.insert(*n, v.clone()).unwrap();
        }
        s
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let store = scalar_store(&[("theta/a", array![[2.0]]), ("theta/b", array![[3.0]])]);
        let mut t = Tape::new(&store);
        let a = t.param(ParamId(0));
        let _b = t.param(ParamId(1));
        let y = t.square(a);
        let loss = t.sum_all(y);
        let g = t.gradients(loss).unwrap();
        assert_eq!(g.get(ParamId(0))[[0, 0]], 4.0);
        assert_eq!(g.get(ParamId(1))[[0, 0]], 0.0);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let store = scalar_store(&[("theta/w", array![[0.3, -0.7], [1.1, 0.2]])]);
        let x = array![[0.5, -1.5]];
        let run = |which: u8| {
            let mut t = Tape::new(&store);
            let w = t.param(ParamId(0));
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, w).unwrap();
            let l1 = {
                let s = t.tanh(h);
                t.sum_all(s)
            };
            let l2 = {
                let s = t.square(h);
                t.sum_all(s)
            };
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            t.gradients(loss).unwrap()
        };
        let (g1, g2, g12) = (run(0), run(1), run(2));
        let mut sum = g1.clone();
        sum.add_assign(&g2);
        for (a, b) in sum.get(ParamId(0)).iter().zip(g12.get(ParamId(0)).iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_forward_value_is_reported_with_node() {
        let store = scalar_store(&[("theta/a", array![[1000.0]])]);
        let mut t = Tape::new(&store);
        let a = t.param(ParamId(0));
        let e = t.exp(a);
        let loss = t.sum_all(e);
        match t.gradients(loss) {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, e.index());
                assert_eq!(op, "exp");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn masked_softmax_rows() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(array![[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]);
        let mask = array![[1.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
        let y = t.masked_softmax(x, &mask).unwrap();
        let v = t.value(y);
        let e = (1.0f64.exp(), 3.0f64.exp());
        assert!((v[[0, 0]] - e.0 / (e.0 + e.1)).abs() < 1e-15);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v.row(1).sum(), 0.0);
    }

    #[test]
    fn reshape_and_gather_roundtrip_values() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(array![[1.0, 2.0, 3.0, 4.0]]);
        let r = t.reshape(x, 2, 2).unwrap();
        assert_eq!(t.value(r), &array![[1.0, 2.0], [3.0, 4.0]]);
        let g = t.gather_rows(r, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(g), &array![[3.0, 4.0], [3.0, 4.0], [1.0, 2.0]]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(Matrix::zeros((2, 3)));
        let b = t.constant(Matrix::zeros((2, 3)));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
        let c = t.constant(Matrix::zeros((3, 2)));
        assert!(matches!(t.add(a, c), Err(Error::Shape { .. })));
    }
}
