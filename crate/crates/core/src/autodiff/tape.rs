//! Batched reverse-mode differentiation over row-major matrices.
//!
//! Every node holds a `rows x cols` value. Scalars are `1 x 1`. Binary
//! elementwise ops accept a right operand that is the same shape, a column
//! (`rows x 1`, broadcast across columns) or a scalar.

use crate::linalg::{gemm, DenseMatrix};

use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Arguments of `exp` above this are clamped.
pub const EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x Wᵀ + b` with `x: B×in`, `W: out×in`, `b: 1×out`.
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatRows(Var, Var),
    /// Row `i` of the output is `M_i x_i`, where `M_i` is row `i` of `mats`
    /// reshaped to `d×d`.
    BatchMatVec { mats: Var, x: Var },
}

struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    exp_clamps: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Bcast {
    Same,
    Column,
    Scalar,
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss or is a constant.
    pub fn wrt(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
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

    /// Number of `exp` entries clamped at [`EXP_CLAMP`] so far.
    pub fn exp_clamps(&self) -> usize {
        self.exp_clamps
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.as_slice().iter().map(|&a| f(a)).collect();
        let value = DenseMatrix::from_vec(src.rows(), src.cols(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<Bcast, AutodiffError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) == (rb, cb) {
            Ok(Bcast::Same)
        } else if rb == ra && cb == 1 {
            Ok(Bcast::Column)
        } else if (rb, cb) == (1, 1) {
            Ok(Bcast::Scalar)
        } else {
            Err(AutodiffError::Dimension(format!(
                "cannot broadcast {rb}x{cb} onto {ra}x{ca}"
            )))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let kind = self.broadcast_kind(a, b)?;
        let av = self.value(a);
        let bv = self.value(b).as_slice();
        let (rows, cols) = av.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (j, &x) in av.row(i).iter().enumerate() {
                let y = match kind {
                    Bcast::Same => bv[i * cols + j],
                    Bcast::Column => bv[i],
                    Bcast::Scalar => bv[0],
                };
                data.push(f(x, y));
            }
        }
        let value = DenseMatrix::from_vec(rows, cols, data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (batch, inp) = self.shape(x);
        let (out, w_in) = self.shape(w);
        if w_in != inp || self.shape(b) != (1, out) {
            return Err(AutodiffError::Dimension(format!(
                "affine: x {batch}x{inp}, W {out}x{w_in}, b {:?}",
                self.shape(b)
            )));
        }
        let mut value = DenseMatrix::zeros(batch, out);
        {
            let bias = self.value(b).as_slice();
            for i in 0..batch {
                value.row_mut(i).copy_from_slice(bias);
            }
        }
        gemm(
            batch,
            inp,
            out,
            1.0,
            self.value(x).as_slice(),
            false,
            self.value(w).as_slice(),
            true,
            1.0,
            value.as_mut_slice(),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Affine { x, w, b }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |a| c * a)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    /// `exp(min(x, 700))`; clamped entries are counted and get zero gradient.
    pub fn exp(&mut self, x: Var) -> Var {
        let clamped = self
            .value(x)
            .as_slice()
            .iter()
            .filter(|&&a| a > EXP_CLAMP)
            .count();
        self.exp_clamps += clamped;
        self.unary(x, Op::Exp(x), |a| a.min(EXP_CLAMP).exp())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    /// `B×n → B×1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = (0..src.rows()).map(|i| src.row(i).iter().sum()).collect();
        let value = DenseMatrix::from_vec(src.rows(), 1, data).expect("column");
        let rg = self.rg(x);
        self.push(value, Op::RowSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).as_slice().iter().sum();
        let rg = self.rg(x);
        self.push(DenseMatrix::from_vec(1, 1, vec![s]).unwrap(), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).as_slice();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(DenseMatrix::from_vec(1, 1, vec![m]).unwrap(), Op::Mean(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let src = self.value(x);
        if start > end || end > src.cols() {
            return Err(AutodiffError::Dimension(format!(
                "column slice {start}..{end} of {} columns",
                src.cols()
            )));
        }
        let mut data = Vec::with_capacity(src.rows() * (end - start));
        for i in 0..src.rows() {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let value = DenseMatrix::from_vec(src.rows(), end - start, data).unwrap();
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols(x, start, end), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let src = self.value(x);
        if start > end || end > src.rows() {
            return Err(AutodiffError::Dimension(format!(
                "row slice {start}..{end} of {} rows",
                src.rows()
            )));
        }
        let c = src.cols();
        let data = src.as_slice()[start * c..end * c].to_vec();
        let value = DenseMatrix::from_vec(end - start, c, data).unwrap();
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows(x, start, end), rg))
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(AutodiffError::Dimension(format!(
                "row concat of {ra}x{ca} and {rb}x{cb}"
            )));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.value(a).as_slice());
        data.extend_from_slice(self.value(b).as_slice());
        let value = DenseMatrix::from_vec(ra + rb, ca, data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    pub fn batch_matvec(&mut self, mats: Var, x: Var) -> Result<Var, AutodiffError> {
        let (b, d) = self.shape(x);
        if self.shape(mats) != (b, d * d) {
            return Err(AutodiffError::Dimension(format!(
                "batch_matvec: matrices {:?} for vectors {b}x{d}",
                self.shape(mats)
            )));
        }
        let mut value = DenseMatrix::zeros(b, d);
        {
            let m = self.value(mats);
            let xv = self.value(x);
            for i in 0..b {
                let mi = m.row(i);
                let xi = xv.row(i);
                let out = value.row_mut(i);
                for (r, o) in out.iter_mut().enumerate() {
                    *o = crate::linalg::dot(&mi[r * d..(r + 1) * d], xi);
                }
            }
        }
        let rg = self.rg(mats) || self.rg(x);
        Ok(self.push(value, Op::BatchMatVec { mats, x }, rg))
    }

    /// Reverse pass from a scalar node. Each node is visited once, in reverse
    /// insertion order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape.0, shape.1));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<DenseMatrix>], v: Var, delta: DenseMatrix) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(delta.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => acc.add_scaled(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reduces a gradient shaped like the output onto a broadcast operand.
    fn reduce_broadcast(&self, kind: Bcast, full: DenseMatrix) -> DenseMatrix {
        match kind {
            Bcast::Same => full,
            Bcast::Column => {
                let data = (0..full.rows()).map(|i| full.row(i).iter().sum()).collect();
                DenseMatrix::from_vec(full.rows(), 1, data).unwrap()
            }
            Bcast::Scalar => {
                DenseMatrix::from_vec(1, 1, vec![full.as_slice().iter().sum()]).unwrap()
            }
        }
    }

    /// Elementwise `f(upstream, input, output)`.
    fn map_with(
        g: &DenseMatrix,
        input: &DenseMatrix,
        output: &DenseMatrix,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> DenseMatrix {
        let data = g
            .as_slice()
            .iter()
            .zip(input.as_slice())
            .zip(output.as_slice())
            .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
            .collect();
        DenseMatrix::from_vec(g.rows(), g.cols(), data).unwrap()
    }

    fn propagate(&self, idx: usize, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
        let out = &self.nodes[idx].value;
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (batch, inp) = xv.shape();
                let outd = wv.rows();
                if self.rg(x) {
                    let mut gx = DenseMatrix::zeros(batch, inp);
                    gemm(batch, outd, inp, 1.0, g.as_slice(), false, wv.as_slice(), false, 0.0, gx.as_mut_slice());
                    self.accumulate(grads, x, gx);
                }
                if self.rg(w) {
                    let mut gw = DenseMatrix::zeros(outd, inp);
                    gemm(outd, batch, inp, 1.0, g.as_slice(), true, xv.as_slice(), false, 0.0, gw.as_mut_slice());
                    self.accumulate(grads, w, gw);
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; outd];
                    for i in 0..batch {
                        for (acc, &v) in gb.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, b, DenseMatrix::from_vec(1, outd, gb).unwrap());
                }
            }
            Op::Tanh(x) => {
                let d = Self::map_with(g, self.value(x), out, |gi, _, y| gi * (1.0 - y * y));
                self.accumulate(grads, x, d);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, a, g.clone());
                if self.rg(b) {
                    let kind = self.broadcast_kind(a, b).expect("checked at record time");
                    let mut gb = g.clone();
                    if sign < 0.0 {
                        gb.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
                    }
                    let reduced = self.reduce_broadcast(kind, gb);
                    self.accumulate(grads, b, reduced);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.nodes[idx].op, Op::Div(..));
                let kind = self.broadcast_kind(a, b).expect("checked at record time");
                let av = self.value(a);
                let bv = self.value(b).as_slice();
                let (rows, cols) = av.shape();
                let bat = |i: usize, j: usize| match kind {
                    Bcast::Same => bv[i * cols + j],
                    Bcast::Column => bv[i],
                    Bcast::Scalar => bv[0],
                };
                if self.rg(a) {
                    let mut ga = DenseMatrix::zeros(rows, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let y = bat(i, j);
                            ga[(i, j)] = if is_div { g[(i, j)] / y } else { g[(i, j)] * y };
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let mut gb = DenseMatrix::zeros(rows, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let y = bat(i, j);
                            let x = av[(i, j)];
                            gb[(i, j)] = if is_div {
                                -g[(i, j)] * x / (y * y)
                            } else {
                                g[(i, j)] * x
                            };
                        }
                    }
                    let reduced = self.reduce_broadcast(kind, gb);
                    self.accumulate(grads, b, reduced);
                }
            }
            Op::Scale(x, c) => {
                let d = Self::map_with(g, self.value(x), out, |gi, _, _| c * gi);
                self.accumulate(grads, x, d);
            }
            Op::Square(x) => {
                let d = Self::map_with(g, self.value(x), out, |gi, xi, _| 2.0 * xi * gi);
                self.accumulate(grads, x, d);
            }
            Op::Exp(x) => {
                let d = Self::map_with(g, self.value(x), out, |gi, xi, yi| {
                    if xi > EXP_CLAMP {
                        0.0
                    } else {
                        gi * yi
                    }
                });
                self.accumulate(grads, x, d);
            }
            Op::Abs(x) => {
                let d = Self::map_with(g, self.value(x), out, |gi, xi, _| {
                    if xi > 0.0 {
                        gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, x, d);
            }
            Op::Sqrt(x) => {
                let d = Self::map_with(g, self.value(x), out, |gi, _, yi| gi * 0.5 / yi);
                self.accumulate(grads, x, d);
            }
            Op::RowSum(x) => {
                let (rows, cols) = self.shape(x);
                let mut d = DenseMatrix::zeros(rows, cols);
                for i in 0..rows {
                    d.row_mut(i).fill(g[(i, 0)]);
                }
                self.accumulate(grads, x, d);
            }
            Op::Sum(x) | Op::Mean(x) => {
                let (rows, cols) = self.shape(x);
                let mut s = g[(0, 0)];
                if matches!(self.nodes[idx].op, Op::Mean(_)) {
                    s /= (rows * cols) as f64;
                }
                let d = DenseMatrix::from_vec(rows, cols, vec![s; rows * cols]).unwrap();
                self.accumulate(grads, x, d);
            }
            Op::SliceCols(x, start, end) => {
                let (rows, cols) = self.shape(x);
                let mut d = DenseMatrix::zeros(rows, cols);
                for i in 0..rows {
                    d.row_mut(i)[start..end].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, x, d);
            }
            Op::SliceRows(x, start, end) => {
                let (rows, cols) = self.shape(x);
                let mut d = DenseMatrix::zeros(rows, cols);
                d.as_mut_slice()[start * cols..end * cols].copy_from_slice(g.as_slice());
                self.accumulate(grads, x, d);
            }
            Op::ConcatRows(a, b) => {
                let (ra, cols) = self.shape(a);
                let split = ra * cols;
                if self.rg(a) {
                    let top = DenseMatrix::from_vec(ra, cols, g.as_slice()[..split].to_vec()).unwrap();
                    self.accumulate(grads, a, top);
                }
                if self.rg(b) {
                    let rb = self.shape(b).0;
                    let bottom = DenseMatrix::from_vec(rb, cols, g.as_slice()[split..].to_vec()).unwrap();
                    self.accumulate(grads, b, bottom);
                }
            }
            Op::BatchMatVec { mats, x } => {
                let (b, dim) = self.shape(x);
                let mv = self.value(mats);
                if self.rg(x) {
                    // gx_i = M_iᵀ g_i
                    let mut gx = DenseMatrix::zeros(b, dim);
                    for i in 0..b {
                        let mi = mv.row(i);
                        let gi = g.row(i);
                        let out = gx.row_mut(i);
                        for (r, &gr) in gi.iter().enumerate() {
                            for (o, &m) in out.iter_mut().zip(&mi[r * dim..(r + 1) * dim]) {
                                *o += m * gr;
                            }
                        }
                    }
                    self.accumulate(grads, x, gx);
                }
                if self.rg(mats) {
                    // gM_i = g_i x_iᵀ
                    let xv = self.value(x);
                    let mut gm = DenseMatrix::zeros(b, dim * dim);
                    for i in 0..b {
                        let xi = xv.row(i);
                        let gi = g.row(i);
                        let out = gm.row_mut(i);
                        for r in 0..dim {
                            for c in 0..dim {
                                out[r * dim + c] = gi[r] * xi[c];
                            }
                        }
                    }
                    self.accumulate(grads, mats, gm);
                }
            }
        }
    }
}
