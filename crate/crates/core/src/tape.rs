//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Sequences of per-node states are
//! laid out time-major: row `t * nodes + n` holds node `n` at step `t`, so a
//! block of `nodes` consecutive rows is one timestamp.
//!
//! Model-specific fused operations (attention, decay, graph construction)
//! plug in through [`CustomOp`].

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the forward input values, the forward output and the
/// upstream gradient, and returns one gradient per input (same shapes).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Array2<f64>],
        output: &Array2<f64>,
        grad: &Array2<f64>,
    ) -> Vec<Array2<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowSlice { x: Var, start: usize },
    TileRows { x: Var, times: usize },
    RepeatRows { x: Var, times: usize },
    ConstBlockMul { m: Arc<Array2<f64>>, x: Var },
    BlockMul { a: Var, x: Var },
    TimeToCols { x: Var, steps: usize },
    RowSoftmax(Var),
    RowNormalize(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, masks, fixed matrices).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `x + b` with the `1 × c` row `b` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1, "add_row expects a 1×c bias");
        let value = self.value(x) + self.value(b);
        let ng = self.needs(x) || self.needs(b);
        self.push(value, Op::AddRow(x, b), ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, k), ng)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 - v);
        let ng = self.needs(x);
        self.push(value, Op::OneMinus(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let ng = self.needs(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        let ng = self.needs(x);
        self.push(value, Op::Abs(x), ng)
    }

    /// Sum of all entries as a `1 × 1` matrix.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows `start .. start + len`.
    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(x);
        self.push(value, Op::RowSlice { x, start }, ng)
    }

    /// Stack `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let views: Vec<ArrayView2<f64>> = (0..times).map(|_| v.view()).collect();
        let value = concatenate(Axis(0), &views).expect("tile_rows");
        let ng = self.needs(x);
        self.push(value, Op::TileRows { x, times }, ng)
    }

    /// Repeat each row of `x` `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let (r, c) = v.dim();
        let mut value = Array2::zeros((r * times, c));
        for i in 0..r {
            for j in 0..times {
                value.row_mut(i * times + j).assign(&v.row(i));
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::RepeatRows { x, times }, ng)
    }

    /// Apply the fixed square matrix `m` to every `m.nrows()`-row block of `x`.
    pub fn const_block_mul(&mut self, m: Arc<Array2<f64>>, x: Var) -> Var {
        let n = m.nrows();
        let xv = self.value(x);
        let (rows, c) = xv.dim();
        assert_eq!(rows % n, 0, "const_block_mul: rows not a multiple of block size");
        let mut value = Array2::zeros((rows, c));
        for b in 0..rows / n {
            let blk = xv.slice(s![b * n..(b + 1) * n, ..]);
            value
                .slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&m.dot(&blk));
        }
        let ng = self.needs(x);
        self.push(value, Op::ConstBlockMul { m, x }, ng)
    }

    /// Per-block product `A_t · X_t` where `a` stacks `N × N` blocks and `x`
    /// stacks `N × c` blocks.
    pub fn block_mul(&mut self, a: Var, x: Var) -> Var {
        let av = self.value(a);
        let xv = self.value(x);
        let n = av.ncols();
        assert_eq!(av.nrows(), xv.nrows(), "block_mul: block counts differ");
        let (rows, c) = xv.dim();
        let mut value = Array2::zeros((rows, c));
        for b in 0..rows / n {
            let ab = av.slice(s![b * n..(b + 1) * n, ..]);
            let xb = xv.slice(s![b * n..(b + 1) * n, ..]);
            value
                .slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&ab.dot(&xb));
        }
        let ng = self.needs(a) || self.needs(x);
        self.push(value, Op::BlockMul { a, x }, ng)
    }

    /// `(steps·N) × c` time-major sequence to `N × (steps·c)`, step `t`
    /// occupying columns `t*c .. (t+1)*c`.
    pub fn time_to_cols(&mut self, x: Var, steps: usize) -> Var {
        let xv = self.value(x);
        let (rows, c) = xv.dim();
        assert_eq!(rows % steps, 0);
        let n = rows / steps;
        let mut value = Array2::zeros((n, steps * c));
        for t in 0..steps {
            value
                .slice_mut(s![.., t * c..(t + 1) * c])
                .assign(&xv.slice(s![t * n..(t + 1) * n, ..]));
        }
        let ng = self.needs(x);
        self.push(value, Op::TimeToCols { x, steps }, ng)
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - mx).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let ng = self.needs(x);
        self.push(value, Op::RowSoftmax(x), ng)
    }

    /// Divide each row by its sum; rows summing to zero stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let z = row.sum();
            if z != 0.0 {
                row.mapv_inplace(|v| v / z);
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::RowNormalize(x), ng)
    }

    pub fn custom(&mut self, inputs: &[Var], value: Array2<f64>, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Gradients of the scalar `loss` (a `1 × 1` value) with respect to every
    /// recorded value that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        self.backward_seeded(loss, Array2::ones((1, 1)))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_seeded(&self, out: Var, seed: Array2<f64>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::AddRow(x, b) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, k) => accumulate(&mut grads[x.0], g * *k),
            Op::OneMinus(x) => accumulate(&mut grads[x.0], -g),
            Op::Tanh(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                accumulate(&mut grads[x.0], d);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                accumulate(&mut grads[x.0], d);
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &v| if v <= 0.0 { *d = 0.0 });
                accumulate(&mut grads[x.0], d);
            }
            Op::Abs(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    *d *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[x.0], d);
            }
            Op::Sum(x) => {
                let d = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                accumulate(&mut grads[x.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![.., off..off + c]).to_owned());
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let r = self.shape(*p).0;
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![off..off + r, ..]).to_owned());
                    }
                    off += r;
                }
            }
            Op::RowSlice { x, start } => {
                let mut d = Array2::zeros(self.shape(*x));
                let len = g.nrows();
                d.slice_mut(s![*start..*start + len, ..]).assign(g);
                accumulate(&mut grads[x.0], d);
            }
            Op::TileRows { x, times } => {
                let r = self.shape(*x).0;
                let mut d = Array2::zeros(self.shape(*x));
                for k in 0..*times {
                    d += &g.slice(s![k * r..(k + 1) * r, ..]);
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::RepeatRows { x, times } => {
                let (r, _) = self.shape(*x);
                let mut d = Array2::zeros(self.shape(*x));
                for i in 0..r {
                    let mut row = d.row_mut(i);
                    for j in 0..*times {
                        row += &g.row(i * times + j);
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::ConstBlockMul { m, x } => {
                let n = m.nrows();
                let mut d = Array2::zeros(g.dim());
                let mt = m.t();
                for b in 0..g.nrows() / n {
                    d.slice_mut(s![b * n..(b + 1) * n, ..])
                        .assign(&mt.dot(&g.slice(s![b * n..(b + 1) * n, ..])));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::BlockMul { a, x } => {
                let av = self.value(*a);
                let xv = self.value(*x);
                let n = av.ncols();
                let blocks = g.nrows() / n;
                if self.needs(*a) {
                    let mut da = Array2::zeros(av.dim());
                    for b in 0..blocks {
                        let gb = g.slice(s![b * n..(b + 1) * n, ..]);
                        let xb = xv.slice(s![b * n..(b + 1) * n, ..]);
                        da.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&gb.dot(&xb.t()));
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*x) {
                    let mut dx = Array2::zeros(xv.dim());
                    for b in 0..blocks {
                        let gb = g.slice(s![b * n..(b + 1) * n, ..]);
                        let ab = av.slice(s![b * n..(b + 1) * n, ..]);
                        dx.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&ab.t().dot(&gb));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::TimeToCols { x, steps } => {
                let (rows, c) = self.shape(*x);
                let n = rows / steps;
                let mut d = Array2::zeros((rows, c));
                for t in 0..*steps {
                    d.slice_mut(s![t * n..(t + 1) * n, ..])
                        .assign(&g.slice(s![.., t * c..(t + 1) * c]));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::RowSoftmax(x) => {
                let mut d = Array2::zeros(g.dim());
                for ((mut drow, grow), yrow) in
                    d.rows_mut().into_iter().zip(g.rows()).zip(y.rows())
                {
                    let dot = grow.dot(&yrow);
                    Zip::from(&mut drow)
                        .and(&grow)
                        .and(&yrow)
                        .for_each(|d, &g, &y| *d = y * (g - dot));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::RowNormalize(x) => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(g.dim());
                for (((mut drow, grow), yrow), xrow) in d
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows())
                    .zip(y.rows())
                    .zip(xv.rows())
                {
                    let z = xrow.sum();
                    if z == 0.0 {
                        continue;
                    }
                    let dot = grow.dot(&yrow);
                    Zip::from(&mut drow)
                        .and(&grow)
                        .for_each(|d, &g| *d = (g - dot) / z);
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Array2<f64>> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = op.backward(&vals, y, g);
                debug_assert_eq!(ds.len(), inputs.len(), "{}: gradient count", op.name());
                for (v, d) in inputs.iter().zip(ds) {
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], d);
                    }
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
