use std::borrow::Cow;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{Gradients, ParamId, ParamStore};
use crate::Matrix;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gelu(usize),
    Silu(usize),
    Softmax(usize),
    LayerNorm { x: usize, xhat: Matrix, inv_std: Vec<f64> },
    SelectRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    MeanRows(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass.
///
/// Values are kept for the backward sweep, so a tape should be dropped as
/// soon as its gradients have been read.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: RefCell<Vec<Node<'p>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, 'p> {
    tape: &'t Tape<'p>,
    id: usize,
}

impl std::fmt::Debug for Var<'_, '_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{r}x{c}]", self.id)
    }
}

impl<'p> Tape<'p> {
    /// A tape on which every parameter of `store` is trainable.
    pub fn new(store: &'p ParamStore) -> Self {
        Self::with_trainable(store, |_| true)
    }

    /// A tape on which only parameters whose name passes `trainable`
    /// receive gradients; the rest behave as constants.
    pub fn with_trainable(store: &'p ParamStore, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Self {
            store,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            trainable: Box::new(trainable),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Cow<'p, Matrix>, op: Op, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        nodes.len() - 1
    }

    fn var(&self, id: usize) -> Var<'_, 'p> {
        Var { tape: self, id }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| n[id].value.as_ref())
    }

    /// Leaf that receives a gradient (readable via [`Tape::backward_with_inputs`]).
    pub fn input(&self, value: Matrix) -> Var<'_, 'p> {
        let id = self.push(Cow::Owned(value), Op::Leaf, true);
        self.var(id)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_, 'p> {
        let id = self.push(Cow::Owned(value), Op::Leaf, false);
        self.var(id)
    }

    /// Parameter leaf, borrowed from the store. Repeated calls with the same
    /// id return the same node.
    pub fn param(&self, id: ParamId) -> Var<'_, 'p> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return self.var(node);
        }
        let trainable = (self.trainable)(self.store.name(id));
        let node = self.push(Cow::Borrowed(self.store.get(id)), Op::Param, trainable);
        self.param_nodes.borrow_mut().insert(id, node);
        self.var(node)
    }

    fn unary(&self, a: usize, value: Matrix, op: Op) -> Var<'_, 'p> {
        let rg = self.rg(&[a]);
        let id = self.push(Cow::Owned(value), op, rg);
        self.var(id)
    }

    fn binary(&self, a: usize, b: usize, value: Matrix, op: Op) -> Var<'_, 'p> {
        let rg = self.rg(&[a, b]);
        let id = self.push(Cow::Owned(value), op, rg);
        self.var(id)
    }

    fn nary(&self, parts: Vec<usize>, value: Matrix, op: impl FnOnce(Vec<usize>) -> Op) -> Var<'_, 'p> {
        let rg = self.rg(&parts);
        let id = self.push(Cow::Owned(value), op(parts), rg);
        self.var(id)
    }

    /// Concatenates along rows (all parts must share the column count).
    pub fn concat_rows(&self, parts: &[Var<'_, 'p>]) -> Var<'_, 'p> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            concatenate(Axis(0), &views).expect("concat_rows: column mismatch")
        };
        self.nary(parts.iter().map(|p| p.id).collect(), value, Op::ConcatRows)
    }

    /// Concatenates along columns (all parts must share the row count).
    pub fn concat_cols(&self, parts: &[Var<'_, 'p>]) -> Var<'_, 'p> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            concatenate(Axis(1), &views).expect("concat_cols: row mismatch")
        };
        self.nary(parts.iter().map(|p| p.id).collect(), value, Op::ConcatCols)
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter that influenced it.
    pub fn backward(&self, loss: Var<'_, 'p>) -> Gradients {
        self.backward_with_inputs(loss, &[]).0
    }

    /// Like [`Tape::backward`] and also returns the gradient with respect to
    /// each var in `wrt` (zeros when it did not influence the loss).
    pub fn backward_with_inputs(&self, loss: Var<'_, 'p>, wrt: &[Var<'_, 'p>]) -> (Gradients, Vec<Matrix>) {
        assert_eq!(loss.shape(), (1, 1), "backward needs a scalar loss");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array2::ones((1, 1)));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[id] = Some(g);
            }
        }

        let mut out = Gradients::new();
        for (pid, &node) in self.param_nodes.borrow().iter() {
            if nodes[node].requires_grad {
                if let Some(g) = grads[node].take() {
                    out.by_param.insert(*pid, g);
                }
            }
        }
        let inputs = wrt
            .iter()
            .map(|v| grads[v.id].clone().unwrap_or_else(|| Array2::zeros(nodes[v.id].value.dim())))
            .collect();
        (out, inputs)
    }
}

fn acc(grads: &mut [Option<Matrix>], nodes: &[Node<'_>], id: usize, g: Matrix) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sum_rows(g: &Matrix) -> Matrix {
    g.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn backprop(nodes: &[Node<'_>], id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let val = |i: usize| nodes[i].value.as_ref();
    let rg = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            if rg(*a) {
                acc(grads, nodes, *a, g.dot(&val(*b).t()));
            }
            if rg(*b) {
                acc(grads, nodes, *b, val(*a).t().dot(g));
            }
        }
        Op::MatMulNT(a, b) => {
            if rg(*a) {
                acc(grads, nodes, *a, g.dot(val(*b)));
            }
            if rg(*b) {
                acc(grads, nodes, *b, g.t().dot(val(*a)));
            }
        }
        Op::Add(a, b) => {
            if rg(*a) {
                acc(grads, nodes, *a, g.clone());
            }
            if rg(*b) {
                acc(grads, nodes, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                acc(grads, nodes, *a, g.clone());
            }
            if rg(*b) {
                acc(grads, nodes, *b, -g);
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                acc(grads, nodes, *a, g * val(*b));
            }
            if rg(*b) {
                acc(grads, nodes, *b, g * val(*a));
            }
        }
        Op::AddRow(a, row) => {
            if rg(*a) {
                acc(grads, nodes, *a, g.clone());
            }
            if rg(*row) {
                acc(grads, nodes, *row, sum_rows(g));
            }
        }
        Op::MulRow(a, row) => {
            if rg(*a) {
                acc(grads, nodes, *a, g * val(*row));
            }
            if rg(*row) {
                acc(grads, nodes, *row, sum_rows(&(g * val(*a))));
            }
        }
        Op::Scale(a, k) => acc(grads, nodes, *a, g * *k),
        Op::AddScalar(a) => acc(grads, nodes, *a, g.clone()),
        Op::Gelu(a) => {
            let mut d = val(*a).mapv(|x| {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            });
            d *= g;
            acc(grads, nodes, *a, d);
        }
        Op::Silu(a) => {
            let mut d = val(*a).mapv(|x| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            });
            d *= g;
            acc(grads, nodes, *a, d);
        }
        Op::Softmax(a) => {
            let y = val(id);
            let mut d = y * g;
            for (mut row, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                let dot: f64 = row.sum();
                row.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
            }
            acc(grads, nodes, *a, d);
        }
        Op::LayerNorm { x, xhat, inv_std } => {
            let cols = xhat.ncols() as f64;
            let mut d = Array2::zeros(xhat.dim());
            for (r, ((mut drow, grow), xrow)) in d.rows_mut().into_iter().zip(g.rows()).zip(xhat.rows()).enumerate() {
                let mean_g = grow.sum() / cols;
                let mean_gx = grow.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                for ((dv, &gv), &xv) in drow.iter_mut().zip(grow.iter()).zip(xrow.iter()) {
                    *dv = inv_std[r] * (gv - mean_g - xv * mean_gx);
                }
            }
            acc(grads, nodes, *x, d);
        }
        Op::SelectRows(a, idx) => {
            let mut d = Array2::zeros(val(*a).dim());
            for (k, &r) in idx.iter().enumerate() {
                let mut row = d.row_mut(r);
                row += &g.row(k);
            }
            acc(grads, nodes, *a, d);
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let n = val(p).nrows();
                if rg(p) {
                    acc(grads, nodes, p, g.slice(s![start..start + n, ..]).to_owned());
                }
                start += n;
            }
        }
        Op::SliceCols(a, start) => {
            let mut d = Array2::zeros(val(*a).dim());
            let end = start + g.ncols();
            d.slice_mut(s![.., *start..end]).assign(g);
            acc(grads, nodes, *a, d);
        }
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let n = val(p).ncols();
                if rg(p) {
                    acc(grads, nodes, p, g.slice(s![.., start..start + n]).to_owned());
                }
                start += n;
            }
        }
        Op::MeanRows(a) => {
            let (r, c) = val(*a).dim();
            let row = g.row(0).mapv(|v| v / r as f64);
            let d = Array2::from_shape_fn((r, c), |(_, j)| row[j]);
            acc(grads, nodes, *a, d);
        }
        Op::Square(a) => acc(grads, nodes, *a, g * &(val(*a) * 2.0)),
        Op::Sum(a) => {
            let gv = g[[0, 0]];
            acc(grads, nodes, *a, Array2::from_elem(val(*a).dim(), gv));
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            let gv = g[[0, 0]] / n;
            acc(grads, nodes, *a, Array2::from_elem(val(*a).dim(), gv));
        }
    }
}

impl<'t, 'p> Var<'t, 'p> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<'p> {
        self.tape
    }

    /// Borrow of the forward value. Drop it before recording new ops.
    pub fn value(&self) -> Ref<'t, Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn to_matrix(&self) -> Matrix {
        self.value().clone()
    }

    /// The `1 × 1` value as a number.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "not a scalar");
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t, 'p> {
        let value = self.value().mapv(f);
        self.tape.unary(self.id, value, op)
    }

    /// `self · other`
    pub fn matmul(&self, other: Var<'t, 'p>) -> Var<'t, 'p> {
        let value = self.value().dot(&*other.value());
        self.tape.binary(self.id, other.id, value, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: Var<'t, 'p>) -> Var<'t, 'p> {
        let value = self.value().dot(&other.value().t());
        self.tape.binary(self.id, other.id, value, Op::MatMulNT(self.id, other.id))
    }

    fn check_same(&self, other: &Var<'t, 'p>, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch");
    }

    pub fn add(&self, other: Var<'t, 'p>) -> Var<'t, 'p> {
        self.check_same(&other, "add");
        let value = &*self.value() + &*other.value();
        self.tape.binary(self.id, other.id, value, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, 'p>) -> Var<'t, 'p> {
        self.check_same(&other, "sub");
        let value = &*self.value() - &*other.value();
        self.tape.binary(self.id, other.id, value, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t, 'p>) -> Var<'t, 'p> {
        self.check_same(&other, "mul");
        let value = &*self.value() * &*other.value();
        self.tape.binary(self.id, other.id, value, Op::Mul(self.id, other.id))
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(&self, row: Var<'t, 'p>) -> Var<'t, 'p> {
        assert_eq!(row.shape(), (1, self.cols()), "add_row: expected 1x{} row", self.cols());
        let value = &*self.value() + &*row.value();
        self.tape.binary(self.id, row.id, value, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a `1 × cols` row.
    pub fn mul_row(&self, row: Var<'t, 'p>) -> Var<'t, 'p> {
        assert_eq!(row.shape(), (1, self.cols()), "mul_row: expected 1x{} row", self.cols());
        let value = &*self.value() * &*row.value();
        self.tape.binary(self.id, row.id, value, Op::MulRow(self.id, row.id))
    }

    pub fn scale(&self, k: f64) -> Var<'t, 'p> {
        self.map(|x| x * k, Op::Scale(self.id, k))
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t, 'p> {
        self.map(|x| x + k, Op::AddScalar(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, 'p> {
        self.map(
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Op::Gelu(self.id),
        )
    }

    pub fn silu(&self) -> Var<'t, 'p> {
        self.map(|x| x / (1.0 + (-x).exp()), Op::Silu(self.id))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Var<'t, 'p> {
        let mut value = self.to_matrix();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.tape.unary(self.id, value, Op::Softmax(self.id))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Var<'t, 'p> {
        let x = self.value();
        let cols = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        drop(x);
        let value = xhat.clone();
        self.tape.unary(self.id, value, Op::LayerNorm { x: self.id, xhat, inv_std })
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&self, idx: &[usize]) -> Var<'t, 'p> {
        let value = self.value().select(Axis(0), idx);
        self.tape.unary(self.id, value, Op::SelectRows(self.id, idx.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t, 'p> {
        assert!(start <= end && end <= self.cols(), "slice_cols out of range");
        let value = self.value().slice(s![.., start..end]).to_owned();
        self.tape.unary(self.id, value, Op::SliceCols(self.id, start))
    }

    /// `1 × cols` mean over rows.
    pub fn mean_rows(&self) -> Var<'t, 'p> {
        let value = self.value().mean_axis(Axis(0)).expect("mean_rows of empty").insert_axis(Axis(0));
        self.tape.unary(self.id, value, Op::MeanRows(self.id))
    }

    pub fn square(&self) -> Var<'t, 'p> {
        self.map(|x| x * x, Op::Square(self.id))
    }

    pub fn sum(&self) -> Var<'t, 'p> {
        let value = Array2::from_elem((1, 1), self.value().sum());
        self.tape.unary(self.id, value, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, 'p> {
        let v = self.value();
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        drop(v);
        self.tape.unary(self.id, value, Op::Mean(self.id))
    }
}
