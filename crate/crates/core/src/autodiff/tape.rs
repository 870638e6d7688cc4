//! Reverse-mode differentiation over a recorded tape of matrix-valued nodes.
//!
//! Every node stores a dense row-major `Array2<f64>`. Per-sample quantities
//! live in rows, so one node covers a whole ray batch. Elementwise binary
//! operations broadcast an operand whose row or column count is 1.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Log1p(Var),
    Sin(Var),
    Cos(Var),
    Softplus(Var),
    Relu(Var),
    Abs(Var),
    Max(Var, Var),
    MatMul(Var, Var),
    /// Row sums, `N x C -> N x 1`.
    SumCols(Var),
    /// Column sums, `N x C -> 1 x C`.
    SumRows(Var),
    /// Row-wise `x / |x|`, zero for rows with `|x| < eps`.
    NormalizeRows(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Max(a, b) | MatMul(a, b) => {
                vec![*a, *b]
            }
            Neg(a) | Scale(a, _) | Exp(a) | Log(a) | Log1p(a) | Sin(a) | Cos(a) | Softplus(a)
            | Relu(a) | Abs(a) | SumCols(a) | SumRows(a) | NormalizeRows(a, _)
            | SliceCols(a, _, _) | Reshape(a) | Transpose(a) | GatherRows(a, _) => vec![*a],
            ConcatCols(vs) => vs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

/// Append-only computation record. Parents always precede children.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function; derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn zip_broadcast(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim())
        .unwrap_or_else(|| panic!("shape mismatch {:?} vs {:?}", a.dim(), b.dim()));
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out)
        .and_broadcast(a)
        .and_broadcast(b)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn normalize_rows(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < eps {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
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

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    /// Recorded values in node order.
    pub fn values(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn eval<'a>(op: &Op, values: impl Fn(Var) -> &'a Array2<f64>) -> Array2<f64> {
        use Op::*;
        match op {
            Leaf => unreachable!("leaves carry their own value"),
            Add(a, b) => zip_broadcast(values(*a), values(*b), |x, y| x + y),
            Sub(a, b) => zip_broadcast(values(*a), values(*b), |x, y| x - y),
            Mul(a, b) => zip_broadcast(values(*a), values(*b), |x, y| x * y),
            Div(a, b) => zip_broadcast(values(*a), values(*b), |x, y| x / y),
            Max(a, b) => zip_broadcast(values(*a), values(*b), f64::max),
            Neg(a) => values(*a).mapv(|x| -x),
            Scale(a, c) => values(*a).mapv(|x| x * c),
            Exp(a) => values(*a).mapv(f64::exp),
            Log(a) => values(*a).mapv(f64::ln),
            Log1p(a) => values(*a).mapv(f64::ln_1p),
            Sin(a) => values(*a).mapv(f64::sin),
            Cos(a) => values(*a).mapv(f64::cos),
            Softplus(a) => values(*a).mapv(softplus),
            Relu(a) => values(*a).mapv(|x| x.max(0.0)),
            Abs(a) => values(*a).mapv(f64::abs),
            MatMul(a, b) => values(*a).dot(values(*b)),
            SumCols(a) => values(*a).sum_axis(Axis(1)).insert_axis(Axis(1)),
            SumRows(a) => values(*a).sum_axis(Axis(0)).insert_axis(Axis(0)),
            NormalizeRows(a, eps) => normalize_rows(values(*a), *eps),
            ConcatCols(vs) => {
                let views: Vec<_> = vs.iter().map(|v| values(*v).view()).collect();
                ndarray::concatenate(Axis(1), &views).expect("row counts agree")
            }
            SliceCols(a, start, end) => values(*a).slice(s![.., *start..*end]).to_owned(),
            Reshape(_) => unreachable!("reshape evaluated with its target shape"),
            Transpose(a) => values(*a).t().to_owned(),
            GatherRows(a, idx) => values(*a).select(Axis(0), idx),
        }
    }

    fn record(&mut self, op: Op) -> Var {
        let nodes = &self.nodes;
        let value = Self::eval(&op, |v: Var| &nodes[v.0].value);
        self.push(op, value)
    }

    fn check_same_rows(&self, a: Var, b: Var, what: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            broadcast_shape(sa, sb).is_some(),
            "{what}: incompatible shapes {sa:?} and {sb:?}"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same_rows(a, b, "add");
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same_rows(a, b, "sub");
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same_rows(a, b, "mul");
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_same_rows(a, b, "div");
        self.record(Op::Div(a, b))
    }

    /// Elementwise maximum; at ties neither operand receives gradient.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.check_same_rows(a, b, "max");
        self.record(Op::Max(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.record(Op::Neg(a))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = self.scalar(c);
        self.add(a, k)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.record(Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.record(Op::Log(a))
    }

    pub fn ln_1p(&mut self, a: Var) -> Var {
        self.record(Op::Log1p(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.record(Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.record(Op::Cos(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.record(Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(Op::Relu(a))
    }

    /// Absolute value; subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        self.record(Op::Abs(a))
    }

    /// Matrix product: a batch of dot products.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.1, sb.0, "matmul: {sa:?} x {sb:?}");
        self.record(Op::MatMul(a, b))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.record(Op::SumCols(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.record(Op::SumRows(a))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let r = self.sum_cols(a);
        self.sum_rows(r)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        self.record(Op::NormalizeRows(a, eps))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        assert!(
            parts.iter().all(|p| self.shape(*p).0 == rows),
            "concat_cols: row counts differ"
        );
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start <= end && end <= self.shape(a).1);
        self.record(Op::SliceCols(a, start, end))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: size mismatch");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("size checked");
        self.push(Op::Reshape(a), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.record(Op::Transpose(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let rows = self.shape(a).0;
        assert!(idx.iter().all(|&i| i < rows), "gather_rows: index out of range");
        self.record(Op::GatherRows(a, idx.to_vec()))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `exp(x - softplus(x))`, the logistic function composed from primitives.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let sp = self.softplus(a);
        let d = self.sub(a, sp);
        self.exp(d)
    }

    /// Recomputes every node from the leaves in recorded order.
    pub fn replay(&self) -> Vec<Array2<f64>> {
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Reshape(a) => {
                    let flat: Vec<f64> = values[a.0].iter().copied().collect();
                    Array2::from_shape_vec(node.value.dim(), flat).expect("recorded shape")
                }
                op => Self::eval(op, |v: Var| &values[v.0]),
            };
            values.push(v);
        }
        values
    }

    /// Hash of the active branch at every kink (relu, abs, max, guarded normalize).
    ///
    /// Two tapes with equal structure and equal signatures are on the same
    /// smooth piece, so central differences between them are meaningful.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    for &x in self.value(*a) {
                        (x > 0.0).hash(&mut h);
                        (x < 0.0).hash(&mut h);
                    }
                }
                Op::Max(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let out = zip_broadcast(va, vb, |x, y| {
                        if x > y {
                            1.0
                        } else if x < y {
                            2.0
                        } else {
                            0.0
                        }
                    });
                    for &x in &out {
                        (x as u8).hash(&mut h);
                    }
                }
                Op::NormalizeRows(_, _) => {
                    for row in node.value.rows() {
                        row.iter().all(|&x| x == 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradient of the scalar `loss` with respect to each of `wrt`.
    ///
    /// Parameters not reachable from `loss` get an exact zero matrix.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient requested of non-scalar node with shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads = self.backward(loss);
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.0]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(self.shape(*v)))
            })
            .collect())
    }

    fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = reduce_to(g, self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        use Op::*;
        let val = |v: Var| self.value(v);
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Leaf => {}
            Add(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Sub(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.mapv(|x| -x));
                }
            }
            Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, zip_broadcast(g, val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, zip_broadcast(g, val(*a), |x, y| x * y));
                }
            }
            Div(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, zip_broadcast(g, val(*b), |x, y| x / y));
                }
                if needs(*b) {
                    let q = zip_broadcast(val(*a), val(*b), |x, y| -x / (y * y));
                    self.accumulate(grads, *b, zip_broadcast(g, &q, |x, y| x * y));
                }
            }
            Max(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    let m = zip_broadcast(va, vb, |x, y| if x > y { 1.0 } else { 0.0 });
                    self.accumulate(grads, *a, zip_broadcast(g, &m, |x, y| x * y));
                }
                if needs(*b) {
                    let m = zip_broadcast(va, vb, |x, y| if y > x { 1.0 } else { 0.0 });
                    self.accumulate(grads, *b, zip_broadcast(g, &m, |x, y| x * y));
                }
            }
            Neg(a) => self.accumulate(grads, *a, g.mapv(|x| -x)),
            Scale(a, c) => self.accumulate(grads, *a, g.mapv(|x| x * c)),
            Exp(a) => self.accumulate(grads, *a, g * &node.value),
            Log(a) => self.accumulate(grads, *a, g / val(*a)),
            Log1p(a) => {
                let d = val(*a).mapv(|x| 1.0 / (1.0 + x));
                self.accumulate(grads, *a, g * &d)
            }
            Sin(a) => self.accumulate(grads, *a, g * &val(*a).mapv(f64::cos)),
            Cos(a) => self.accumulate(grads, *a, g * &val(*a).mapv(|x| -x.sin())),
            Softplus(a) => self.accumulate(grads, *a, g * &val(*a).mapv(sigmoid)),
            Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, d)
            }
            Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    *d *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, d)
            }
            MatMul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            SumCols(a) => {
                let shape = self.shape(*a);
                let full = g.broadcast(shape).expect("column broadcast").to_owned();
                self.accumulate(grads, *a, full)
            }
            SumRows(a) => {
                let shape = self.shape(*a);
                let full = g.broadcast(shape).expect("row broadcast").to_owned();
                self.accumulate(grads, *a, full)
            }
            NormalizeRows(a, eps) => {
                let x = val(*a);
                let mut d = Array2::zeros(x.dim());
                for ((xr, yr), (gr, mut dr)) in x
                    .rows()
                    .into_iter()
                    .zip(node.value.rows())
                    .zip(g.rows().into_iter().zip(d.rows_mut()))
                {
                    let norm = xr.dot(&xr).sqrt();
                    if norm < *eps {
                        continue;
                    }
                    let yg = yr.dot(&gr);
                    Zip::from(&mut dr)
                        .and(&gr)
                        .and(&yr)
                        .for_each(|d, &g, &y| *d = (g - y * yg) / norm);
                }
                self.accumulate(grads, *a, d)
            }
            ConcatCols(vs) => {
                let mut start = 0;
                for v in vs {
                    let w = self.shape(*v).1;
                    if needs(*v) {
                        self.accumulate(grads, *v, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*end]).assign(g);
                self.accumulate(grads, *a, d)
            }
            Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                let d = Array2::from_shape_vec(self.shape(*a), flat).expect("reshape inverse");
                self.accumulate(grads, *a, d)
            }
            Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            GatherRows(a, idx) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (row, &i) in g.rows().into_iter().zip(idx) {
                    let mut target = d.row_mut(i);
                    target += &row;
                }
                self.accumulate(grads, *a, d)
            }
        }
    }
}
