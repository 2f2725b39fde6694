use std::fmt;

use ndarray::{Array2, Axis as NdAxis, Zip};

use super::params::{Gradients, ParamId, ParamStore};
use super::special::{digamma, ln_1m_exp, ln_gamma, sigmoid, softplus};
use super::{DiffError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Elementwise operations with built-in backward rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Tanh,
    Sqrt,
    Neg,
    Square,
    Lgamma,
    /// `ln(1 - e^x)` for `x < 0`.
    Ln1mExp,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 10] = [
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sigmoid,
        UnaryOp::Softplus,
        UnaryOp::Tanh,
        UnaryOp::Sqrt,
        UnaryOp::Neg,
        UnaryOp::Square,
        UnaryOp::Lgamma,
        UnaryOp::Ln1mExp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Neg => "neg",
            UnaryOp::Square => "square",
            UnaryOp::Lgamma => "lgamma",
            UnaryOp::Ln1mExp => "ln1mexp",
        }
    }

    fn in_domain(self, x: f64) -> bool {
        match self {
            UnaryOp::Log | UnaryOp::Sqrt | UnaryOp::Lgamma => x > 0.0,
            UnaryOp::Ln1mExp => x < 0.0,
            _ => true,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Neg => -x,
            UnaryOp::Square => x * x,
            UnaryOp::Lgamma => ln_gamma(x),
            UnaryOp::Ln1mExp => ln_1m_exp(x),
        }
    }

    /// dy/dx given input `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Neg => -1.0,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Lgamma => digamma(x),
            UnaryOp::Ln1mExp => -1.0 / (-x).exp_m1(),
        }
    }
}

impl fmt::Display for UnaryOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Reduction direction. `Rows` collapses the row dimension (result `1×m`),
/// `Cols` collapses columns (result `n×1`), `All` gives `1×1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

type Derivative = Box<dyn Fn(f64) -> f64>;

enum Op {
    Leaf,
    Param(ParamId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    Custom(NodeId, Derivative),
    Scale(NodeId, f64),
    Shift(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Reduce(Reduce, Axis, NodeId),
    BroadcastCols(NodeId),
    LogSoftmax(NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run computation graph. Nodes are appended in evaluation order,
/// so the node list is already a topological order.
pub struct Graph {
    nodes: Vec<Node>,
    track_params: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records gradients for parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: true,
            backward_done: false,
        }
    }

    /// A graph in which parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is recorded.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = store.get(id).value.clone();
        if self.track_params {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::Shape {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    /// `x W + b` with `b` a `1×m` row broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let ((n, a), (a2, m), (b1, m2)) = (self.shape(x), self.shape(w), self.shape(b));
        if a != a2 || b1 != 1 || m != m2 {
            return Err(DiffError::Shape {
                op: "affine",
                detail: format!("x {:?}, W {:?}, b {:?}", (n, a), (a2, m), (b1, m2)),
            });
        }
        let mut out = self.value(x).dot(self.value(w));
        out += self.value(b);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let ((n, k), (k2, m)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(DiffError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", (n, k), (k2, m)),
            });
        }
        let out = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_same("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_same("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_same("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn unary(&mut self, op: UnaryOp, x: NodeId) -> Result<NodeId, DiffError> {
        let xv = self.value(x);
        if let Some(((r, c), &v)) = xv.indexed_iter().find(|(_, &v)| !op.in_domain(v)) {
            return Err(DiffError::Domain {
                op: op.name(),
                index: (r, c),
                value: v,
            });
        }
        let out = xv.mapv(|v| op.apply(v));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Unary(op, x), rg))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn lgamma(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(UnaryOp::Lgamma, x)
    }

    /// Elementwise op with caller-supplied forward and derivative. Used for
    /// one-off functions and to exercise the gradient checker.
    pub fn custom_unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> NodeId {
        let out = self.value(x).mapv(f);
        let rg = self.rg(&[x]);
        self.push(out, Op::Custom(x, Box::new(df)), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x) * c;
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x + c` for a scalar constant.
    pub fn shift(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x) + c;
        let rg = self.rg(&[x]);
        self.push(out, Op::Shift(x), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever clamping applied.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let out = self.value(x).mapv(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn reduce(&mut self, kind: Reduce, axis: Axis, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (n, m) = v.dim();
        let mut out = match axis {
            Axis::Rows => v.sum_axis(NdAxis(0)).insert_axis(NdAxis(0)),
            Axis::Cols => v.sum_axis(NdAxis(1)).insert_axis(NdAxis(1)),
            Axis::All => Array2::from_elem((1, 1), v.sum()),
        };
        if kind == Reduce::Mean {
            let count = match axis {
                Axis::Rows => n,
                Axis::Cols => m,
                Axis::All => n * m,
            };
            out /= count.max(1) as f64;
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Reduce(kind, axis, x), rg)
    }

    pub fn sum(&mut self, x: NodeId, axis: Axis) -> NodeId {
        self.reduce(Reduce::Sum, axis, x)
    }

    pub fn mean(&mut self, x: NodeId, axis: Axis) -> NodeId {
        self.reduce(Reduce::Mean, axis, x)
    }

    /// Repeats an `n×1` column across `cols` columns.
    pub fn broadcast_cols(&mut self, x: NodeId, cols: usize) -> Result<NodeId, DiffError> {
        let (n, c) = self.shape(x);
        if c != 1 {
            return Err(DiffError::Shape {
                op: "broadcast_cols",
                detail: format!("expected n×1, got {:?}", (n, c)),
            });
        }
        let out = self
            .value(x)
            .broadcast((n, cols))
            .expect("n×1 broadcasts to n×cols")
            .to_owned();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::BroadcastCols(x), rg))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row -= lse;
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Reverse sweep from a `1×1` loss. May run once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        if self.backward_done {
            return Err(DiffError::Contract(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(DiffError::Contract(format!(
                "backward needs a 1×1 loss, got {shape:?}"
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop(before, node, &g);
            node.grad = Some(g);
        }
        Ok(())
    }

    /// Gradients of every parameter that entered the graph.
    pub fn param_gradients(&self, store: &ParamStore) -> Gradients {
        let mut grads = Gradients::zeros_like(store);
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                grads.accumulate(*id, g);
            }
        }
        grads
    }
}

fn accumulate(nodes: &mut [Node], id: NodeId, contrib: Tensor) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => *g += &contrib,
        None => node.grad = Some(contrib),
    }
}

fn backprop(before: &mut [Node], node: &Node, g: &Tensor) {
    let rg = |before: &[Node], id: NodeId| before[id.0].requires_grad;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Affine { x, w, b } => {
            if rg(before, *x) {
                let gx = g.dot(&before[w.0].value.t());
                accumulate(before, *x, gx);
            }
            if rg(before, *w) {
                let gw = before[x.0].value.t().dot(g);
                accumulate(before, *w, gw);
            }
            if rg(before, *b) {
                accumulate(before, *b, g.sum_axis(NdAxis(0)).insert_axis(NdAxis(0)));
            }
        }
        Op::MatMul(a, b) => {
            if rg(before, *a) {
                let ga = g.dot(&before[b.0].value.t());
                accumulate(before, *a, ga);
            }
            if rg(before, *b) {
                let gb = before[a.0].value.t().dot(g);
                accumulate(before, *b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(before, *a, g.clone());
            accumulate(before, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(before, *a, g.clone());
            accumulate(before, *b, -g);
        }
        Op::Mul(a, b) => {
            if rg(before, *a) {
                let ga = g * &before[b.0].value;
                accumulate(before, *a, ga);
            }
            if rg(before, *b) {
                let gb = g * &before[a.0].value;
                accumulate(before, *b, gb);
            }
        }
        Op::Unary(op, x) => {
            let mut gx = g.clone();
            Zip::from(&mut gx)
                .and(&before[x.0].value)
                .and(&node.value)
                .for_each(|gi, &xi, &yi| *gi *= op.derivative(xi, yi));
            accumulate(before, *x, gx);
        }
        Op::Custom(x, df) => {
            let mut gx = g.clone();
            Zip::from(&mut gx)
                .and(&before[x.0].value)
                .for_each(|gi, &xi| *gi *= df(xi));
            accumulate(before, *x, gx);
        }
        Op::Scale(x, c) => accumulate(before, *x, g * *c),
        Op::Shift(x) => accumulate(before, *x, g.clone()),
        Op::Clamp { x, lo, hi } => {
            let mut gx = g.clone();
            Zip::from(&mut gx)
                .and(&before[x.0].value)
                .for_each(|gi, &xi| {
                    if xi < *lo || xi > *hi {
                        *gi = 0.0;
                    }
                });
            accumulate(before, *x, gx);
        }
        Op::Reduce(kind, axis, x) => {
            let (n, m) = before[x.0].value.dim();
            let mut gx = g
                .broadcast((n, m))
                .expect("reduction output broadcasts to input")
                .to_owned();
            if *kind == Reduce::Mean {
                let count = match axis {
                    Axis::Rows => n,
                    Axis::Cols => m,
                    Axis::All => n * m,
                };
                gx /= count.max(1) as f64;
            }
            accumulate(before, *x, gx);
        }
        Op::BroadcastCols(x) => {
            accumulate(before, *x, g.sum_axis(NdAxis(1)).insert_axis(NdAxis(1)));
        }
        Op::LogSoftmax(x) => {
            let mut gx = g.clone();
            for (mut grow, yrow) in gx.rows_mut().into_iter().zip(node.value.rows()) {
                let gsum = grow.sum();
                Zip::from(&mut grow)
                    .and(&yrow)
                    .for_each(|gi, &yi| *gi -= yi.exp() * gsum);
            }
            accumulate(before, *x, gx);
        }
    }
}
