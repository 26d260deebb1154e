//! Tensor-level Wengert tape.
//!
//! Nodes are recorded in evaluation order during the forward pass. Parameter
//! leaves are views into the borrowed parameter slice, so building a graph
//! never copies `theta`. `backward` walks the tape in reverse and writes the
//! parameter gradient into a single flat buffer of length `d`.
//!
//! All backward rules are written in terms of [`Real`] arithmetic, which is
//! what makes the tape differentiable again when it runs over dual numbers.

use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    SquaredError { pred: NodeId, target: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SquaredError { .. } => "squared_error",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op,
    rows: usize,
    cols: usize,
    // Empty for parameter views.
    value: Vec<T>,
    // Saved forward quantities (softmax probabilities).
    cache: Vec<T>,
    requires_grad: bool,
}

/// A recording of one forward evaluation over parameters of type `T`.
pub struct Graph<'p, T: Real> {
    params: &'p [T],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p [T]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(32),
        }
    }

    pub fn param_dim(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        let n = &self.nodes[id.0];
        match n.op {
            Op::Param { offset } => &self.params[offset..offset + n.rows * n.cols],
            _ => &n.value,
        }
    }

    /// The value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> Result<T> {
        let (r, c) = self.shape(id);
        if r * c != 1 {
            return Err(Error::contract(format!(
                "expected a scalar node, found shape {r}x{c}"
            )));
        }
        Ok(self.value(id)[0])
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<T>, requires_grad: bool) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                op: op.name(),
                node: id.0,
            });
        }
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            cache: Vec::new(),
            requires_grad,
        });
        Ok(id)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant `rows x cols` input (no gradient flows into it).
    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Graph::constant",
                expected: rows * cols,
                got: data.len(),
            });
        }
        let value = data.iter().map(|&x| T::from_f64(x)).collect();
        self.push(Op::Constant, rows, cols, value, false)
    }

    /// A `rows x cols` view of the parameters starting at `offset`.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Result<NodeId> {
        if offset + rows * cols > self.params.len() {
            return Err(Error::contract(format!(
                "parameter view {offset}+{} exceeds d = {}",
                rows * cols,
                self.params.len()
            )));
        }
        let id = NodeId(self.nodes.len());
        if self.params[offset..offset + rows * cols]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::NumericFailure {
                op: "param",
                node: id.0,
            });
        }
        self.nodes.push(Node {
            op: Op::Param { offset },
            rows,
            cols,
            value: Vec::new(),
            cache: Vec::new(),
            requires_grad: true,
        });
        Ok(id)
    }

    /// All parameters as one `1 x d` row.
    pub fn params_row(&mut self) -> Result<NodeId> {
        let d = self.params.len();
        self.param(0, 1, d)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        if k != k2 {
            return Err(Error::DimensionMismatch {
                context: "matmul inner dimension",
                expected: k,
                got: k2,
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let out_row = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let aip = av[i * k + p];
                let b_row = &bv[p * c..(p + 1) * c];
                for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), r, c, out, rg)
    }

    /// `a + bias`, with a `1 x c` bias broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Error::DimensionMismatch {
                context: "add_bias width",
                expected: c,
                got: br * bc,
            });
        }
        let av = self.value(a);
        let bv = self.value(bias);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(av[i * c..(i + 1) * c].iter().zip(bv).map(|(&x, &b)| x + b));
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddBias(a, bias), r, c, out, rg)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::DimensionMismatch {
                context,
                expected: sa.0 * sa.1,
                got: sb.0 * sb.1,
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), r, c, out, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), r, c, out, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), r, c, out, rg)
    }

    pub fn scale(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let s = T::from_f64(alpha);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a, alpha), r, c, out, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    /// `max(0, x)`; the subgradient at exactly zero is taken as zero.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a), |x| if x.primal() > 0.0 { x } else { T::zero() })
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Softplus(a), |x| x.softplus())
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(T) -> T) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(op, r, c, out, rg)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = T::zero();
        for &x in self.value(a) {
            s += x;
        }
        let rg = self.rg(a);
        self.push(Op::Sum(a), 1, 1, vec![s], rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (r, k) = self.shape(logits);
        if labels.len() != r {
            return Err(Error::DimensionMismatch {
                context: "softmax_cross_entropy labels",
                expected: r,
                got: labels.len(),
            });
        }
        if r == 0 {
            return Err(Error::contract("cross-entropy over an empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let z = self.value(logits);
        let mut probs = Vec::with_capacity(r * k);
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let m = row
                .iter()
                .map(|v| v.primal())
                .fold(f64::NEG_INFINITY, f64::max);
            let m_t = T::from_f64(m);
            let start = probs.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - m_t).exp();
                s += e;
                probs.push(e);
            }
            for p in &mut probs[start..] {
                *p = *p / s;
            }
            total += s.ln() - (row[y] - m_t);
        }
        let loss = total / T::from_f64(r as f64);
        let rg = self.rg(logits);
        let id = self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            1,
            1,
            vec![loss],
            rg,
        )?;
        self.nodes[id.0].cache = probs;
        Ok(id)
    }

    /// Mean over rows of the summed squared error against `target`.
    pub fn squared_error(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let (r, c) = self.shape(pred);
        if target.len() != r * c {
            return Err(Error::DimensionMismatch {
                context: "squared_error target",
                expected: r * c,
                got: target.len(),
            });
        }
        if r == 0 {
            return Err(Error::contract("squared error over an empty batch"));
        }
        let mut total = T::zero();
        for (&p, &t) in self.value(pred).iter().zip(target) {
            let e = p - T::from_f64(t);
            total += e * e;
        }
        let loss = total / T::from_f64(r as f64);
        let rg = self.rg(pred);
        self.push(
            Op::SquaredError {
                pred,
                target: target.to_vec(),
            },
            1,
            1,
            vec![loss],
            rg,
        )
    }

    /// Reverse sweep from a scalar `root`; returns `d root / d params`.
    pub fn backward(&self, root: NodeId) -> Result<Vec<T>> {
        let (r, c) = self.shape(root);
        if r * c != 1 {
            return Err(Error::contract("backward requires a scalar root"));
        }
        let mut param_grad = vec![T::zero(); self.params.len()];
        let mut grads: Vec<Vec<T>> = (0..=root.0).map(|_| Vec::new()).collect();
        grads[root.0] = vec![T::one()];

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || grads[idx].is_empty() {
                continue;
            }
            let dout = std::mem::take(&mut grads[idx]);
            if dout.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFailure {
                    op: node.op.name(),
                    node: idx,
                });
            }
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    let dst = &mut param_grad[*offset..*offset + dout.len()];
                    for (g, d) in dst.iter_mut().zip(&dout) {
                        *g += *d;
                    }
                }
                Op::MatMul(a, b) => {
                    let (rr, k) = self.shape(*a);
                    let cc = node.cols;
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let slot = self.slot(&mut grads, &mut param_grad, *a);
                        for i in 0..rr {
                            let drow = &dout[i * cc..(i + 1) * cc];
                            for p in 0..k {
                                let brow = &bv[p * cc..(p + 1) * cc];
                                let mut s = T::zero();
                                for (&dv, &bv) in drow.iter().zip(brow) {
                                    s += dv * bv;
                                }
                                slot[i * k + p] += s;
                            }
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let slot = self.slot(&mut grads, &mut param_grad, *b);
                        for i in 0..rr {
                            let drow = &dout[i * cc..(i + 1) * cc];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                let srow = &mut slot[p * cc..(p + 1) * cc];
                                for (s, &dv) in srow.iter_mut().zip(drow) {
                                    *s += aip * dv;
                                }
                            }
                        }
                    }
                }
                Op::AddBias(a, bias) => {
                    let cc = node.cols;
                    if self.rg(*a) {
                        let slot = self.slot(&mut grads, &mut param_grad, *a);
                        for (s, &dv) in slot.iter_mut().zip(&dout) {
                            *s += dv;
                        }
                    }
                    if self.rg(*bias) {
                        let slot = self.slot(&mut grads, &mut param_grad, *bias);
                        for drow in dout.chunks(cc) {
                            for (s, &dv) in slot.iter_mut().zip(drow) {
                                *s += dv;
                            }
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    if self.rg(*a) {
                        let slot = self.slot(&mut grads, &mut param_grad, *a);
                        for (s, &dv) in slot.iter_mut().zip(&dout) {
                            *s += dv;
                        }
                    }
                    if self.rg(*b) {
                        let slot = self.slot(&mut grads, &mut param_grad, *b);
                        for (s, &dv) in slot.iter_mut().zip(&dout) {
                            if negate {
                                *s -= dv;
                            } else {
                                *s += dv;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let slot = self.slot(&mut grads, &mut param_grad, *a);
                        for ((s, &dv), &y) in slot.iter_mut().zip(&dout).zip(bv) {
                            *s += dv * y;
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let slot = self.slot(&mut grads, &mut param_grad, *b);
                        for ((s, &dv), &x) in slot.iter_mut().zip(&dout).zip(av) {
                            *s += dv * x;
                        }
                    }
                }
                Op::Scale(a, alpha) => {
                    let al = T::from_f64(*alpha);
                    let slot = self.slot(&mut grads, &mut param_grad, *a);
                    for (s, &dv) in slot.iter_mut().zip(&dout) {
                        *s += dv * al;
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let slot = self.slot(&mut grads, &mut param_grad, *a);
                    for ((s, &dv), &t) in slot.iter_mut().zip(&dout).zip(y) {
                        *s += dv * (T::one() - t * t);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let slot = self.slot(&mut grads, &mut param_grad, *a);
                    for ((s, &dv), &xv) in slot.iter_mut().zip(&dout).zip(x) {
                        if xv.primal() > 0.0 {
                            *s += dv;
                        }
                    }
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    let slot = self.slot(&mut grads, &mut param_grad, *a);
                    for ((s, &dv), &xv) in slot.iter_mut().zip(&dout).zip(x) {
                        *s += dv * xv.sigmoid();
                    }
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let two = T::from_f64(2.0);
                    let slot = self.slot(&mut grads, &mut param_grad, *a);
                    for ((s, &dv), &xv) in slot.iter_mut().zip(&dout).zip(x) {
                        *s += dv * two * xv;
                    }
                }
                Op::Sum(a) => {
                    let dv = dout[0];
                    let slot = self.slot(&mut grads, &mut param_grad, *a);
                    for s in slot.iter_mut() {
                        *s += dv;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let (rr, k) = self.shape(*logits);
                    let w = dout[0] / T::from_f64(rr as f64);
                    let probs = &node.cache;
                    let slot = self.slot(&mut grads, &mut param_grad, *logits);
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let mut g = probs[i * k + j];
                            if j == y {
                                g -= T::one();
                            }
                            slot[i * k + j] += w * g;
                        }
                    }
                }
                Op::SquaredError { pred, target } => {
                    let (rr, _) = self.shape(*pred);
                    let w = dout[0] * T::from_f64(2.0 / rr as f64);
                    let p = self.value(*pred);
                    let slot = self.slot(&mut grads, &mut param_grad, *pred);
                    for ((s, &pv), &t) in slot.iter_mut().zip(p).zip(target) {
                        *s += w * (pv - T::from_f64(t));
                    }
                }
            }
        }
        if param_grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                op: "backward",
                node: root.0,
            });
        }
        Ok(param_grad)
    }

    /// Mutable gradient accumulator for `id`: the parameter buffer for
    /// views, a lazily zeroed per-node buffer otherwise.
    fn slot<'g>(&self, grads: &'g mut [Vec<T>], param_grad: &'g mut [T], id: NodeId) -> &'g mut [T] {
        let n = &self.nodes[id.0];
        let len = n.rows * n.cols;
        match n.op {
            Op::Param { offset } => &mut param_grad[offset..offset + len],
            _ => {
                let g = &mut grads[id.0];
                if g.is_empty() {
                    *g = vec![T::zero(); len];
                }
                g.as_mut_slice()
            }
        }
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_bias_forward() {
        let params = [1.0, 2.0, 3.0, 4.0, 0.5, -0.5];
        let mut g = Graph::new(&params);
        let x = g.constant(1, 2, &[1.0, 1.0]).unwrap();
        let w = g.param(0, 2, 2).unwrap();
        let b = g.param(4, 1, 2).unwrap();
        let h = g.matmul(x, w).unwrap();
        let z = g.add_bias(h, b).unwrap();
        assert_eq!(g.value(z), &[4.5, 5.5]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let params = [0.0, 0.0];
        let mut g = Graph::new(&params);
        let z = g.params_row().unwrap();
        assert!(matches!(
            g.softmax_cross_entropy(z, &[2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_finite_forward_names_the_op() {
        let params = [1e100];
        let mut g = Graph::new(&params);
        let p = g.params_row().unwrap();
        let s = g.square(p).unwrap();
        let err = g.square(s).unwrap_err();
        assert_eq!(err, Error::NumericFailure { op: "square", node: 2 });
    }

    #[test]
    fn shared_input_accumulates() {
        // f = sum(x * x) -> grad 2x
        let params = [1.5, -2.0];
        let mut g = Graph::new(&params);
        let p = g.params_row().unwrap();
        let m = g.mul(p, p).unwrap();
        let s = g.sum(m).unwrap();
        assert_eq!(g.backward(s).unwrap(), vec![3.0, -4.0]);
    }
}
