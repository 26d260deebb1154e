use super::graph::{Graph, NodeId};
use super::real::{Dual, Real};
use crate::error::{check_dim, Error, Result};
use crate::tensor::{norm2, Tensor};

/// A scalar map `theta -> f(theta)` that can be replayed on any [`Real`].
///
/// Implementations must be deterministic: equal inputs build equal graphs.
pub trait ScalarFunction: Sync {
    fn dim(&self) -> usize;
    fn build<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<NodeId>;
}

/// A loss defined per data sample, plus its batch-mean counterpart.
pub trait SampleLoss: Sync {
    fn dim(&self) -> usize;

    /// Loss of one sample with features `x` and label `y`.
    fn build_sample<T: Real>(&self, g: &mut Graph<'_, T>, x: &[f64], y: usize) -> Result<NodeId>;

    /// Mean loss over the rows of `x`, evaluated with batched primitives.
    fn build_batch<T: Real>(&self, g: &mut Graph<'_, T>, x: &Tensor, y: &[usize]) -> Result<NodeId>;
}

/// `theta -> loss(theta; x, y)` for one fixed sample.
#[derive(Clone, Copy)]
pub struct SampleObjective<'a, L> {
    pub loss: &'a L,
    pub x: &'a [f64],
    pub y: usize,
}

impl<L: SampleLoss> ScalarFunction for SampleObjective<'_, L> {
    fn dim(&self) -> usize {
        self.loss.dim()
    }
    fn build<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<NodeId> {
        self.loss.build_sample(g, self.x, self.y)
    }
}

/// `theta -> mean loss(theta; X, Y)` over a fixed batch.
#[derive(Clone, Copy)]
pub struct BatchObjective<'a, L> {
    pub loss: &'a L,
    pub x: &'a Tensor,
    pub y: &'a [usize],
}

impl<L: SampleLoss> ScalarFunction for BatchObjective<'_, L> {
    fn dim(&self) -> usize {
        self.loss.dim()
    }
    fn build<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<NodeId> {
        self.loss.build_batch(g, self.x, self.y)
    }
}

pub fn value<F: ScalarFunction>(f: &F, theta: &[f64]) -> Result<f64> {
    check_dim("value", f.dim(), theta.len())?;
    let mut g = Graph::new(theta);
    let root = f.build(&mut g)?;
    g.scalar(root)
}

pub fn value_and_grad<F: ScalarFunction>(f: &F, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim("grad", f.dim(), theta.len())?;
    let mut g = Graph::new(theta);
    let root = f.build(&mut g)?;
    let v = g.scalar(root)?;
    Ok((v, g.backward(root)?))
}

/// Reverse-mode gradient of `f` at `theta`.
pub fn grad<F: ScalarFunction>(f: &F, theta: &[f64]) -> Result<Vec<f64>> {
    value_and_grad(f, theta).map(|(_, g)| g)
}

fn dual_params(theta: &[f64], v: &[f64]) -> Result<Vec<Dual>> {
    check_dim("direction", theta.len(), v.len())?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("direction must be finite"));
    }
    Ok(theta.iter().zip(v).map(|(&t, &e)| Dual::new(t, e)).collect())
}

/// Forward-mode directional derivative: returns `(f(theta), <grad f, v>)`.
pub fn jvp<F: ScalarFunction>(f: &F, theta: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    check_dim("jvp", f.dim(), theta.len())?;
    let params = dual_params(theta, v)?;
    let mut g = Graph::new(&params);
    let root = f.build(&mut g)?;
    let out = g.scalar(root)?;
    Ok((out.re, out.eps))
}

/// Gradient and Hessian-vector product from one forward-over-reverse pass.
///
/// The reverse sweep runs over dual numbers whose tangent is seeded with
/// `v`; the primal parts of the result are `grad f(theta)` and the tangent
/// parts are `H(theta) v`. The Hessian is never formed.
pub fn grad_and_hvp<F: ScalarFunction>(f: &F, theta: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim("hvp", f.dim(), theta.len())?;
    let params = dual_params(theta, v)?;
    let mut g = Graph::new(&params);
    let root = f.build(&mut g)?;
    let dg = g.backward(root)?;
    Ok(dg.into_iter().map(|d| (d.re, d.eps)).unzip())
}

pub fn hvp<F: ScalarFunction>(f: &F, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    grad_and_hvp(f, theta, v).map(|(_, hv)| hv)
}

/// Per-sample gradients `g_i` stacked as an `l x d` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGradients {
    dim: usize,
    grads: Vec<f64>,
    norms: Vec<f64>,
    losses: Vec<f64>,
}

impl PerSampleGradients {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            grads: Vec::new(),
            norms: Vec::new(),
            losses: Vec::new(),
        }
    }

    /// Builds from explicit rows; norms are recomputed, losses set to zero.
    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut out = Self::empty(dim);
        for r in rows {
            out.push(r, 0.0)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, row: &[f64], loss: f64) -> Result<()> {
        check_dim("per-sample row", self.dim, row.len())?;
        self.norms.push(norm2(row));
        self.grads.extend_from_slice(row);
        self.losses.push(loss);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batch_size(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.grads[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.grads.chunks_exact(self.dim.max(1)).take(self.batch_size())
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    /// Row mean over the observed rows; the zero vector when empty.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = crate::tensor::sum_rows(self.rows(), self.dim);
        if !self.is_empty() {
            let l = self.batch_size() as f64;
            for a in &mut acc {
                *a /= l;
            }
        }
        acc
    }

    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            return 0.0;
        }
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// One-sample gradient for every row of `x`, computed by replaying the tape
/// per sample. Rows come back in batch order.
pub fn per_sample_grads<L: SampleLoss>(loss: &L, theta: &[f64], x: &Tensor, y: &[usize]) -> Result<PerSampleGradients> {
    per_sample_map(loss, theta, x, y, |obj, th| value_and_grad(obj, th))
}

/// Generalised per-sample driver: `rule` maps one sample objective at
/// `theta` to `(loss, row)`.
pub fn per_sample_map<L, R>(loss: &L, theta: &[f64], x: &Tensor, y: &[usize], mut rule: R) -> Result<PerSampleGradients>
where
    L: SampleLoss,
    R: FnMut(&SampleObjective<'_, L>, &[f64]) -> Result<(f64, Vec<f64>)>,
{
    check_dim("per_sample_grads theta", loss.dim(), theta.len())?;
    check_dim("per_sample_grads labels", x.rows(), y.len())?;
    let mut out = PerSampleGradients::empty(theta.len());
    out.grads.reserve(x.rows() * theta.len());
    for (i, &yi) in y.iter().enumerate() {
        let obj = SampleObjective {
            loss,
            x: x.row(i),
            y: yi,
        };
        let (l, g) = rule(&obj, theta)?;
        out.push(&g, l)?;
    }
    Ok(out)
}
