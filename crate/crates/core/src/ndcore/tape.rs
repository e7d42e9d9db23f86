//! Reverse-mode differentiation over a linear tape of rank-2 tensor ops.
//!
//! Every op records its output value and the ids of its inputs. `backward`
//! walks the tape once in reverse, so a node's gradient is complete by the
//! time it is visited. Nodes that do not depend on any trainable leaf are
//! skipped entirely.

use std::cell::{Ref, RefCell};

use super::{silu, silu_prime, silu_second, NdError, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    SiluPrime(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    /// Value computed outside the tape; gradients cannot pass through it.
    Opaque(&'static str),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.id].clone()),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        match self.grads[v.id].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.id].clone()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a value produced outside the tape from `inputs`. Backward
    /// fails with [`NdError::UnsupportedOp`] if a gradient reaches it.
    pub fn opaque<'t>(&'t self, name: &'static str, value: Tensor, inputs: &[Var<'t>]) -> Var<'t> {
        let needs = inputs.iter().any(|v| self.needs(v.id));
        self.push(value, Op::Opaque(name), needs)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn unary(&self, a: usize, value: Tensor, op: Op) -> Var<'_> {
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NdError> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(NdError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(loss_shape, 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let value = |i: usize| &nodes[i].value;
            let mut acc = |i: usize, contrib: Tensor| {
                if !nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(*a, g.matmul_bt(value(*b)));
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, value(*a).matmul_at(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(*a, g.matmul(value(*b)));
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, g.matmul_at(value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(*a, g.mul(value(*b)));
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, g.mul(value(*a)));
                    }
                }
                Op::AddRow(a, bias) => {
                    if nodes[*bias].needs_grad {
                        let s = g.sum_rows().reshape(value(*bias).shape().to_vec())?;
                        acc(*bias, s);
                    }
                    acc(*a, g);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::Silu(a) => acc(*a, g.zip_map(value(*a), "silu", |g, x| g * silu_prime(x))),
                Op::SiluPrime(a) => {
                    acc(*a, g.zip_map(value(*a), "silu'", |g, x| g * silu_second(x)))
                }
                Op::Square(a) => acc(*a, g.zip_map(value(*a), "square", |g, x| 2.0 * g * x)),
                Op::Sum(a) => {
                    let s = g.item();
                    acc(*a, Tensor::full(value(*a).shape().to_vec(), s));
                }
                Op::Mean(a) => {
                    let n = value(*a).len() as f64;
                    let s = g.item() / n;
                    acc(*a, Tensor::full(value(*a).shape().to_vec(), s));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = value(p).cols();
                        if nodes[p].needs_grad {
                            let piece = g.slice_cols(start, start + w);
                            acc(p, piece.reshape(value(p).shape().to_vec())?);
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let src = value(*a);
                    let mut full = Tensor::zeros([src.rows(), src.cols()]);
                    let w = end - start;
                    for r in 0..src.rows() {
                        full.row_mut(r)[*start..*end].copy_from_slice(&g.row(r)[..w]);
                    }
                    acc(*a, full.reshape(src.shape().to_vec())?);
                }
                Op::Opaque(name) => {
                    if g.data().iter().any(|&x| x != 0.0) {
                        return Err(NdError::UnsupportedOp(name));
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

// Tape ops stay inherent methods: operators would hide which calls record nodes.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().matmul(&other.value());
        self.tape.binary(self.id, other.id, v, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`
    pub fn matmul_bt(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().matmul_bt(&other.value());
        self.tape.binary(self.id, other.id, v, Op::MatMulBt(self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().add(&other.value());
        self.tape.binary(self.id, other.id, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().sub(&other.value());
        self.tape.binary(self.id, other.id, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().mul(&other.value());
        self.tape.binary(self.id, other.id, v, Op::Mul(self.id, other.id))
    }

    /// Broadcast-adds a `[1, cols]` bias to each row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let v = self.value().add_row(&bias.value());
        self.tape.binary(self.id, bias.id, v, Op::AddRow(self.id, bias.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.tape.unary(self.id, v, Op::Scale(self.id, s))
    }

    pub fn silu(self) -> Var<'t> {
        let v = self.value().map(silu);
        self.tape.unary(self.id, v, Op::Silu(self.id))
    }

    /// Elementwise SiLU derivative, itself differentiable.
    pub fn silu_prime(self) -> Var<'t> {
        let v = self.value().map(silu_prime);
        self.tape.unary(self.id, v, Op::SiluPrime(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.tape.unary(self.id, v, Op::Square(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.unary(self.id, v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.tape.unary(self.id, v, Op::Mean(self.id))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_cols(&refs)
        };
        let needs = parts.iter().any(|p| tape.needs(p.id));
        tape.push(
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            needs,
        )
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice_cols(start, end);
        self.tape.unary(self.id, v, Op::SliceCols(self.id, start, end))
    }

    /// Batch mean of per-row squared norms: `mean_i ‖row_i‖²`.
    pub fn mean_row_sq_norm(self) -> Var<'t> {
        let rows = self.value().rows() as f64;
        self.square().sum().scale(1.0 / rows)
    }
}

/// Gradient of the scalar produced by `loss_fn` with respect to each tensor
/// in `params`.
pub fn grad<F>(loss_fn: F, params: &[Tensor]) -> Result<Vec<Tensor>, NdError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.var(p.clone())).collect();
    let loss = loss_fn(&tape, &vars);
    let mut grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.take(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = grad(|_, ps| ps[0].square().sum(), &[p]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let p = Tensor::new([2], vec![5.0, -1.0]).unwrap();
        let g = grad(
            |tape, _| tape.constant(Tensor::scalar(3.0)).square().sum(),
            &[p],
        )
        .unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let p = Tensor::zeros([2, 2]);
        let err = grad(|_, ps| ps[0].square(), &[p]).err().unwrap();
        assert!(matches!(err, NdError::NonScalarLoss(_)));
    }

    #[test]
    fn opaque_blocks_gradient() {
        let p = Tensor::scalar(2.0);
        let err = grad(
            |tape, ps| {
                let v = ps[0].value().map(f64::exp);
                tape.opaque("exp", v, &[ps[0]]).sum()
            },
            &[p],
        )
        .err()
        .unwrap();
        assert!(matches!(err, NdError::UnsupportedOp("exp")));
    }

    #[test]
    fn reused_node_accumulates() {
        // d/dp (p*p + p) = 2p + 1
        let p = Tensor::scalar(1.5);
        let g = grad(|_, ps| ps[0].mul(ps[0]).add(ps[0]).sum(), &[p]).unwrap();
        assert!((g[0].item() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn slice_and_concat_route_gradients() {
        let p = Tensor::from_rows(&[[1.0, 2.0, 3.0]]);
        let g = grad(
            |_, ps| {
                let a = ps[0].slice_cols(0, 1).scale(2.0);
                let b = ps[0].slice_cols(2, 3).scale(5.0);
                Var::concat_cols(&[a, b]).sum()
            },
            &[p],
        )
        .unwrap();
        assert_eq!(g[0].data(), &[2.0, 0.0, 5.0]);
    }
}
