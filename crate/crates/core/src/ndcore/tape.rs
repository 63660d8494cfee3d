use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::ops;
use super::tensor::{Bind, TapeRc, Tensor};
use super::{NdError, Result};

/// Primitive operation record. Ops save exactly the tensors their VJP needs.
/// Saved tensors are stored detached (a node must not hold an `Rc` back into
/// its own tape); a create-graph backward rebinds them through the parent
/// indices so differentiation can continue through them.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf { shape: [usize; 2] },
    Matmul { a: Tensor, b: Tensor },
    Transpose,
    Add,
    Sub,
    Neg,
    Mul { a: Tensor, b: Tensor },
    Scale(f64),
    AddRow,
    SumRows { rows: usize },
    SumCols { cols: usize },
    RepeatRows,
    RepeatCols,
    SumAll { rows: usize, cols: usize },
    Spread,
    Relu { mask: Tensor },
    Tanh { y: Tensor },
    Exp { y: Tensor },
    SoftmaxRows { y: Tensor },
    LogsumexpCols { x: Tensor },
    GatherCols { onehot: Tensor },
}

pub(crate) struct Node {
    pub op: Op,
    pub parents: [Option<usize>; 2],
    pub param: bool,
}

pub(crate) struct TapeInner {
    pub gen: u64,
    pub nodes: Vec<Node>,
}

/// Ordered record of primitive operations.
///
/// Parents always precede children (the node vector is append-only), so one
/// reverse sweep visits every node at most once. `reset` bumps the generation
/// counter, invalidating every tensor bound to the old one.
pub struct Tape {
    inner: TapeRc,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                gen: 0,
                nodes: Vec::new(),
            })),
        }
    }

    pub fn generation(&self) -> u64 {
        self.inner.borrow().gen
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Register `t` as a parameter leaf; the returned copy is tape-bound.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        let gen = inner.gen;
        inner.nodes.push(Node {
            op: Op::Leaf { shape: t.shape() },
            parents: [None, None],
            param: true,
        });
        drop(inner);
        t.detach().with_bind(Bind {
            tape: Rc::clone(&self.inner),
            gen,
            idx,
        })
    }

    /// Drop all nodes and advance the generation, invalidating old handles.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.gen += 1;
    }

    fn check_bound(&self, what: &str, t: &Tensor) -> Result<usize> {
        let bind = t
            .bind
            .as_ref()
            .ok_or_else(|| NdError::Contract(format!("{what} is not on the active tape")))?;
        if !Rc::ptr_eq(&bind.tape, &self.inner) {
            return Err(NdError::Contract(format!(
                "{what} belongs to a different tape"
            )));
        }
        let current = self.inner.borrow().gen;
        if bind.gen != current {
            return Err(NdError::StaleTape {
                bound: bind.gen,
                current,
            });
        }
        Ok(bind.idx)
    }

    fn check_loss(&self, loss: &Tensor) -> Result<usize> {
        let idx = self.check_bound("loss", loss)?;
        if !loss.is_scalar() {
            return Err(NdError::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                loss.shape()[0],
                loss.shape()[1]
            )));
        }
        Ok(idx)
    }

    /// Reverse sweep seeded at `loss_idx`; returns per-node adjoints up to and
    /// including `loss_idx`. Each node is visited exactly once.
    fn sweep(&self, loss_idx: usize, create_graph: bool) -> Result<Vec<Option<Tensor>>> {
        let n = loss_idx + 1;
        let mut adjoint: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adjoint[loss_idx] = Some(Tensor::scalar(1.0));

        let gen = self.inner.borrow().gen;
        for i in (0..n).rev() {
            let Some(g) = adjoint[i].clone() else {
                continue;
            };
            let (op, parents) = {
                let inner = self.inner.borrow();
                let node = &inner.nodes[i];
                if matches!(node.op, Op::Leaf { .. }) {
                    continue;
                }
                (node.op.clone(), node.parents)
            };
            let g = if create_graph { g } else { g.detach() };
            let ctx = VjpCtx {
                tape: &self.inner,
                gen,
                idx: i,
                parents,
                create_graph,
            };
            let contribs = vjp(&op, &g, &ctx)?;
            for (slot, c) in contribs {
                if let Some(p) = parents[slot] {
                    adjoint[p] = Some(match adjoint[p].take() {
                        Some(prev) => ops::add(&prev, &c)?,
                        None => c,
                    });
                }
            }
        }
        Ok(adjoint)
    }

    /// Adjoints of `loss` w.r.t. arbitrary tape-bound tensors (leaves or
    /// intermediates). With `create_graph` the returned gradients are
    /// themselves taped and differentiable. The tape stays valid.
    pub fn grad_wrt(
        &self,
        loss: &Tensor,
        wrt: &[&Tensor],
        create_graph: bool,
    ) -> Result<Vec<Tensor>> {
        let loss_idx = self.check_loss(loss)?;
        let mut idxs = Vec::with_capacity(wrt.len());
        for t in wrt {
            idxs.push(self.check_bound("wrt tensor", t)?);
        }
        let adjoint = self.sweep(loss_idx, create_graph)?;
        let mut out = Vec::with_capacity(wrt.len());
        for (t, idx) in wrt.iter().zip(idxs) {
            let g = adjoint
                .get(idx)
                .and_then(|a| a.clone())
                .unwrap_or_else(|| Tensor::zeros(t.shape()[0], t.shape()[1]));
            if !g.all_finite() {
                return Err(NdError::NonFinite("gradient".into()));
            }
            out.push(g);
        }
        Ok(out)
    }

    /// Plain-value gradient map over every parameter leaf; tape stays valid.
    pub fn grad(&self, loss: &Tensor, create_graph: bool) -> Result<Gradients> {
        let loss_idx = self.check_loss(loss)?;
        let adjoint = self.sweep(loss_idx, create_graph)?;
        let mut by_idx = BTreeMap::new();
        let inner = self.inner.borrow();
        for (i, node) in inner.nodes.iter().enumerate() {
            if let Op::Leaf { shape } = node.op {
                if node.param {
                    let g = adjoint
                        .get(i)
                        .and_then(|a| a.clone())
                        .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]));
                    if !g.all_finite() {
                        return Err(NdError::NonFinite(format!("gradient of leaf {i}")));
                    }
                    by_idx.insert(i, g);
                }
            }
        }
        Ok(Gradients {
            gen: inner.gen,
            by_idx,
        })
    }

    /// Final backward pass: gradients for every parameter leaf, after which
    /// the tape generation advances and old handles become stale.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let grads = self.grad(loss, false)?;
        self.reset();
        Ok(grads)
    }
}

/// Gradient map over parameter leaves, keyed by tape node.
pub struct Gradients {
    gen: u64,
    by_idx: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf tensor returned by `Tape::leaf`.
    pub fn wrt(&self, leaf: &Tensor) -> Result<&Tensor> {
        let bind = leaf
            .bind
            .as_ref()
            .ok_or_else(|| NdError::Contract("gradient requested for unbound tensor".into()))?;
        if bind.gen != self.gen {
            return Err(NdError::StaleTape {
                bound: bind.gen,
                current: self.gen,
            });
        }
        self.by_idx
            .get(&bind.idx)
            .ok_or_else(|| NdError::Contract("tensor is not a parameter leaf".into()))
    }

    pub fn len(&self) -> usize {
        self.by_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_idx.is_empty()
    }
}

/// Gradient mode for differentiating through an inner update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Tape the inner gradients; outer backward sees the full second-order term.
    Exact,
    /// Freeze inner gradients as constants (first-order MAML approximation).
    FirstOrder,
}

/// One differentiable SGD step: `theta_i = params_i - lr_i * d loss / d params_i`.
///
/// `params` may be leaves or intermediates (for chained steps). `lrs` are
/// `1x1` step sizes, one per parameter; bound step sizes keep the update
/// differentiable w.r.t. them in both modes. In `Exact` mode the inner
/// gradients stay on the tape; in `FirstOrder` they are constants. The tape
/// is taken from the loss, which must be recorded on one.
pub fn gradient_step(
    loss: &Tensor,
    params: &[&Tensor],
    lrs: &[&Tensor],
    mode: GradMode,
) -> Result<Vec<Tensor>> {
    if params.len() != lrs.len() {
        return Err(NdError::Contract(format!(
            "gradient_step: {} params but {} step sizes",
            params.len(),
            lrs.len()
        )));
    }
    let Some(bind) = &loss.bind else {
        return Err(NdError::Contract(
            "gradient_step requires the inner loss recorded on the tape".into(),
        ));
    };
    let tape = Tape {
        inner: Rc::clone(&bind.tape),
    };
    let grads = tape.grad_wrt(loss, params, mode == GradMode::Exact)?;
    let mut out = Vec::with_capacity(params.len());
    for ((p, lr), g) in params.iter().zip(lrs).zip(&grads) {
        let step = ops::mul_scalar(g, lr)?;
        out.push(ops::sub(p, &step)?);
    }
    Ok(out)
}

/// Rebinding context for a VJP evaluation.
struct VjpCtx<'a> {
    tape: &'a TapeRc,
    gen: u64,
    idx: usize,
    parents: [Option<usize>; 2],
    create_graph: bool,
}

impl VjpCtx<'_> {
    /// Saved input tensor for parent `slot`, rebound when building a graph.
    fn input(&self, t: &Tensor, slot: usize) -> Tensor {
        match (self.create_graph, self.parents[slot]) {
            (true, Some(idx)) => t.detach().with_bind(Bind {
                tape: Rc::clone(self.tape),
                gen: self.gen,
                idx,
            }),
            _ => t.clone(),
        }
    }

    /// Saved output tensor (the node's own value), rebound when building a graph.
    fn output(&self, t: &Tensor) -> Tensor {
        if self.create_graph {
            t.detach().with_bind(Bind {
                tape: Rc::clone(self.tape),
                gen: self.gen,
                idx: self.idx,
            })
        } else {
            t.clone()
        }
    }
}

/// Adjoint contributions per parent slot for one primitive.
fn vjp(op: &Op, g: &Tensor, ctx: &VjpCtx<'_>) -> Result<Vec<(usize, Tensor)>> {
    Ok(match op {
        Op::Leaf { .. } => vec![],
        Op::Matmul { a, b } => {
            let (a, b) = (ctx.input(a, 0), ctx.input(b, 1));
            vec![
                (0, ops::matmul(g, &ops::transpose(&b)?)?),
                (1, ops::matmul(&ops::transpose(&a)?, g)?),
            ]
        }
        Op::Transpose => vec![(0, ops::transpose(g)?)],
        Op::Add => vec![(0, g.clone()), (1, g.clone())],
        Op::Sub => vec![(0, g.clone()), (1, ops::neg(g)?)],
        Op::Neg => vec![(0, ops::neg(g)?)],
        Op::Mul { a, b } => {
            let (a, b) = (ctx.input(a, 0), ctx.input(b, 1));
            vec![(0, ops::mul(g, &b)?), (1, ops::mul(g, &a)?)]
        }
        Op::Scale(c) => vec![(0, ops::scale(g, *c)?)],
        Op::AddRow => vec![(0, g.clone()), (1, ops::sum_rows(g)?)],
        Op::SumRows { rows } => vec![(0, ops::repeat_rows(g, *rows)?)],
        Op::SumCols { cols } => vec![(0, ops::repeat_cols(g, *cols)?)],
        Op::RepeatRows => vec![(0, ops::sum_rows(g)?)],
        Op::RepeatCols => vec![(0, ops::sum_cols(g)?)],
        Op::SumAll { rows, cols } => vec![(0, ops::spread(g, *rows, *cols)?)],
        Op::Spread => vec![(0, ops::sum_all(g)?)],
        // Mask is piecewise constant: stays a plain value.
        Op::Relu { mask } => vec![(0, ops::mul(g, mask)?)],
        Op::Tanh { y } => {
            let y = ctx.output(y);
            let one = Tensor::ones(y.shape()[0], y.shape()[1]);
            vec![(0, ops::mul(g, &ops::sub(&one, &ops::mul(&y, &y)?)?)?)]
        }
        Op::Exp { y } => vec![(0, ops::mul(g, &ctx.output(y))?)],
        Op::SoftmaxRows { y } => {
            let s = ctx.output(y);
            let gs = ops::mul(g, &s)?;
            let row_dot = ops::repeat_cols(&ops::sum_cols(&gs)?, s.shape()[1])?;
            vec![(0, ops::mul(&s, &ops::sub(g, &row_dot)?)?)]
        }
        Op::LogsumexpCols { x } => {
            let x = ctx.input(x, 0);
            let s = ops::softmax_rows(&x)?;
            vec![(0, ops::mul(&ops::repeat_cols(g, x.shape()[1])?, &s)?)]
        }
        Op::GatherCols { onehot } => {
            vec![(
                0,
                ops::mul(&ops::repeat_cols(g, onehot.shape()[1])?, onehot)?,
            )]
        }
    })
}
