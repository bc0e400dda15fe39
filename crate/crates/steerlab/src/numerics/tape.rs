//! Record-and-replay reverse-mode autodiff over a fixed op set: linear,
//! SiLU, add, scale, column concat, row gather/broadcast, and the two
//! squared-error reductions. The whole model zoo here is small MLP stacks,
//! so a general graph engine is unnecessary.
//!
//! One tape serves one forward pass of one trainable [`ParamStore`];
//! frozen values enter through [`Tape::constant`].

use crate::error::{Result, SteerError};

use super::ops;
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Node {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Silu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    ConcatCols { parts: Vec<Var> },
    SelectRows { table: Var, ids: Vec<usize> },
    BroadcastRows { v: Var, n: usize },
    Mse { a: Var, b: Var },
    SumSqDiff { a: Var, b: Var },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    bindings: Vec<(ParamId, Var)>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node, value: Tensor) -> Var {
        self.nodes.push(node);
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    /// A value gradients flow past but are not collected for.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node::Leaf, value)
    }

    /// A trainable leaf bound to `id` in the session's store; its gradient is
    /// accumulated into `Param.grad` by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let var = self.push(Node::Leaf, store.value(id).clone());
        self.bindings.push((id, var));
        var
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Node::Linear { x, w, b }, y))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = ops::silu(self.value(x));
        self.push(Node::Silu { x }, y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Node::Add { a, b }, y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).scale(c);
        self.push(Node::Scale { x, c }, y)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let y = ops::concat_cols(&tensors)?;
        Ok(self.push(
            Node::ConcatCols {
                parts: parts.to_vec(),
            },
            y,
        ))
    }

    pub fn select_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let y = ops::select_rows(self.value(table), ids)?;
        Ok(self.push(
            Node::SelectRows {
                table,
                ids: ids.to_vec(),
            },
            y,
        ))
    }

    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let y = ops::broadcast_rows(self.value(v), n)?;
        Ok(self.push(Node::BroadcastRows { v, n }, y))
    }

    /// Mean over all entries of (a − b)²; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mse(self.value(a), self.value(b))?;
        Ok(self.push(Node::Mse { a, b }, Tensor::scalar(y)))
    }

    /// Sum over all entries of (a − b)², the squared L2 norm of the residual.
    pub fn squared_error_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::squared_error_sum(self.value(a), self.value(b))?;
        Ok(self.push(Node::SumSqDiff { a, b }, Tensor::scalar(y)))
    }

    /// Reverse pass from a scalar loss. Every bound parameter reachable from
    /// `loss` gets its gradient accumulated into `store`. A tape can run
    /// backward once; record a fresh forward pass for another.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.spent {
            return Err(SteerError::BackwardReuse);
        }
        self.spent = true;
        if self.value(loss).numel() != 1 {
            return Err(SteerError::shape(
                "Tape::backward",
                "scalar loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx] {
                Node::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Node::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        ops::linear_backward(self.value(*x), self.value(*w), &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Node::Silu { x } => {
                    let dx = ops::silu_backward(self.value(*x), &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Node::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Node::Scale { x, c } => {
                    accumulate(&mut grads, *x, dy.scale(*c));
                }
                Node::ConcatCols { parts } => {
                    let n = dy.rows();
                    let mut offset = 0;
                    for part in parts.clone() {
                        let c = self.value(part).cols();
                        let mut chunk = vec![0.0; n * c];
                        for r in 0..n {
                            chunk[r * c..(r + 1) * c]
                                .copy_from_slice(&dy.row_slice(r)[offset..offset + c]);
                        }
                        accumulate(
                            &mut grads,
                            part,
                            Tensor::new(vec![n, c], chunk).expect("shape fixed"),
                        );
                        offset += c;
                    }
                }
                Node::SelectRows { table, ids } => {
                    let shape = self.value(*table).shape().to_vec();
                    let e = shape[1];
                    let mut dt = Tensor::zeros(shape);
                    for (row, &id) in ids.iter().enumerate() {
                        let src = dy.row_slice(row).to_vec();
                        let dst = &mut dt.data_mut()[id * e..(id + 1) * e];
                        for (d, s) in dst.iter_mut().zip(&src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Node::BroadcastRows { v, n } => {
                    let shape = self.value(*v).shape().to_vec();
                    let e = dy.cols();
                    let mut dv = vec![0.0; e];
                    for r in 0..*n {
                        for (acc, g) in dv.iter_mut().zip(dy.row_slice(r)) {
                            *acc += g;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *v,
                        Tensor::new(shape, dv).expect("broadcast source is [e] or [1, e]"),
                    );
                }
                Node::Mse { a, b } => {
                    let scale = 2.0 * dy.item() / self.value(*a).numel() as f64;
                    let diff = self.value(*a).sub(self.value(*b)).expect("checked at forward");
                    accumulate(&mut grads, *a, diff.scale(scale));
                    accumulate(&mut grads, *b, diff.scale(-scale));
                }
                Node::SumSqDiff { a, b } => {
                    let scale = 2.0 * dy.item();
                    let diff = self.value(*a).sub(self.value(*b)).expect("checked at forward");
                    accumulate(&mut grads, *a, diff.scale(scale));
                    accumulate(&mut grads, *b, diff.scale(-scale));
                }
            }
        }

        for (id, var) in &self.bindings {
            if let Some(g) = &grads[var.0] {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
    match &mut grads[var.0] {
        Some(g) => {
            debug_assert!(g.same_shape(&delta));
            for (a, d) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
