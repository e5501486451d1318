//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] records every op during the forward pass; [`Tape::backward`]
//! replays the records in reverse once. The op set is closed: every
//! differentiable op here ships with a finite-difference test in
//! `tests/gradcheck.rs`, and new ops must do the same.
//!
//! One tape per training step, single-threaded. Tensors are plain values
//! and may move freely between threads; the tape itself may not.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{Tensor, NEG_INF};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct BackCtx<'a> {
    grad: &'a [f64],
    inputs: &'a [&'a Tensor],
    output: &'a Tensor,
    needs: &'a [bool],
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// A leaf tensor. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            grad: None,
            requires_grad,
            parents: vec![],
            back: None,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value_clone(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any was accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn record(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        back: BackFn,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(Node {
            value,
            grad: None,
            requires_grad,
            parents,
            back: if requires_grad { Some(back) } else { None },
        })
    }

    /// Reverse sweep from a scalar loss. Errors if called twice on one tape.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        self.backward_done.set(true);
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(nodes[loss.0].value.shape().to_vec()));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => Some(g),
                None => None,
            };
            let Some(g) = g else { continue };
            if nodes[i].requires_grad && (nodes[i].parents.is_empty() || nodes[i].back.is_some()) {
                // keep leaf grads; interior grads are also kept for inspection
                let shape = nodes[i].value.shape().to_vec();
                nodes[i].grad = Some(Tensor::new(shape, g.clone()));
            }
            let (left, right) = nodes.split_at_mut(i);
            let node = &right[0];
            let Some(back) = node.back.as_ref() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &left[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| left[p].requires_grad).collect();
            let ctx = BackCtx {
                grad: &g,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let parent_grads = back(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            let parents = node.parents.clone();
            for (j, pg) in parent_grads.into_iter().enumerate() {
                let Some(pg) = pg else { continue };
                let p = parents[j];
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += v;
                        }
                    }
                    None => grads[p] = Some(pg),
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            Self::check_same_shape("add", ta, tb)?;
            Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
            )
        };
        Ok(self.record(value, vec![a.0, b.0], Box::new(|ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.to_vec()),
            ]
        })))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            Self::check_same_shape("sub", ta, tb)?;
            Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
            )
        };
        Ok(self.record(value, vec![a.0, b.0], Box::new(|ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.iter().map(|g| -g).collect()),
            ]
        })))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            Self::check_same_shape("mul", ta, tb)?;
            Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
            )
        };
        Ok(self.record(value, vec![a.0, b.0], Box::new(|ctx| {
            vec![
                ctx.needs[0].then(|| {
                    ctx.grad.iter().zip(ctx.inputs[1].data()).map(|(g, y)| g * y).collect()
                }),
                ctx.needs[1].then(|| {
                    ctx.grad.iter().zip(ctx.inputs[0].data()).map(|(g, x)| g * x).collect()
                }),
            ]
        })))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            Self::check_same_shape("div", ta, tb)?;
            Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect(),
            )
        };
        Ok(self.record(value, vec![a.0, b.0], Box::new(|ctx| {
            vec![
                ctx.needs[0].then(|| {
                    ctx.grad.iter().zip(ctx.inputs[1].data()).map(|(g, y)| g / y).collect()
                }),
                ctx.needs[1].then(|| {
                    ctx.grad
                        .iter()
                        .zip(ctx.inputs[0].data().iter().zip(ctx.inputs[1].data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect()
                }),
            ]
        })))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())
        };
        self.record(value, vec![a.0], Box::new(move |ctx| {
            vec![ctx.needs[0].then(|| ctx.grad.iter().map(|g| g * s).collect())]
        }))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x + s).collect())
        };
        self.record(value, vec![a.0], Box::new(|ctx| {
            vec![ctx.needs[0].then(|| ctx.grad.to_vec())]
        }))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Sum of same-shape vars.
    pub fn add_n(&self, vars: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[vars[0].0].value;
            let mut data = first.data().to_vec();
            for v in &vars[1..] {
                let t = &nodes[v.0].value;
                Self::check_same_shape("add_n", first, t)?;
                for (d, x) in data.iter_mut().zip(t.data()) {
                    *d += x;
                }
            }
            Tensor::new(first.shape().to_vec(), data)
        };
        let parents: Vec<usize> = vars.iter().map(|v| v.0).collect();
        Ok(self.record(value, parents, Box::new(|ctx| {
            ctx.needs
                .iter()
                .map(|&need| need.then(|| ctx.grad.to_vec()))
                .collect()
        })))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect())
        };
        self.record(value, vec![a.0], Box::new(|ctx| {
            vec![ctx.needs[0].then(|| {
                ctx.grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect()
            })]
        }))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.exp()).collect())
        };
        self.record(value, vec![a.0], Box::new(|ctx| {
            vec![ctx.needs[0].then(|| {
                ctx.grad.iter().zip(ctx.output.data()).map(|(g, y)| g * y).collect()
            })]
        }))
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.data().iter().any(|x| *x <= 0.0) {
                return Err(Error::Numerical("ln of non-positive value".into()));
            }
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.ln()).collect())
        };
        Ok(self.record(value, vec![a.0], Box::new(|ctx| {
            vec![ctx.needs[0].then(|| {
                ctx.grad.iter().zip(ctx.inputs[0].data()).map(|(g, x)| g / x).collect()
            })]
        })))
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.0].value.data().iter().sum())
        };
        self.record(value, vec![a.0], Box::new(|ctx| {
            vec![ctx.needs[0].then(|| vec![ctx.grad[0]; ctx.inputs[0].len()])]
        }))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        };
        self.record(value, vec![a.0], Box::new(|ctx| {
            let n = ctx.inputs[0].len() as f64;
            vec![ctx.needs[0].then(|| vec![ctx.grad[0] / n; ctx.inputs[0].len()])]
        }))
    }

    /// Per-row dot product of two [r, c] matrices -> [r].
    pub fn row_dot(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            Self::check_same_shape("row_dot", ta, tb)?;
            let (r, c) = (ta.rows(), ta.cols());
            let data = (0..r)
                .map(|i| {
                    ta.data()[i * c..(i + 1) * c]
                        .iter()
                        .zip(&tb.data()[i * c..(i + 1) * c])
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect();
            Tensor::new(vec![r], data)
        };
        Ok(self.record(value, vec![a.0, b.0], Box::new(|ctx| {
            let c = ctx.inputs[0].cols();
            let expand = |other: &Tensor| -> Vec<f64> {
                other
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| ctx.grad[idx / c] * v)
                    .collect()
            };
            vec![
                ctx.needs[0].then(|| expand(ctx.inputs[1])),
                ctx.needs[1].then(|| expand(ctx.inputs[0])),
            ]
        })))
    }

    /// Euclidean norm of each row of [r, c] -> [r]. Exact 0 for a zero row;
    /// subgradient 0 there.
    pub fn row_norm(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (r, c) = (ta.rows(), ta.cols());
            let data = (0..r)
                .map(|i| {
                    ta.data()[i * c..(i + 1) * c]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            Tensor::new(vec![r], data)
        };
        self.record(value, vec![a.0], Box::new(|ctx| {
            let c = ctx.inputs[0].cols();
            vec![ctx.needs[0].then(|| {
                ctx.inputs[0]
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, x)| {
                        let n = ctx.output.data()[idx / c];
                        if n > 0.0 {
                            ctx.grad[idx / c] * x / n
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })]
        }))
    }

    /// Column means of [r, c] -> [c].
    pub fn mean_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (r, c) = (ta.rows(), ta.cols());
            let mut data = vec![0.0; c];
            for i in 0..r {
                for (d, x) in data.iter_mut().zip(&ta.data()[i * c..(i + 1) * c]) {
                    *d += x;
                }
            }
            for d in data.iter_mut() {
                *d /= r as f64;
            }
            Tensor::new(vec![c], data)
        };
        self.record(value, vec![a.0], Box::new(|ctx| {
            let (r, c) = (ctx.inputs[0].rows(), ctx.inputs[0].cols());
            vec![ctx.needs[0].then(|| {
                (0..r * c).map(|idx| ctx.grad[idx % c] / r as f64).collect()
            })]
        }))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            Tensor::new(vec![m, n], linalg::matmul_nn(ta.data(), tb.data(), m, k, n))
        };
        Ok(self.record(value, vec![a.0, b.0], Box::new(|ctx| {
            let (m, k) = (ctx.inputs[0].rows(), ctx.inputs[0].cols());
            let n = ctx.inputs[1].cols();
            vec![
                // da = g * b^T
                ctx.needs[0].then(|| linalg::matmul_nt(ctx.grad, ctx.inputs[1].data(), m, n, k)),
                // db = a^T * g
                ctx.needs[1].then(|| linalg::matmul_tn(ctx.inputs[0].data(), ctx.grad, m, k, n)),
            ]
        })))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.shape().len() != 2 {
                return Err(Error::Dimension {
                    op: "transpose",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (r, c) = (ta.rows(), ta.cols());
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = ta.at2(i, j);
                }
            }
            Tensor::new(vec![c, r], data)
        };
        Ok(self.record(value, vec![a.0], Box::new(|ctx| {
            let (r, c) = (ctx.inputs[0].rows(), ctx.inputs[0].cols());
            vec![ctx.needs[0].then(|| {
                let mut g = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        g[i * c + j] = ctx.grad[j * r + i];
                    }
                }
                g
            })]
        })))
    }

    /// Broadcast-add a [c] vector to every row of [r, c].
    pub fn add_row_vec(&self, a: Var, v: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tv) = (&nodes[a.0].value, &nodes[v.0].value);
            if ta.shape().len() != 2 || tv.shape() != [ta.cols()] {
                return Err(Error::Dimension {
                    op: "add_row_vec",
                    lhs: ta.shape().to_vec(),
                    rhs: tv.shape().to_vec(),
                });
            }
            let c = ta.cols();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(idx, x)| x + tv.data()[idx % c])
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        Ok(self.record(value, vec![a.0, v.0], Box::new(|ctx| {
            let c = ctx.inputs[1].len();
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| {
                    let mut g = vec![0.0; c];
                    for (idx, gv) in ctx.grad.iter().enumerate() {
                        g[idx % c] += gv;
                    }
                    g
                }),
            ]
        })))
    }

    pub fn concat_rows(&self, vars: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let c = nodes[vars[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for v in vars {
                let t = &nodes[v.0].value;
                if t.shape().len() != 2 || t.cols() != c {
                    return Err(Error::Dimension {
                        op: "concat_rows",
                        lhs: nodes[vars[0].0].value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, c], data)
        };
        let parents: Vec<usize> = vars.iter().map(|v| v.0).collect();
        Ok(self.record(value, parents, Box::new(|ctx| {
            let mut offset = 0;
            ctx.inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let n = t.len();
                    let g = ctx.needs[j].then(|| ctx.grad[offset..offset + n].to_vec());
                    offset += n;
                    g
                })
                .collect()
        })))
    }

    /// Rows [start, end) of a 2D matrix.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.shape().len() != 2 || end > ta.rows() || start > end {
                return Err(Error::Index(format!(
                    "slice_rows [{start}, {end}) of shape {:?}",
                    ta.shape()
                )));
            }
            let c = ta.cols();
            Tensor::new(vec![end - start, c], ta.data()[start * c..end * c].to_vec())
        };
        Ok(self.record(value, vec![a.0], Box::new(move |ctx| {
            let c = ctx.inputs[0].cols();
            vec![ctx.needs[0].then(|| {
                let mut g = vec![0.0; ctx.inputs[0].len()];
                g[start * c..start * c + ctx.grad.len()].copy_from_slice(ctx.grad);
                g
            })]
        })))
    }

    /// Same data, new shape. Backward is the identity.
    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if shape.iter().product::<usize>() != ta.len() {
                return Err(Error::Dimension {
                    op: "reshape",
                    lhs: ta.shape().to_vec(),
                    rhs: shape,
                });
            }
            Tensor::new(shape, ta.data().to_vec())
        };
        Ok(self.record(value, vec![a.0], Box::new(|ctx| {
            vec![ctx.needs[0].then(|| ctx.grad.to_vec())]
        })))
    }

    // ---- softmax family ----

    /// Row softmax with an optional additive {0, NEG_INF} bias. Positions
    /// whose bias equals the sentinel come out exactly 0; a row with every
    /// position masked is an error (callers apply their fallback first).
    pub fn masked_softmax(&self, logits: Var, bias: Option<&Tensor>) -> Result<Var> {
        let (value, mask) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[logits.0].value;
            if ta.shape().len() != 2 {
                return Err(Error::Dimension {
                    op: "masked_softmax",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![],
                });
            }
            if let Some(b) = bias {
                Self::check_same_shape("masked_softmax", ta, b)?;
            }
            let (r, c) = (ta.rows(), ta.cols());
            let mut mask = vec![false; r * c]; // true = excluded
            if let Some(b) = bias {
                for (m, bv) in mask.iter_mut().zip(b.data()) {
                    *m = *bv == NEG_INF;
                }
            }
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let row = &ta.data()[i * c..(i + 1) * c];
                let mrow = &mask[i * c..(i + 1) * c];
                let mut max = f64::NEG_INFINITY;
                for (x, m) in row.iter().zip(mrow) {
                    if !*m && *x > max {
                        max = *x;
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateRow { row: i });
                }
                let mut z = 0.0;
                let out = &mut data[i * c..(i + 1) * c];
                for ((o, x), m) in out.iter_mut().zip(row).zip(mrow) {
                    if !*m {
                        *o = (x - max).exp();
                        z += *o;
                    }
                }
                for o in out.iter_mut() {
                    *o /= z;
                }
            }
            (Tensor::new(vec![r, c], data), mask)
        };
        Ok(self.record(value, vec![logits.0], Box::new(move |ctx| {
            let (r, c) = (ctx.output.rows(), ctx.output.cols());
            vec![ctx.needs[0].then(|| {
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let y = &ctx.output.data()[i * c..(i + 1) * c];
                    let go = &ctx.grad[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        if !mask[i * c + j] {
                            g[i * c + j] = y[j] * (go[j] - dot);
                        }
                    }
                }
                g
            })]
        })))
    }

    pub fn softmax_rows(&self, logits: Var) -> Result<Var> {
        self.masked_softmax(logits, None)
    }

    /// Mean cross-entropy over rows of [n, classes] logits.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let labels = labels.to_vec();
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[logits.0].value;
            if ta.shape().len() != 2 || ta.rows() != labels.len() {
                return Err(Error::Dimension {
                    op: "cross_entropy",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![labels.len()],
                });
            }
            let (n, c) = (ta.rows(), ta.cols());
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Index(format!("label {y} out of range 0..{c}")));
                }
                let row = &ta.data()[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Tensor::scalar(total / n as f64)
        };
        Ok(self.record(value, vec![logits.0], Box::new(move |ctx| {
            let (n, c) = (ctx.inputs[0].rows(), ctx.inputs[0].cols());
            vec![ctx.needs[0].then(|| {
                let mut g = vec![0.0; n * c];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &ctx.inputs[0].data()[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / z;
                        g[i * c + j] =
                            ctx.grad[0] * (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
                    }
                }
                g
            })]
        })))
    }

    /// Per-row layer normalization of [r, c], no affine parameters.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.shape().len() != 2 {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (r, c) = (ta.rows(), ta.cols());
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let row = &ta.data()[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (o, x) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = (x - mu) * inv;
                }
            }
            Tensor::new(vec![r, c], data)
        };
        Ok(self.record(value, vec![a.0], Box::new(move |ctx| {
            let (r, c) = (ctx.inputs[0].rows(), ctx.inputs[0].cols());
            vec![ctx.needs[0].then(|| {
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let row = &ctx.inputs[0].data()[i * c..(i + 1) * c];
                    let go = &ctx.grad[i * c..(i + 1) * c];
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mu) * inv).collect();
                    let mean_g = go.iter().sum::<f64>() / c as f64;
                    let mean_gx =
                        go.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        g[i * c + j] = inv * (go[j] - mean_g - xhat[j] * mean_gx);
                    }
                }
                g
            })]
        })))
    }

    // ---- spatial ----

    /// 3x3 convolution, stride 1, pad 1: x [n,ci,h,w], w [co,ci,3,3], b [co].
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let tw = &nodes[weight.0].value;
            let tb = &nodes[bias.0].value;
            let xs = tx.shape();
            let ws = tw.shape();
            if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 {
                return Err(Error::Dimension {
                    op: "conv2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            if tb.shape() != [ws[0]] {
                return Err(Error::Dimension {
                    op: "conv2d bias",
                    lhs: tb.shape().to_vec(),
                    rhs: vec![ws[0]],
                });
            }
            let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let co = ws[0];
            let hw = h * w;
            let mut data = vec![0.0; n * co * hw];
            for img in 0..n {
                let cols = linalg::im2col3x3(&tx.data()[img * ci * hw..(img + 1) * ci * hw], ci, h, w);
                let out = linalg::matmul_nn(tw.data(), &cols, co, ci * 9, hw);
                let dst = &mut data[img * co * hw..(img + 1) * co * hw];
                dst.copy_from_slice(&out);
                for o in 0..co {
                    let bv = tb.data()[o];
                    for v in dst[o * hw..(o + 1) * hw].iter_mut() {
                        *v += bv;
                    }
                }
            }
            Tensor::new(vec![n, co, h, w], data)
        };
        Ok(self.record(value, vec![x.0, weight.0, bias.0], Box::new(|ctx| {
            let xs = ctx.inputs[0].shape();
            let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let co = ctx.inputs[1].shape()[0];
            let hw = h * w;
            let need_x = ctx.needs[0];
            let need_w = ctx.needs[1];
            let mut gx = need_x.then(|| vec![0.0; n * ci * hw]);
            let mut gw = need_w.then(|| vec![0.0; co * ci * 9]);
            if need_x || need_w {
                for img in 0..n {
                    let g_img = &ctx.grad[img * co * hw..(img + 1) * co * hw];
                    if let Some(gw) = gw.as_mut() {
                        let cols = linalg::im2col3x3(
                            &ctx.inputs[0].data()[img * ci * hw..(img + 1) * ci * hw],
                            ci,
                            h,
                            w,
                        );
                        let d = linalg::matmul_nt(g_img, &cols, co, hw, ci * 9);
                        for (a, b) in gw.iter_mut().zip(&d) {
                            *a += b;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dcols =
                            linalg::matmul_tn(ctx.inputs[1].data(), g_img, co, ci * 9, hw);
                        linalg::col2im3x3(&dcols, ci, h, w, &mut gx[img * ci * hw..(img + 1) * ci * hw]);
                    }
                }
            }
            let gb = ctx.needs[2].then(|| {
                let mut g = vec![0.0; co];
                for img in 0..n {
                    for o in 0..co {
                        g[o] += ctx.grad[img * co * hw + o * hw..img * co * hw + (o + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                }
                g
            });
            vec![gx, gw, gb]
        })))
    }

    /// 2x2 average pooling, stride 2.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let xs = tx.shape();
            if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
                return Err(Error::Dimension {
                    op: "avg_pool2",
                    lhs: xs.to_vec(),
                    rhs: vec![],
                });
            }
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (oh, ow) = (h / 2, w / 2);
            let mut data = vec![0.0; n * c * oh * ow];
            for nc in 0..n * c {
                let src = &tx.data()[nc * h * w..(nc + 1) * h * w];
                let dst = &mut data[nc * oh * ow..(nc + 1) * oh * ow];
                for y in 0..oh {
                    for xcol in 0..ow {
                        dst[y * ow + xcol] = 0.25
                            * (src[2 * y * w + 2 * xcol]
                                + src[2 * y * w + 2 * xcol + 1]
                                + src[(2 * y + 1) * w + 2 * xcol]
                                + src[(2 * y + 1) * w + 2 * xcol + 1]);
                    }
                }
            }
            Tensor::new(vec![n, c, oh, ow], data)
        };
        Ok(self.record(value, vec![x.0], Box::new(|ctx| {
            let xs = ctx.inputs[0].shape();
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (oh, ow) = (h / 2, w / 2);
            vec![ctx.needs[0].then(|| {
                let mut g = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    let go = &ctx.grad[nc * oh * ow..(nc + 1) * oh * ow];
                    let dst = &mut g[nc * h * w..(nc + 1) * h * w];
                    for y in 0..oh {
                        for xcol in 0..ow {
                            let v = 0.25 * go[y * ow + xcol];
                            dst[2 * y * w + 2 * xcol] = v;
                            dst[2 * y * w + 2 * xcol + 1] = v;
                            dst[(2 * y + 1) * w + 2 * xcol] = v;
                            dst[(2 * y + 1) * w + 2 * xcol + 1] = v;
                        }
                    }
                }
                g
            })]
        })))
    }

    /// [n,c,h,w] -> [n,c] spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let xs = tx.shape();
            if xs.len() != 4 {
                return Err(Error::Dimension {
                    op: "global_avg_pool",
                    lhs: xs.to_vec(),
                    rhs: vec![],
                });
            }
            let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let data = (0..n * c)
                .map(|nc| tx.data()[nc * hw..(nc + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect();
            Tensor::new(vec![n, c], data)
        };
        Ok(self.record(value, vec![x.0], Box::new(|ctx| {
            let xs = ctx.inputs[0].shape();
            let hw = xs[2] * xs[3];
            vec![ctx.needs[0].then(|| {
                let mut g = vec![0.0; ctx.inputs[0].len()];
                for (nc, gv) in ctx.grad.iter().enumerate() {
                    let v = gv / hw as f64;
                    for x in g[nc * hw..(nc + 1) * hw].iter_mut() {
                        *x = v;
                    }
                }
                g
            })]
        })))
    }

    /// Group flattening: [n,c,h,w] -> [n*h*w, c], row i*h*w + p holds
    /// image i's spatial position p (p = y*w + x).
    pub fn nchw_to_rows(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let xs = tx.shape();
            if xs.len() != 4 {
                return Err(Error::Dimension {
                    op: "nchw_to_rows",
                    lhs: xs.to_vec(),
                    rhs: vec![],
                });
            }
            let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let mut data = vec![0.0; n * hw * c];
            for img in 0..n {
                for ch in 0..c {
                    let src = &tx.data()[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                    for (p, v) in src.iter().enumerate() {
                        data[(img * hw + p) * c + ch] = *v;
                    }
                }
            }
            Tensor::new(vec![n * hw, c], data)
        };
        Ok(self.record(value, vec![x.0], Box::new(|ctx| {
            let xs = ctx.inputs[0].shape();
            let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            vec![ctx.needs[0].then(|| {
                let mut g = vec![0.0; n * c * hw];
                for img in 0..n {
                    for ch in 0..c {
                        let dst = &mut g[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                        for (p, v) in dst.iter_mut().enumerate() {
                            *v = ctx.grad[(img * hw + p) * c + ch];
                        }
                    }
                }
                g
            })]
        })))
    }
}
