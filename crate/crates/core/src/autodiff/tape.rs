use std::cell::RefCell;
use std::rc::Rc;

use super::op::Op;
use super::tensor::Tensor;
use crate::error::{Error, Result};

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<Tensor>,
    requires_grad: bool,
    detached: bool,
}

/// Append-only record of primitive operations.
///
/// A node only ever references lower-indexed nodes. Single owner: recording
/// and backward passes on one tape happen from one thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that rejects non-finite values at every recorded node.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            checked: true,
        }
    }

    /// A tape without the per-node finiteness guard.
    pub fn unchecked() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            checked: false,
        }
    }

    pub fn with_checks(checked: bool) -> Self {
        if checked {
            Self::new()
        } else {
            Self::unchecked()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, value: Tensor, requires_grad: bool, detached: bool) -> Var<'_> {
        self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Rc::new(value),
            requires_grad,
            detached,
        })
    }

    /// A differentiable leaf, e.g. a model parameter.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true, false)
    }

    /// A leaf that never receives gradient, e.g. input data.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false, false)
    }

    /// A constant copy of `v`, cut from the graph and flagged as detached.
    pub fn detach<'t>(&'t self, v: Var<'t>) -> Var<'t> {
        let value = (*v.value()).clone();
        self.leaf(value, false, true)
    }

    /// Records `op` applied to `inputs` and returns the output var.
    pub fn record<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        if inputs.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(Error::ForeignTape { op: op.name() });
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &*nodes[v.id].value).collect();
            let value = op.forward(&values)?;
            let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (value, rg)
        };
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            value: Rc::new(value),
            requires_grad,
            detached: false,
        }))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.record(Op::Concat, parts)
    }

    /// Recomputes every non-leaf node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf => (*node.value).clone(),
                ref op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    op.forward(&ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Recorded value of every node, in index order.
    pub fn values(&self) -> Vec<Tensor> {
        self.nodes
            .borrow()
            .iter()
            .map(|n| (*n.value).clone())
            .collect()
    }

    /// Adjoint of every node reachable backwards from `output`, seeded with
    /// `seed`. All adjoint arithmetic is recorded on this tape.
    fn adjoints<'t>(&'t self, output: Var<'t>, seed: Var<'t>) -> Result<Vec<Option<Var<'t>>>> {
        if output.shape() != seed.shape() {
            return Err(Error::Shape {
                op: "backward",
                shapes: vec![output.shape(), seed.shape()],
            });
        }
        let mut adj: Vec<Option<Var<'t>>> = vec![None; output.id + 1];
        adj[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let Some(g) = adj[id] else { continue };
            let (op, inputs, needs) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[id];
                if matches!(node.op, Op::Leaf) || !node.requires_grad {
                    continue;
                }
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|&i| nodes[i].requires_grad)
                    .collect();
                (node.op.clone(), node.inputs.clone(), needs)
            };
            let input_vars: Vec<Var<'t>> = inputs.iter().map(|&i| Var { tape: self, id: i }).collect();
            let out = Var { tape: self, id };
            let grads = op.vjp(&input_vars, out, g, &needs)?;
            for (&i, gi) in inputs.iter().zip(grads) {
                if let Some(gi) = gi {
                    adj[i] = Some(match adj[i] {
                        Some(prev) => prev.add(gi)?,
                        None => gi,
                    });
                }
            }
        }
        Ok(adj)
    }

    /// Gradient tensors of `output` with respect to every reachable node.
    pub fn backward<'t>(&'t self, output: Var<'t>, seed: Tensor) -> Result<Gradients> {
        let seed = self.constant(seed);
        let adj = self.adjoints(output, seed)?;
        Ok(Gradients {
            grads: adj.into_iter().map(|g| g.map(|v| v.value())).collect(),
        })
    }

    /// Gradients of a scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the returned vars stay connected to the graph and
    /// can be differentiated again. Without it they are detached constants.
    /// Inputs that `output` does not depend on get zeros.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        if output.value().len() != 1 {
            return Err(Error::Shape {
                op: "grad",
                shapes: vec![output.shape()],
            });
        }
        let seed = self.constant(Tensor::full(&output.shape(), 1.0));
        let adj = self.adjoints(output, seed)?;
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.id).copied().flatten() {
                Some(g) if create_graph => g,
                Some(g) => self.detach(g),
                None if create_graph => self.constant(Tensor::zeros(&w.shape())),
                None => self.leaf(Tensor::zeros(&w.shape()), false, true),
            })
            .collect())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Rc<Tensor>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` was not reached.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id).cloned().flatten() {
            Some(t) => (*t).clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }

    pub fn reached(&self, v: Var<'_>) -> bool {
        matches!(self.grads.get(v.id), Some(Some(_)))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

macro_rules! unary {
    ($($name:ident => $op:expr),* $(,)?) => {
        $(pub fn $name(self) -> Result<Var<'t>> {
            self.tape.record($op, &[self])
        })*
    };
}

macro_rules! binary {
    ($($name:ident => $op:expr),* $(,)?) => {
        $(pub fn $name(self, rhs: Var<'t>) -> Result<Var<'t>> {
            self.tape.record($op, &[self, rhs])
        })*
    };
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn index(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn is_detached(&self) -> bool {
        self.tape.nodes.borrow()[self.id].detached
    }

    pub fn op(&self) -> Op {
        self.tape.nodes.borrow()[self.id].op.clone()
    }

    unary! {
        neg => Op::Neg,
        sum_rows => Op::SumRows,
        transpose => Op::Transpose,
        tanh => Op::Tanh,
        relu => Op::Relu,
        sin => Op::Sin,
        cos => Op::Cos,
        sqrt => Op::Sqrt,
        square => Op::Square,
        sum => Op::Sum,
        mean => Op::Mean,
    }

    binary! {
        add => Op::Add,
        sub => Op::Sub,
        mul => Op::Mul,
        div => Op::Div,
        add_row => Op::AddRow,
        matmul => Op::Matmul,
        cosine_similarity => Op::CosineSimilarity,
    }

    /// `self` must be rank 0; scales every element of `rhs`.
    pub fn mul_scalar(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(Op::MulScalar, &[self, rhs])
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.record(Op::Scale(c), &[self])
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.tape.record(Op::AddScalar(c), &[self])
    }

    pub fn broadcast_rows(self, n: usize) -> Result<Var<'t>> {
        self.tape.record(Op::BroadcastRows(n), &[self])
    }

    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.record(Op::Expand(shape.to_vec()), &[self])
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.record(Op::Slice { start, len }, &[self])
    }
}
