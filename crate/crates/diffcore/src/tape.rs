//! Operation recording and the reverse sweep.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so the node list is already topologically sorted. [`Tape::backward`] walks
//! it once in reverse, accumulating gradient contributions additively when a
//! value fans out to several consumers.

use std::cell::RefCell;
use std::rc::Rc;

use crate::array::{check_shape, DiffArray};
use crate::error::{DiffError, Result};
use crate::ops;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this crate.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, given the upstream gradient of
    /// the output. Return `None` for inputs that receive no gradient.
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    Affine { x: Var, scale: f64 },
    ScaleRows { x: Var, s: Var },
    Concat { a: Var, b: Var },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    Transpose { x: Var },
    SoftmaxRows { x: Var },
    L2Normalize { x: Var, norms: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, geom: ops::conv::ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: ops::norm::BnSaved },
    MeanChannels { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomOp> },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Rc<[f64]>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records one forward pass. Confined to a single thread; discard after
/// calling [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    /// Records an array; gradients flow into it iff `array.requires_grad()`.
    pub fn leaf(&self, array: &DiffArray) -> Var {
        self.push_node(
            array.shape().to_vec(),
            array.data().to_vec(),
            Op::Leaf,
            array.requires_grad(),
        )
    }

    /// Records an array that never receives gradient.
    pub fn constant(&self, array: &DiffArray) -> Var {
        self.push_shared(array.shape().to_vec(), array.data().into(), Op::Leaf, false)
    }

    /// Records an array that always receives gradient.
    pub fn param(&self, array: &DiffArray) -> Var {
        self.push_shared(array.shape().to_vec(), array.data().into(), Op::Leaf, true)
    }

    /// Records raw data as a constant leaf.
    pub fn input(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(DiffError::DataLength {
                shape,
                expected: n,
                actual: data.len(),
            });
        }
        Ok(self.push_node(shape, data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Rc<[f64]> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn to_array(&self, v: Var) -> DiffArray {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        DiffArray::new(node.shape.clone(), node.value.to_vec())
            .expect("tape nodes always hold consistent shapes")
    }

    /// Value of a single-element variable.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        if node.value.len() != 1 {
            return Err(DiffError::NonScalarLoss(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.len() {
            return Err(DiffError::UnknownVar(v.0));
        }
        Ok(())
    }

    /// Shape, value and grad flag of an input, checked for membership.
    pub(crate) fn fetch(&self, v: Var) -> Result<(Vec<usize>, Rc<[f64]>, bool)> {
        self.check(v)?;
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        Ok((node.shape.clone(), Rc::clone(&node.value), node.requires_grad))
    }

    pub(crate) fn push_node(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        self.push_shared(shape, data.into(), op, requires_grad)
    }

    fn push_shared(&self, shape: Vec<usize>, data: Rc<[f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: data,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records an operation whose backward rule lives outside this crate.
    pub fn custom(
        &self,
        inputs: &[Var],
        shape: Vec<usize>,
        data: Vec<f64>,
        rule: Box<dyn CustomOp>,
    ) -> Result<Var> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(DiffError::DataLength {
                shape,
                expected: n,
                actual: data.len(),
            });
        }
        let mut requires_grad = false;
        for &v in inputs {
            requires_grad |= self.fetch(v)?.2;
        }
        Ok(self.push_node(
            shape,
            data,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            requires_grad,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf recorded with gradient tracking receives its total
    /// derivative, zero if the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(DiffError::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut store = GradStore {
            nodes: &nodes,
            grads: vec![None; nodes.len()],
        };
        if loss_node.requires_grad {
            store.grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = store.grads[id].take() else {
                continue;
            };
            ops::backward(&node.op, &node.shape, &node.value, &g, &mut store);
        }
        let mut grads = store.grads;
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) struct GradStore<'n> {
    pub nodes: &'n [Node],
    pub grads: Vec<Option<Vec<f64>>>,
}

impl GradStore<'_> {
    /// Zero-initialized accumulation buffer for `v`, or `None` when `v`
    /// does not track gradients.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn add(&mut self, v: Var, contribution: &[f64]) {
        if let Some(slot) = self.slot(v) {
            for (s, c) in slot.iter_mut().zip(contribution) {
                *s += c;
            }
        }
    }
}

/// Result of a backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
