//! Computation tape: records forward operations, replays them in reverse
//! creation order (a valid reverse topological order, since every parent
//! precedes its children) to accumulate gradients exactly once per node.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

/// Gradient slots, indexed by node id. Lazily allocated.
pub type GradStore = Vec<Option<Vec<f64>>>;

/// Backward rule: reads node values from the arena, adds contributions to
/// parent gradient slots. Never touches its own slot.
pub type BackwardFn = Box<dyn Fn(&[Node], &[f64], &mut GradStore)>;

pub struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    /// True when a gradient can flow to some leaf through this node.
    pub tracked: bool,
    backward: Option<BackwardFn>,
}

/// Ordered record of applied operations. One tape per worker; values are
/// immutable once pushed, so shared reads are safe.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// Forward-only tape: nothing is tracked, no backward closures are kept.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Id the next pushed node will receive.
    pub(crate) fn next_id(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var<'_>> {
        self.insert("leaf", data, shape, true, None)
    }

    /// Non-differentiable input.
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var<'_>> {
        self.insert("constant", data, shape, false, None)
    }

    /// Leaf whose trackedness follows the tensor's requires_grad flag.
    pub fn leaf_from(&self, t: &Tensor) -> Result<Var<'_>> {
        self.insert("leaf", t.data.clone(), t.shape.clone(), t.requires_grad, None)
    }

    pub fn scalar_const(&self, v: f64) -> Result<Var<'_>> {
        self.constant(vec![v], vec![1])
    }

    /// Record an op result. `tracked` is derived from the parents; the
    /// backward closure is dropped when gradients cannot flow anywhere.
    pub(crate) fn push(
        &self,
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: &[usize],
        backward: Option<BackwardFn>,
    ) -> Result<Var<'_>> {
        let tracked = self.recording && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].tracked)
        };
        self.insert(op, data, shape, tracked, if tracked { backward } else { None })
    }

    fn insert(
        &self,
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        tracked: bool,
        backward: Option<BackwardFn>,
    ) -> Result<Var<'_>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tape.insert",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            data,
            shape,
            tracked: tracked && self.recording,
            backward,
        });
        Ok(Var { tape: self, id })
    }

    pub(crate) fn data(&self, id: usize) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[id].data.as_slice())
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn is_tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse pass from a scalar root. Visits nodes in reverse creation
    /// order exactly once; accumulation order is fixed, so repeated runs
    /// are bit-identical.
    pub fn backward(&self, root: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.shape
            )));
        }
        if !root_node.tracked {
            return Err(Error::contract(
                "backward on an untracked value: no gradient path to any leaf",
            ));
        }
        let mut store: GradStore = vec![None; nodes.len()];
        store[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            if let Some(bw) = &nodes[id].backward {
                // Interior slots are consumed as they are visited; leaf
                // slots (no backward fn) stay for the caller.
                if let Some(g) = store[id].take() {
                    bw(&nodes, &g, &mut store);
                }
            }
        }
        Ok(Grads { store })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Accumulate into a node's gradient slot, skipping untracked nodes.
pub(crate) fn acc(
    nodes: &[Node],
    store: &mut GradStore,
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].tracked {
        return;
    }
    let len = nodes[id].data.len();
    let buf = store[id].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.data(self.id).to_vec()
    }

    pub fn scalar(&self) -> f64 {
        let d = self.tape.data(self.id);
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_tracked(self.id)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}

/// Leaf gradients produced by a backward pass.
pub struct Grads {
    store: GradStore,
}

impl Grads {
    pub fn of(&self, v: Var<'_>) -> Option<&[f64]> {
        self.store.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Vec<f64>> {
        self.store.get_mut(v.id).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ops;

    #[test]
    fn constant_graph_records_no_backward() {
        let tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], vec![2]).unwrap();
        let b = tape.constant(vec![3.0, 4.0], vec![2]).unwrap();
        let c = ops::add(a, b).unwrap();
        assert!(!c.is_tracked());
        assert!(tape.backward(ops::sum_all(c).unwrap()).is_err());
    }

    #[test]
    fn no_grad_tape_tracks_nothing() {
        let tape = Tape::no_grad();
        let a = tape.leaf(vec![1.0], vec![1]).unwrap();
        assert!(!a.is_tracked());
    }

    #[test]
    fn nan_input_is_rejected() {
        let tape = Tape::new();
        assert!(tape.leaf(vec![f64::NAN], vec![1]).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(tape.backward(a).is_err());
    }

    // Backward of a sum of independent subgraphs equals the sum of the
    // separate backwards.
    #[test]
    fn backward_is_linear_over_independent_subgraphs() {
        let run = |wa: f64, wb: f64| -> (Vec<f64>, Vec<f64>) {
            let tape = Tape::new();
            let a = tape.leaf(vec![0.3, -1.2, 2.0], vec![3]).unwrap();
            let b = tape.leaf(vec![0.5, 0.7, -0.2], vec![3]).unwrap();
            let fa = ops::sum_all(ops::sigmoid(a).unwrap()).unwrap();
            let fb = ops::sum_all(ops::mul(b, b).unwrap()).unwrap();
            let total = ops::add(
                ops::scale(fa, wa).unwrap(),
                ops::scale(fb, wb).unwrap(),
            )
            .unwrap();
            let g = tape.backward(total).unwrap();
            (g.of(a).unwrap().to_vec(), g.of(b).unwrap().to_vec())
        };
        let (ga_joint, gb_joint) = run(1.0, 1.0);
        let (ga_only, _) = run(1.0, 0.0);
        let (_, gb_only) = run(0.0, 1.0);
        for (j, s) in ga_joint.iter().zip(&ga_only) {
            assert!((j - s).abs() < 1e-15);
        }
        for (j, s) in gb_joint.iter().zip(&gb_only) {
            assert!((j - s).abs() < 1e-15);
        }
    }
}
