use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::grid::{GradGrid, NodeRef};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);
static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

/// Backward rule of a recorded operation. Receives the upstream gradient and
/// a flag per input telling which input gradients are wanted.
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + Send>;

struct Node {
    len: usize,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    consumed: bool,
}

/// Record of primitive operations for reverse-mode differentiation.
///
/// One tape per forward pass. Grids produced from untracked inputs are not
/// recorded, so a fresh tape doubles as a cheap no-grad context.
pub struct Tape {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), inner: RefCell::new(Inner::default()) }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `grid` as a differentiable leaf.
    pub fn leaf(&self, grid: &GradGrid) -> GradGrid {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        inner.nodes.push(Node { len: grid.len(), parents: Vec::new(), backward: None });
        GradGrid::from_parts(
            grid.shape().to_vec(),
            grid.data_arc(),
            Some(NodeRef { tape: self.id, index }),
        )
    }

    /// Leaf for a trainable parameter. Repeated calls with the same parameter
    /// return the same node so that gradients accumulate in one place.
    pub fn param(&self, param: &Param) -> GradGrid {
        let existing = self.inner.borrow().params.get(&param.id).copied();
        if let Some(index) = existing {
            return GradGrid::from_parts(
                param.value.shape().to_vec(),
                param.value.data_arc(),
                Some(NodeRef { tape: self.id, index }),
            );
        }
        let g = self.leaf(&param.value);
        let index = g.node().map(|n| n.index).unwrap_or_default();
        self.inner.borrow_mut().params.insert(param.id, index);
        g
    }

    fn own_index(&self, grid: &GradGrid) -> Option<usize> {
        grid.node().filter(|n| n.tape == self.id).map(|n| n.index)
    }

    /// Records an operation. Inputs that belong to another tape, or to none,
    /// are treated as constants. Returns an untracked grid when no input is
    /// tracked here.
    pub(crate) fn record(
        &self,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[&GradGrid],
        backward: impl Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + Send + 'static,
    ) -> GradGrid {
        let parents: Vec<Option<usize>> = inputs.iter().map(|g| self.own_index(g)).collect();
        let data = Arc::new(data);
        if parents.iter().all(Option::is_none) {
            return GradGrid::from_parts(shape, data, None);
        }
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        inner.nodes.push(Node { len: data.len(), parents, backward: Some(Box::new(backward)) });
        GradGrid::from_parts(shape, data, Some(NodeRef { tape: self.id, index }))
    }

    /// Reverse sweep from a scalar `loss`. The tape is spent afterwards.
    pub fn backward(&self, loss: &GradGrid) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        inner.consumed = true;
        let root = match self.own_index(loss) {
            Some(i) => i,
            None => {
                return Ok(Gradients {
                    tape: self.id,
                    leaves: HashMap::new(),
                    params: inner.params.clone(),
                })
            }
        };

        let mut grads: Vec<Option<Vec<f32>>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &mut inner.nodes[i];
            let Some(backward) = node.backward.take() else {
                leaves.insert(i, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            let parents = node.parents.clone();
            drop(backward);
            for (p, pg) in parents.into_iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (p, pg) else { continue };
                debug_assert_eq!(pg.len(), inner.nodes[p].len);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { tape: self.id, leaves, params: inner.params.clone() })
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Vec<f32>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient for a leaf grid, `None` if the loss does not depend on it.
    pub fn get(&self, leaf: &GradGrid) -> Option<&[f32]> {
        let node = leaf.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.leaves.get(&node.index).map(Vec::as_slice)
    }

    pub fn param(&self, param: &Param) -> Option<&[f32]> {
        let index = self.params.get(&param.id)?;
        self.leaves.get(index).map(Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// Named trainable grid.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    pub name: String,
    pub value: GradGrid,
}

impl Param {
    pub fn new(name: impl Into<String>, value: GradGrid) -> Self {
        Self {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value: value.detach(),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    /// Replaces the values, keeping shape and identity.
    pub fn set(&mut self, data: Vec<f32>) -> Result<()> {
        self.value = GradGrid::new(self.value.shape().to_vec(), data)?;
        Ok(())
    }

    /// Copy with a fresh identity.
    pub fn duplicate(&self) -> Self {
        Self::new(self.name.clone(), self.value.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(&GradGrid::from_vec1(vec![1.0, 2.0]));
        let loss = tape.sum(&x);
        assert!(tape.backward(&loss).is_ok());
        assert!(matches!(tape.backward(&loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&GradGrid::from_vec1(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_param_use_accumulates() {
        let p = Param::new("w", GradGrid::from_vec1(vec![3.0]));
        let tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        let y = tape.mul(&a, &b).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.param(&p).unwrap(), &[6.0]);
    }

    #[test]
    fn untracked_inputs_are_not_recorded() {
        let tape = Tape::new();
        let x = GradGrid::from_vec1(vec![1.0]);
        let y = tape.sin(&x);
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }
}
