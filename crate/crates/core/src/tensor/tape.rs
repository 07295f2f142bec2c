use std::cell::RefCell;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static ACTIVE: RefCell<Option<TapeState>> = const { RefCell::new(None) };
}

/// Handle of a recorded value: which tape, and where on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

struct Node {
    op: Op,
    /// Tape index of each input, `None` for constants.
    inputs: Vec<Option<usize>>,
    values: Vec<Tensor>,
    output: Tensor,
}

struct TapeState {
    id: u64,
    nodes: Vec<Node>,
}

/// Recording scope for reverse-mode differentiation.
///
/// At most one tape is active per thread. The tape is installed by
/// [`Tape::new`] and removed when the value is dropped; tensors created while
/// it was active keep their values but stop being tracked.
pub struct Tape {
    id: u64,
    _not_send: PhantomData<*const ()>,
}

impl Tape {
    pub fn new() -> Result<Self> {
        ACTIVE.with(|slot| {
            let mut slot = slot.borrow_mut();
            if slot.is_some() {
                return Err(Error::contract(
                    "a tape is already active on this thread",
                ));
            }
            let id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
            *slot = Some(TapeState {
                id,
                nodes: Vec::new(),
            });
            Ok(Tape {
                id,
                _not_send: PhantomData,
            })
        })
    }

    pub fn is_active() -> bool {
        ACTIVE.with(|slot| slot.borrow().is_some())
    }

    /// Registers `t` as a differentiable leaf and returns the tracked copy.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        ACTIVE.with(|slot| {
            let mut slot = slot.borrow_mut();
            let state = slot.as_mut().expect("tape dropped while in use");
            let index = state.nodes.len();
            state.nodes.push(Node {
                op: Op::Leaf,
                inputs: Vec::new(),
                values: Vec::new(),
                output: t.detach(),
            });
            t.detach().with_node(NodeId {
                tape: self.id,
                index,
            })
        })
    }

    pub fn len(&self) -> usize {
        ACTIVE.with(|slot| slot.borrow().as_ref().map_or(0, |s| s.nodes.len()))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient of the scalar `loss` with respect to every watched leaf.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = match loss.node() {
            Some(n) if n.tape == self.id => n.index,
            _ => {
                return Err(Error::contract(
                    "loss was not produced on this tape",
                ))
            }
        };
        ACTIVE.with(|slot| {
            let slot = slot.borrow();
            let state = slot.as_ref().expect("tape dropped while in use");
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; state.nodes.len()];
            grads[root] = Some(vec![1.0]);
            for index in (0..=root).rev() {
                let node = &state.nodes[index];
                if matches!(node.op, Op::Leaf) {
                    continue;
                }
                let Some(g) = grads[index].take() else {
                    continue;
                };
                let need: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                let input_grads = node.op.vjp(&g, &node.values, &node.output, &need);
                for (slot_index, ig) in node.inputs.iter().zip(input_grads) {
                    let (Some(target), Some(ig)) = (slot_index, ig) else {
                        continue;
                    };
                    match &mut grads[*target] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&ig) {
                                *a += v;
                            }
                        }
                        empty => *empty = Some(ig),
                    }
                }
            }
            let leaves = state
                .nodes
                .iter()
                .zip(grads)
                .map(|(node, g)| match (&node.op, g) {
                    (Op::Leaf, Some(g)) => {
                        Some(Tensor::from_parts(node.output.shape().to_vec(), g))
                    }
                    _ => None,
                })
                .collect();
            Ok(Gradients {
                tape: self.id,
                grads: leaves,
            })
        })
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        ACTIVE.with(|slot| {
            let mut slot = slot.borrow_mut();
            if slot.as_ref().is_some_and(|s| s.id == self.id) {
                *slot = None;
            }
        });
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a watched leaf, `None` if the loss does not depend on it.
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        let node = leaf.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.index)?.as_ref()
    }

    /// Like [`Gradients::get`] but returns zeros for unreachable leaves.
    pub fn wrt(&self, leaf: &Tensor) -> Tensor {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }
}

pub(crate) fn is_live(node: NodeId) -> bool {
    ACTIVE.with(|slot| slot.borrow().as_ref().is_some_and(|s| s.id == node.tape))
}

/// Attaches `output` to the active tape if any input is tracked there.
pub(crate) fn record(op: Op, inputs: &[&Tensor], output: Tensor) -> Tensor {
    ACTIVE.with(|slot| {
        let mut slot = slot.borrow_mut();
        let Some(state) = slot.as_mut() else {
            return output;
        };
        let indices: Vec<Option<usize>> = inputs
            .iter()
            .map(|t| t.node().filter(|n| n.tape == state.id).map(|n| n.index))
            .collect();
        if indices.iter().all(Option::is_none) {
            return output;
        }
        let index = state.nodes.len();
        let node_id = NodeId {
            tape: state.id,
            index,
        };
        state.nodes.push(Node {
            op,
            inputs: indices,
            values: inputs.iter().map(|t| t.detach()).collect(),
            output: output.detach(),
        });
        output.with_node(node_id)
    })
}
