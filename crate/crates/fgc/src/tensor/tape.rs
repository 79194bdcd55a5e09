use std::cell::{Cell, RefCell};

use super::Tensor;
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Entry {
    output: Tensor,
    backward: BackwardFn,
}

/// Ordered record of executed primitive operations.
///
/// Operations execute eagerly; each one that involves a gradient-requiring
/// input pushes an entry holding its output handle and a closure that maps
/// the output gradient to input-gradient contributions. Because entries are
/// appended in execution order, walking them in reverse is a reverse
/// topological traversal, and each recorded node is replayed exactly once.
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
    recording: bool,
    consumed: Cell<bool>,
    replayed: Cell<usize>,
}

impl Tape {
    /// Recording tape for training.
    pub fn new() -> Tape {
        Tape {
            entries: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
            replayed: Cell::new(0),
        }
    }

    /// Non-recording tape: forward passes only, no gradient bookkeeping.
    pub fn inference() -> Tape {
        Tape {
            entries: RefCell::new(Vec::new()),
            recording: false,
            consumed: Cell::new(false),
            replayed: Cell::new(0),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// True when the output of an op over `inputs` must be recorded.
    pub(crate) fn tracks(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    /// Record one executed operation.
    pub(crate) fn record(&self, output: Tensor, backward: BackwardFn) {
        debug_assert!(self.recording);
        self.entries.borrow_mut().push(Entry { output, backward });
    }

    pub fn num_recorded(&self) -> usize {
        self.entries.borrow().len()
    }

    /// How many recorded nodes contributed during the last backward pass.
    pub fn num_replayed(&self) -> usize {
        self.replayed.get()
    }

    /// Reverse pass: populate gradients of every tensor reachable from `loss`.
    ///
    /// `loss` must be scalar, and a tape can be consumed only once; replaying
    /// without re-recording is a contract error.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.consumed.get() {
            return Err(Error::contract(
                "backward called twice on the same tape".to_string(),
            ));
        }
        self.consumed.set(true);
        loss.accumulate_grad(&[1.0]);

        let entries = self.entries.borrow();
        let mut replayed = 0usize;
        for entry in entries.iter().rev() {
            // Clone the output gradient so the closure may freely borrow
            // other tensors' accumulators (the output never aliases inputs).
            let Some(grad_out) = entry.output.grad_clone() else {
                continue;
            };
            (entry.backward)(&grad_out);
            replayed += 1;
        }
        self.replayed.set(replayed);
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
