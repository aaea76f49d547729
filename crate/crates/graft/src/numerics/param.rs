//! Named trainable parameters with freeze flags and pruning masks.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;

#[derive(Debug, Default)]
struct ParamState {
    frozen: bool,
    /// 1 = kept, 0 = pruned. Same length as the data. The data is kept at
    /// exactly 0 wherever the mask is 0.
    mask: Option<Vec<u8>>,
}

/// A named leaf tensor. Clones share the underlying tensor and state, so a
/// parameter handed to the optimizer sees freezes and masks applied through
/// any other handle.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    state: Rc<RefCell<ParamState>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.requires_grad(true),
            state: Rc::new(RefCell::new(ParamState::default())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn frozen(&self) -> bool {
        self.state.borrow().frozen
    }

    /// Freezing also stops gradient tracking, so backward passes skip
    /// subgraphs that only feed frozen leaves.
    pub fn set_frozen(&self, flag: bool) {
        self.state.borrow_mut().frozen = flag;
        self.tensor.set_requires_grad(!flag);
    }

    pub fn mask(&self) -> Option<Vec<u8>> {
        self.state.borrow().mask.clone()
    }

    pub fn has_mask(&self) -> bool {
        self.state.borrow().mask.is_some()
    }

    /// Installs a pruning mask and zeroes the masked-out weights.
    pub fn set_mask(&self, mask: Vec<u8>) {
        assert_eq!(mask.len(), self.numel(), "mask length mismatch");
        self.tensor.update_data(|d| {
            for (v, &m) in d.iter_mut().zip(&mask) {
                if m == 0 {
                    *v = 0.0;
                }
            }
        });
        self.state.borrow_mut().mask = Some(mask);
    }

    pub fn clear_mask(&self) {
        self.state.borrow_mut().mask = None;
    }

    /// Re-applies the mask to the data (after an optimizer step).
    pub fn enforce_mask(&self) {
        let state = self.state.borrow();
        if let Some(mask) = &state.mask {
            self.tensor.update_data(|d| {
                for (v, &m) in d.iter_mut().zip(mask) {
                    if m == 0 {
                        *v = 0.0;
                    }
                }
            });
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.tensor.map_data(|d| d.iter().filter(|v| **v != 0.0).count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clones_share_state() {
        let p = Parameter::new("w", Tensor::zeros(&[2, 2]));
        let q = p.clone();
        p.set_frozen(true);
        assert!(q.frozen());
        q.set_mask(vec![1, 0, 1, 1]);
        assert!(p.has_mask());
    }

    #[test]
    fn set_mask_zeroes_data() {
        let p = Parameter::new("w", Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap());
        p.set_mask(vec![1, 0, 1]);
        assert_eq!(p.tensor().data_vec(), vec![1.0, 0.0, 3.0]);
        assert_eq!(p.count_nonzero(), 2);
    }
}
