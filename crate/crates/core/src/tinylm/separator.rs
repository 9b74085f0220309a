//! Trainable soft separator marking the textual/non-textual boundary
//! inside a hybrid item token. Excluded from stage-1 prompts and stage-1
//! optimization.

use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::linalg::Mat;
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftSeparator {
    pub vec: Mat,
}

impl SoftSeparator {
    pub fn init(d_lm: usize, rng: &mut Rng) -> Self {
        SoftSeparator {
            vec: Mat::randn(1, d_lm, 0.02, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SoftSeparator {
            vec: self.vec.zeros_like(),
        }
    }
}

impl NamedTensors for SoftSeparator {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![("separator".into(), &self.vec)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        vec![("separator".into(), &mut self.vec)]
    }
}
