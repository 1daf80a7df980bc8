//! Minimal dense tensor core with reverse-mode automatic differentiation.
//!
//! Training code builds a fresh [`Tape`] per step: forward ops append nodes
//! to an arena and return [`TensorId`]s, [`Tape::backward`] replays the
//! arena in reverse and accumulates gradients into the [`ParamStore`].
//! Everything is f32 and row-major; convolution activations use `[N, C, H,
//! W]`. The core is single-threaded and deterministic: identical seeds give
//! bitwise-identical parameter trajectories.

mod checkpoint;
pub mod kernels;
mod layers;
mod optim;
mod params;
mod schedule;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{BatchNorm2d, Conv2dLayer, LinearLayer};
pub use optim::{Adam, SgdMomentum};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub(crate) use params::kaiming as params_init;
pub use schedule::{LrSchedule, ScheduleKind};
pub use tape::{Grads, Tape, TensorId};

use crate::{Error, Result};

/// Plain tensor value outside any tape (dataset batches, inference buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} does not match {} elements", shape, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Geometry of a 2-d convolution. `padding` is symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn plain(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, dilation: 1, padding, groups: 1 }
    }

    /// Output extent along one spatial axis.
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let eff = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding - eff) / self.stride + 1
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, dilation: 1, padding: 0, groups: 1 }
    }
}
