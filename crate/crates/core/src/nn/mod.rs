//! Small neural-network toolkit on top of candle tensors: seeded parameter
//! construction, the forward-mode context, and the layers both encoders and
//! the transformer units are assembled from.

/// Runs `$body` with `$t` bound to the element type of a float CPU storage.
macro_rules! dispatch_float {
    ($storage:expr, $name:literal, |$t:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(_) => {
                type $t = f32;
                $body
            }
            CpuStorage::F64(_) => {
                type $t = f64;
                $body
            }
            _ => bail!(concat!($name, ": only f32 and f64 are supported")),
        }
    };
}

mod batchnorm;
pub mod conv;
mod layers;
mod params;

pub use conv::{conv3d, conv3d_with, ConvAlgorithm, ConvGeometry};
pub use batchnorm::BatchNorm;
pub use layers::{dropout, Conv3d, LayerNorm, Linear};
pub use params::{Init, ParamBuilder, ParamStore};

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

/// Forward-pass mode.
///
/// `Eval` detaches parameters so no autograd graph is recorded, uses
/// running batch-norm statistics, and disables dropout. `Train` records the
/// graph, normalizes with batch statistics and draws dropout masks from the
/// borrowed generator.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    /// Parameter view for this mode.
    pub fn p(&self, t: &Tensor) -> Tensor {
        match self {
            Mode::Eval => t.detach(),
            Mode::Train { .. } => t.clone(),
        }
    }
}
