//! Dense tensors, a reverse-mode tape, initializers and SGD.

mod conv;
pub mod init;
mod sample;
pub mod sgd;
mod ssim;
mod tape;
mod tensor;
mod window;

pub use init::{init_weights, InitMode, InitSpec};
pub use sgd::{Sgd, SgdConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use window::MASKED_LOGIT;

pub(crate) use tape::sigmoid;
