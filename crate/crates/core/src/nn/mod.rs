//! Minimal layer stack with explicit forward and backward passes.

pub mod checkpoint;
pub mod gradcheck;
pub mod layer;
pub mod optim;
pub mod spectral;
pub mod stack;

pub use checkpoint::{read_checkpoint, write_checkpoint, Record};
pub use gradcheck::finite_diff_check;
pub use layer::{Layer, LayerKind, Mode};
pub use optim::{Schedule, SgdMomentum};
pub use spectral::{spectral_normalize, PowerIteration};
pub use stack::{LayerStack, StackCache};
