//! Dense feedforward networks: a closed layer vocabulary with recorded forward
//! passes, analytic gradients, momentum SGD and `EGT1` checkpoints.
//!
//! A frozen [`Network`] is `Sync`; forward and backward passes may run from many
//! threads while a single owner applies [`Sgd`] updates.

pub mod checkpoint;
pub(crate) mod kernels;
mod layer;
mod network;
mod optim;

pub use layer::{Layer, LayerKind};
pub use network::{ForwardTrace, LayerGrads, Network, ParamGrads};
pub use optim::Sgd;
