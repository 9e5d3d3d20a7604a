//! Dense tensor arithmetic, reverse-mode autodiff, Adam, and deterministic
//! random streams. Everything downstream (degradation synthesis, the
//! restoration net, the diffusion stack) is built on this module.

pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{adam_step, AdamState};
pub use rng::DetRng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
