//! Delayed-choice contextuality testbed.
//!
//! Builds n-cycle observables, runs ancilla-controlled delayed-choice
//! circuits against honest and hidden-variable box models, and certifies the
//! outcome with cycle-inequality, repeatability and CHSH tests.

pub mod bell;
pub mod boxes;
pub mod engine;
pub mod ncycle;
pub mod qcore;
pub mod shell;
pub mod synth;
