pub mod birthdeath;
pub mod cli;
pub mod conventions;
pub mod diffusion;
pub mod error;
pub mod forward;
pub mod golden;
pub mod inverse;
pub mod mc;
pub mod payoffs;
pub mod uconvex;

pub use error::{Error, Result};
