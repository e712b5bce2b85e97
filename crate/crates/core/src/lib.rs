pub mod error;
pub mod numerics;
pub mod trajectory;
pub mod koopman;
pub mod control_basis;
pub mod cyclic_solver;
pub mod datagen;
pub mod interactive;

mod container;

pub use error::{Error, Result};
