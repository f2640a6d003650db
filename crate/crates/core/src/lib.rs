pub mod actuation;
pub mod contact;
pub mod control;
pub mod error;
pub mod gp;
pub mod planning;
pub mod rl;
pub mod rigid_body;
pub mod rng;
pub mod sim;
pub mod vec_env;

pub use error::{Error, Result};
