pub mod accountant;
pub mod autodiff;
pub mod bias;
pub mod dp;
pub mod error;
pub mod models;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
