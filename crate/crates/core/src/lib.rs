//! Personalized federated learning simulator for visual question answering.
//!
//! Clients adapt a shared, frozen transformer through prefix prompts and an
//! evidential answer head. A server learns inter-client aggregation weights from
//! the clients' reported uncertainty by ascending the clients' answer
//! log-likelihood under aggregated prompts.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod evidential;
pub mod gradcheck;
pub mod model;
pub mod special;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
