//! Array engine: dense arrays, a differentiation tape, random streams and
//! the Adam optimizer.

pub mod adam;
pub mod array;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod prng;

pub use adam::{adam_step, AdamState};
pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use graph::{sinusoidal_embedding, Grads, Graph, Var};
pub use params::ParamStore;
pub use prng::{Prng, Stream};
