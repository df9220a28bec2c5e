//! Dense `f64` tensors with a reverse-mode tape, Adam, seeded random
//! streams and a flat binary checkpoint format.

mod adam;
mod checkpoint;
mod composite;
mod error;
pub mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, adam_step_from, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC};
pub use error::{NumError, Result};
pub use params::{ParamId, ParamStore};
pub use rng::RngStream;
pub use tape::{Conv1dGeometry, Gradients, Primitive, Reduce, Tape, Var};
pub use tensor::Tensor;
