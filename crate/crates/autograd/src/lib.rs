//! Small dense-tensor substrate: `f64` tensors, a recording tape with
//! reverse-mode gradients, an Adam optimizer with linear warmup, a
//! finite-difference gradient checker, and the `KEPF` checkpoint container.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint_file, read_checkpoint,
    save_checkpoint_file, write_checkpoint, Meta,
};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport};
pub use params::{optimizer_step, AdamConfig, Gradients, ParamId, ParameterSet};
pub use tape::{log_sigmoid, sigmoid, Norm, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
