pub mod encoder;
pub mod mlm;
pub mod tokenizer;

pub use encoder::{Encoder, EncoderConfig, EncoderOutput, TokenBatch};
pub use mlm::{apply_mlm_masking, mlm_loss, Corruption, MlmBatch};
pub use tokenizer::{train_tokenizer, Tokenizer};
