//! Decoder-only transformer with target-aware positional embeddings, its
//! sampler, incremental decoding, and checkpoint format.

mod checkpoint;
mod config;
mod decode;
mod transformer;

pub use checkpoint::{
    decode_checkpoint, decode_tensor_file, encode_checkpoint, encode_tensor_file, load_checkpoint,
    raw_from_store, save_checkpoint, store_from_raw, GeneratorHeader, RawTensor, MAGIC, VERSION,
};
pub use config::{config_hash, ModelConfig};
pub use decode::{decode, decode_forced, sample_token, DecodeOutput, SamplerConfig};
pub use transformer::{layout_inputs, InputToken, ParamCounts, TrainForward, Transformer};
