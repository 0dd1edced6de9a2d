mod checkpoint;
mod config;
mod network;
pub mod pool;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, round_to_stored, save_checkpoint};
pub use config::EncoderConfig;
pub use network::{
    adaptive_pool_align, align_node, BoundEncoder, DenseProjection, Encoder, FeatureMap, GlobalEmbedding,
};
