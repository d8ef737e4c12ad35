//! Parametric projection: an autoencoder trained on the fuzzy graph with
//! hand-written backpropagation.

mod checkpoint;
mod curve;
pub mod layers;
mod loss;
mod network;
mod optim;
mod train;

pub use checkpoint::{
    decode_model, encode_model, load_model, model_file_name, save_model, ModelCheckpoint, MODEL_MAGIC, MODEL_VERSION,
};
pub use curve::{curve_grid, curve_target, fit_curve, EmbeddingCurve, CURVE_GRID_POINTS};
pub use loss::{batch_recon_loss, pair_similarity, recon_loss, umap_edge_loss, EdgeLoss, Q_CLAMP};
pub use network::{
    encoder_widths, group_count, init_model, Autoencoder, Block, Stack, StackCache, DEFAULT_MAX_GROUPS, EMBED_DIM,
    MIN_GN_CHANNELS, MIN_GROUP_SIZE,
};
pub use optim::AdamW;
pub use train::{
    batch_gradient, model_id, train, BatchRef, EpochEmbedding, Init, TrainConfig, TrainOutput, TrainReport,
};
