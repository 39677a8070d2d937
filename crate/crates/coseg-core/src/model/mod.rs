//! The co-segmentation model: configurable siamese conv encoder, the three
//! semantic attention learners, the upsample/conv decoder, and the pair
//! training loop.

mod config;
mod forward;
mod net;
mod train;

pub use config::{ModelConfig, Pooling, Variant};
pub use forward::{
    apply_ca, apply_csa, apply_fca, channel_attention, decode, encode, fuse_attention,
    forward_pair, logits_to_masks, spatial_attention, AttendedPair, PairOutput,
};
pub use net::{
    AttentionParams, BnParams, BoundBlock, BoundModel, ConvParams, CosegModel, DecoderBlock,
    EncoderBlock, BN_EPS, BN_MOMENTUM,
};
pub use train::{
    evaluate, mean_jaccard, pair_loss_eval, predict_pairs, refresh_batchnorm_stats, train,
    train_step, PairBatch,
    TrainOptions, TrainReport,
};
