//! Learned image codec: transforms, entropy models, bitstreams and training.

pub mod bitstream;
pub mod checkpoint;
mod coding;
pub mod entropy;
mod model;
pub mod rangecoder;
mod train;

pub use bitstream::{bits_per_pixel, measure_bpp, Bitstream};
pub use coding::{analyze, decode, decode_code, encode, encode_code, estimated_rate_bits, LatentCode};
pub use model::{ArchConfig, CodecModel, Quantization, RdReport, HYPER_FACTOR, MAIN_FACTOR, PAD_MULTIPLE};
pub use train::{evaluate_rd, finetune_encoder, train_initial, CodecTrainConfig, TrainLog, FINETUNE_LR};
