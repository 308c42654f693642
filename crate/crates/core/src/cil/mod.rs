mod classifier;
mod trainer;

pub use classifier::{BackboneConfig, ClassifierModel, ClassifierOutput, ClassifierTape};
pub use trainer::{
    evaluate, features, prepare_codecs, run_incremental, run_incremental_with_codecs, summarize, summarize_top1,
    train_phase, CodecRunConfig, IncrementalRun, PhaseResult, TrainConfig, DISTILL_TEMPERATURE,
};
