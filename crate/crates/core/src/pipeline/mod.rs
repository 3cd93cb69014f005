//! Corpus synthesis and loading, example preparation, training and
//! two-phase inference.

mod corpus;
mod example;
mod infer;
mod train;

pub use corpus::{load_manifest, synth_dataset, write_corpus, ManifestLoad, ToneGrammar, Utterance, DEFAULT_SPLIT_SECONDS};
pub use example::{derive_seed, make_training_example, prepare_examples, TrainingExample};
pub use infer::{
    cache_equivalence_gap, incremental_decode_equivalence, infer, infer_frames, infer_text, FrameStop, InferConfig,
    InferenceResult, TextStop,
};
pub use train::{
    batch_gradients, example_loss, group_gradient_norms, train, MetricsRow, ObjectiveMode, TrainConfig, Trainer,
    METRICS_HEADER,
};
