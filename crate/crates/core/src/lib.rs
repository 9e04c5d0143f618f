//! Road-surface semantic segmentation toolkit.
//!
//! Twelve-class pixel labelling of road scenes with a residual-encoder
//! U-Net, class-imbalance weighting, stage-wise (unweighted then weighted)
//! training and confusion-matrix evaluation. A procedural scene generator
//! makes every stage runnable without the original annotated corpus.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod infer;
pub mod loss;
pub mod model;
pub mod nn;
pub mod schema;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use augment::{
    apply_policy, horizontal_flip, perspective_warp, AugmentationPolicy, Geometry, Homography,
};
pub use dataset::{
    compute_class_distribution, load_sample, split_corpus, validate_corpus, ClassDistribution,
    CorpusSplit, Mask, SegmentationSample, ValidationReport,
};
pub use error::{Error, Result};
pub use eval::{
    accumulate_confusion, derive_metrics, render_report, row_normalize, ConfusionMatrix,
    MetricsReport,
};
pub use loss::{compute_class_weights, weighted_cross_entropy, WeightScheme, WeightVector};
pub use model::{
    transfer_parameters, Checkpoint, EncoderVariant, Model, ModelConfig, Normalization,
};
pub use schema::{ClassDef, ClassId, LabelSchema};
pub use synth::{generate_corpus, generate_scene, CorpusSpec, SceneRecipe};
pub use tensor::Tensor;
pub use train::{
    run_configuration, train_stage, StageSpec, TrainingConfiguration, TrainingHistory,
};
