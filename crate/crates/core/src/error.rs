//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mask shape {mask_height}x{mask_width} does not match image shape {image_height}x{image_width} ({source_id})")]
    MaskShape {
        source_id: String,
        image_width: u32,
        image_height: u32,
        mask_width: u32,
        mask_height: u32,
    },

    #[error("unknown class id {id} in {source_id} (schema has {num_classes} classes)")]
    UnknownClass {
        source_id: String,
        id: u8,
        num_classes: usize,
    },

    #[error("unrecognised mask color {color:?} in {source_id}")]
    UnknownColor { source_id: String, color: [u8; 3] },

    #[error("cannot decode {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("augmentation failed: {0}")]
    Augmentation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged in stage {stage} at epoch {epoch} (loss = {loss})")]
    Divergence {
        stage: usize,
        epoch: usize,
        loss: f64,
    },

    #[error("confusion matrix is empty")]
    EmptyEvaluation,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
