//! Text-promptable instrument segmentation at desk scale.
//!
//! A frozen transformer text encoder turns class prompts into global text
//! features; a ViT image encoder with multi-scale feature fusion produces a
//! token grid; a decoder prompts that grid with attention and a text-generated
//! convolution to get per-pixel scores; a gating network mixes the scores of
//! several prompts per class; and during training a masked-reconstruction
//! branch focuses the shared encoder on patches the model currently gets
//! wrong. Everything runs on a small tape-based autograd over `f64` tensors.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod hiar;
pub mod image_encoder;
pub mod metrics;
pub mod model;
pub mod mop;
pub mod nn;
pub mod params;
pub mod pnm;
pub mod spatial;
pub mod tensor;
pub mod text;
pub mod train;

pub use ablation::{ablation_run, AblationRow, AblationTable, Variant};
pub use commands::{run_command, Command, CommandOptions, SplitChoice};
pub use config::{GatingGranularity, ModelConfig};
pub use data::{generate, generate_dataset, load_dataset, ClassSpec, Dataset, ImageSample, ShapeFamily};
pub use error::{Error, Result};
pub use metrics::{evaluate, oracle_report, IoUReport, MaskPair};
pub use model::{Model, Prediction};
pub use mop::{PromptBundle, PromptSource};
pub use tensor::Tensor;
pub use train::{assemble_mask, train_epochs, LossBreakdown, Trainer};
