//! Open-vocabulary detection pre-training at desk scale.
//!
//! Concepts from detection labels, grounding phrases and captions are
//! collected into a dictionary with definitions, every image is paired with
//! a fixed-size list of independent concept texts, image-text data can be
//! pseudo-labeled, and a dual-encoder detector is trained by aligning region
//! features with concept embeddings.

pub mod cli;
pub mod data;
pub mod dictionary;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod pseudo_label;
pub mod train;
pub mod util;

pub use data::{build_parallel_input, ParallelInputBuilder, ParallelOptions, ParalleledInput};
pub use data::{Image, Object, RecordKind, TokenSeq, Tokenizer, UnifiedRecord};
pub use dictionary::{build_dictionary, enrich, ConceptDictionary, ConceptEntry, ConceptSource, Lexicon};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalOptions, EvalReport};
pub use geometry::{BBox, Matrix};
pub use losses::{total_loss, LossBreakdown, LossConfig};
pub use model::{alignment_scores, atss_assign, decode_predictions, Detector, ModelConfig};
pub use train::{train, TrainConfig, TrainOutcome};
