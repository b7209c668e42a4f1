//! Document-level relation extraction with jointly trained evidence
//! extraction and evidence-fused inference.

mod params;

pub mod corpus;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod evi_head;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod rel_head;
pub mod rules;
pub mod trainer;

pub use corpus::{Document, RelationVocab, TokenVocab};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use fusion::{EvidenceSource, InferenceMode};
pub use metrics::EvalReport;
pub use model::Model;
pub use rules::{Category, CorefProvider, IdentityProvider, LexiconProvider};
pub use trainer::TrainConfig;
