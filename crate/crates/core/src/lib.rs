//! Reentrant self-organizing maps for multimodal classification.
//!
//! Each modality is learned by its own Kohonen map. Maps are bound by
//! Hebbian lateral connections, neurons are labeled from a small annotated
//! subset, and inference picks the strongest neuron across all maps.

pub mod dataset;
pub mod distributed;
pub mod error;
pub mod hebbian;
pub(crate) mod io;
pub mod model;
pub mod som;

pub use dataset::{ModalityDataset, MultimodalDataset, Splits, SynthSpec};
pub use error::{ResomError, Result};
pub use hebbian::{LateralMatrix, SparsityStats};
pub use io::write_atomic;
pub use model::{
    train_maps, ClassId, EvaluationReport, LabelingCoefficients, Prediction, ResomModel,
    SampleOutcome,
};
pub use som::{ActivationVector, SomMap, SomParams};
