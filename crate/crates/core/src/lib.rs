//! Engine for projecting multi-modal embeddings into 2D with the Modal Fusion
//! Map, measuring projection quality, and steering an embedding adapter with
//! point-set and set-set alignment directives.

pub mod alignment;
pub mod axis;
pub mod baselines;
pub mod binfmt;
pub mod dataset;
pub mod density;
pub mod error;
pub mod fusion;
pub mod layout;
pub mod mfm;
pub mod model_io;
pub mod nn;
pub mod projectors;
pub mod quality;
pub mod synth;

pub use dataset::{load_dataset, save_dataset, ConceptEntry, EmbeddingDataset, EmbeddingPoint, Modality};
pub use error::{Error, Result};
pub use fusion::{build_merged_matrix, cosine_distance, MergedDistanceMatrix};
pub use layout::ProjectionLayout;
pub use alignment::{AdapterConfig, AdapterModel, AlignmentDirective, Direction, DirectiveKind, OriginView, TripletBatch, Verification};
pub use axis::{ConceptAxisLayout, ConceptAxisSpec};
pub use density::{ContourSet, DensityField, KdeOptions};
pub use mfm::{MfmConfig, ProjectionModel};
pub use projectors::ProjectorKind;
pub use quality::{NeighborhoodFilter, ProtocolOptions, QualityReport};
