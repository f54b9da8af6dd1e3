//! Feeder-camera monitoring: clip ingest, frame sampling, bird detection
//! gating, species routing, the sighting/review store and its HTTP API.

pub mod api;
pub mod backends;
pub mod config;
pub mod daemon;
pub mod eval;
pub mod gating;
pub mod ingest;
pub mod media;
pub mod pipeline;
pub mod store;
pub mod synth;

pub use backends::{Backend, BackendDescriptor, BackendError};
pub use config::{load_config, AppConfig, BackendMode, ConfigError};
pub use gating::{BBox, ClassifyDecision, DecisionKind, Detection, ProbVector};
pub use ingest::{ClipJob, JobSource, JobStatus};
pub use media::{FrameImage, MediaError, NormalizedTensor};
pub use pipeline::{aggregate_clip, process_clip, ProcessedClip};
pub use store::{ClipResult, ReviewItem, Sighting, Store};
