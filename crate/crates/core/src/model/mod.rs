//! Two-branch network assembly, configuration and checkpoints.

pub mod checkpoint;
mod config;
mod network;

pub use checkpoint::{BestRecord, Checkpoint};
pub use config::{layout_string, parse_layout, ModelConfig, StageConfig, StageKind, ABLATION_LAYOUTS, NUM_STAGES};
pub use network::{Block, Branch, ForwardVars, Fusion, Model};
