//! Content/style separation analysis for text-to-image diffusion models.
//!
//! Reads per-image cross-attention dumps, turns them into per-token
//! attribution maps, thresholds them into masks and measures how much the
//! content and style masks overlap compared with the rest of the prompt.

mod colormap;
pub mod corpus;
pub mod daam;
pub mod dump;
pub mod masks;
pub mod overlay;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod synth;

pub use daam::{AttributionMap, Grid, UpsampleSpec};
pub use dump::{AttentionDump, AttentionRecord, Manifest, StyleKind, Token, TokenSpan};
pub use masks::{BinaryMask, PercentileMethod, SeparationRecord, ThresholdKind, ThresholdPolicy};
pub use pipeline::{RunConfig, RunReport};
pub use stats::{EffectSizeConvention, Tail};
