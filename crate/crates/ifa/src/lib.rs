//! Bottom-up assembly of video instance segmentations from dense per-frame
//! predictions.
//!
//! The input to this crate is what a segmentation network would emit for each
//! frame: per-pixel class probabilities, a center heatmap, an offset field
//! pointing every pixel at the center of its instance, and one such offset
//! field per reference frame pointing at the instance's center in that frame.
//! Everything downstream of those maps lives here:
//!
//! * [`grouping`] turns one frame's maps into an instance partition
//!   (center extraction by non-maximum suppression, then pixel grouping).
//! * [`flow`] estimates per-instance motion from offset residuals, plus two
//!   simpler association strategies kept for comparison.
//! * [`matching`] carries identities across frames against a set of
//!   reference frames.
//! * [`labeling`] accumulates class evidence over a track's lifetime and
//!   scores finished tracks.
//! * [`losses`] holds the training criteria for all four map heads.
//! * [`synth`] generates exact synthetic sequences with known ground truth
//!   and a parametric corruption model, standing in for a real network.
//! * [`eval`] computes spatio-temporal IoU, average precision, and identity
//!   switch counts over whole tracks.
//! * [`io`] defines the on-disk map format and the sequence/results
//!   manifests; [`pipeline`] is the streaming end-to-end driver; [`render`]
//!   and [`bench`] cover visualization and stage timing.
//!
//! Conventions shared by every module: coordinates are `(row, col)` with the
//! origin at the top-left pixel center, offsets point from a pixel toward a
//! center (`pixel + offset = center`), and semantic class 0 is background.

pub mod bench;
pub mod eval;
pub mod flow;
pub mod grouping;
pub mod io;
pub mod labeling;
pub mod losses;
pub mod maps;
pub mod matching;
pub mod pipeline;
pub mod render;
pub mod synth;

mod error;

pub use error::{Error, Result};
pub use eval::{Track, VisMetrics};
pub use flow::InstanceFlow;
pub use grouping::{Center, GroupingParams, InstanceRecord};
pub use maps::{FramePrediction, IdentityMap, Mask, OffsetField, ScalarMap, SemanticProbMap};
pub use matching::{MatchingParams, ReferencePolicy, TrackerState};
pub use pipeline::{
    run_on_frames, FlowMethod, PipelineOutput, PipelineParams, PipelineState, TrackSummary,
};
pub use synth::{NoiseSpec, SceneSpec, ShapeSpec};
