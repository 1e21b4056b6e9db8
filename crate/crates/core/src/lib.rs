//! Asynchronous frame/event fusion for tracking arbitrary points.
//!
//! The crate is organized bottom-up:
//!
//! * [`events`] holds the event data model, binning and the csv/evbin codecs.
//! * [`repr`] turns event batches into dense tensors (time surface, count
//!   image, voxel grid).
//! * [`synth`] is the physics oracle: analytic scenes, the contrast-threshold
//!   event simulator, log-intensity reconstruction and the double-integral
//!   blur model.
//! * [`fusion`] contains the tokenizers, locality-biased cross-attention,
//!   the transient state machine, temporal attention and the pyramid decoder.
//! * [`tracker`] implements patch sampling, correlation descriptors, the
//!   iterative refiner and sliding-window orchestration.
//! * [`metrics`] is the evaluation suite.
//!
//! Every data-parallel kernel goes through [`par`], which uses rayon when the
//! `parallel` feature is on and plain iterators otherwise. Results do not
//! depend on which path is compiled in.

pub mod events;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod repr;
pub mod synth;
pub mod tensor_io;
pub mod tracker;
pub mod tracks;
pub mod weights;

pub use events::{Event, EventBatch, EventStream, Polarity, StreamFormat, Timeline};
pub use repr::{EventTensor, TensorKind};
pub use tracks::{TrackPoint, TrackSet};
pub use weights::{InitScheme, ModelConfig, WeightBundle};
