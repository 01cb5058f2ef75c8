//! Online video object detection from two consecutive frames.
//!
//! The crate contains everything needed to train and evaluate three detector
//! variants that differ only in their input: a single-frame baseline, a
//! "double" model fed the channel-wise concatenation of a preceding frame and
//! the target frame, and a "flow" model fed a dense optical flow image
//! concatenated with the target frame.
//!
//! Modules, bottom-up:
//!
//! - [`geometry`]: boxes, IoU, anchors, box coding, anchor assignment and NMS.
//! - [`losses`]: focal loss, smooth L1 and the combined detection loss.
//! - [`flow`]: Farnebäck dense optical flow and the 3-channel flow image.
//! - [`inputs`]: frames, frame pairs and per-variant network inputs.
//! - [`detector`]: a miniature RetinaNet with hand-written backpropagation.
//! - [`synthdata`]: deterministic synthetic traffic scenes and their on-disk format.
//! - [`eval`]: matching, precision/recall curves, AP and mAP.
//! - [`harness`]: training, the experiment suite and configuration.
//! - [`api`]: request and response bodies of the HTTP service.

pub mod api;
pub mod detector;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod inputs;
pub mod losses;
pub mod synthdata;

pub use detector::{ModelSpec, ModelState};
pub use inputs::Variant;
pub use geometry::{BBox, Detection, LabeledBox};
