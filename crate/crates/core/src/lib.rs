//! Unsupervised false-positive suppression for detectors moved to a new
//! domain.
//!
//! A source detector's boxes on unlabeled target images are clustered by
//! their features. Clusters the detector is already confident about seed a
//! positive set. A scorer is then trained on those pseudo labels, and the
//! highest-scoring negative clusters are promoted round by round. This
//! continues until the number of validation boxes above the output threshold
//! is back at the source detector's count.
//!
//! ```no_run
//! use boxrank::{dataio, rerank::{run_pipeline, PipelineConfig}, oracle::LinearScorer};
//! # fn main() -> boxrank::Result<()> {
//! let train = dataio::load_detections("train.jsonl".as_ref())?;
//! let val = dataio::load_detections("val.jsonl".as_ref())?;
//! let state = run_pipeline(&train, &val, &mut LinearScorer::new(), &PipelineConfig::default())?;
//! println!("{:?} after {} rounds", state.terminated, state.round);
//! # Ok(())
//! # }
//! ```

pub mod boxgeom;
pub mod clustering;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod rerank;
pub mod synth;

pub use boxgeom::{iou, match_boxes, nms, BBox, DetBox, DetectionSet, Label, Role};
pub use error::{Error, Result};
