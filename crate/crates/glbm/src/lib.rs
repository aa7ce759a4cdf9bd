//! Scene non-specific generative background modeling for video.
//!
//! The toolkit learns a low-dimensional generative model of video
//! backgrounds with a graph-structured variational auto-encoder: frames of
//! one scene form a clique whose latent codes share a smoothness prior,
//! reconstruction is motion-masked, and the latent matrix of each clique is
//! pushed toward low rank through its nuclear norm. Inference produces
//! per-frame or median background images, plus background subtraction and
//! the standard background-quality metrics.

pub mod dataset;
pub mod error;
pub mod flow;
pub mod graph;
pub mod imgproc;
pub mod network;
pub mod nn;
pub mod objective;
pub mod posterior;

pub use error::{GlbmError, Result};
