//! Causal inference with geolocated imagery.
//!
//! The crate covers the whole workflow:
//!
//! * [`geochip`]: read georeferenced rasters and cut square chips around
//!   longitude/latitude points, searching a pool of rasters in order.
//! * [`recordstore`]: a CRC-framed, indexed container of keyed tensors.
//! * [`embed`]: randomized-convolution embeddings of images and image sequences.
//! * [`confound`]: image-deconfounded average treatment effects (Hajek
//!   weighting on an embeddings-backed propensity model), bootstrap standard
//!   errors, cross-validated model metrics and occlusion salience maps.
//! * [`hetero`]: image-driven effect clusters fit by EM, with implied ATE,
//!   per-unit effects and transportability to new locations.
//! * [`synth`]: synthetic data with known ground truth.
//! * [`cli`]: the `causal-chips` command line front end.

pub mod cli;
pub mod confound;
pub mod embed;
pub mod frame;
pub mod geochip;
pub mod hetero;
pub mod linalg;
pub mod pgm;
pub mod recordstore;
pub mod source;
pub mod synth;
pub mod tensor;

pub use embed::{EmbeddingConfig, EmbeddingMatrix, KernelBank};
pub use frame::CausalFrame;
pub use source::{ImageSource, InMemorySource};
pub use tensor::{ImageTensor, Layout};
