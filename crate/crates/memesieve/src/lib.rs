//! Contrastive meme triplet generation, image-text fusion training, and
//! hateful-region segmentation.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`cmgen`] builds a non-hateful and a hateful counterpart for every
//!    source meme (inpainting, captioning, text-to-image, and exact
//!    nearest-neighbour retrieval against a reference index), all through
//!    pluggable [`backends`].
//! 2. [`triplets`] pre-filters memes for offensive text/image content and
//!    assembles (anchor, non-hate, hate) triplet records.
//! 3. [`ita`] + [`train`] pre-train a lightweight image-text alignment
//!    stack with a triplet loss over frozen dual-encoder embeddings, then
//!    fine-tune a classification head.
//! 4. [`seg`] turns the captured fusion attention into pixel heatmaps,
//!    ranked text tokens, and thresholded object selections; [`eval`]
//!    scores predictions and annotation sheets.

pub mod backends;
pub mod cmgen;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod ita;
pub mod seeding;
pub mod seg;
pub mod synthetic;
pub mod train;
pub mod triplets;

pub use error::{Error, Result};
