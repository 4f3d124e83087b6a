//! Weakly and semi-supervised segmentation of hybrid film frames into
//! photographic (P) and non-photographic (NP) content.
//!
//! The pipeline has three stages:
//!
//! 1. [`proxy_classifier`]: a patch transformer classifies homogeneous frames
//!    as P or NP from the centroid of its patch states.
//! 2. [`mask_gen`]: the same head applied to every patch state yields a
//!    patch-granular proxy mask for heterogeneous frames.
//! 3. [`segmenter`]: a hierarchical encoder / all-dense decoder network is
//!    fine-tuned on homogeneous masks plus proxy masks.
//!
//! [`corpus`] fabricates frames with pixel-exact ground truth, [`splitter`]
//! produces video-disjoint stratified splits and [`eval_explain`] holds the
//! metrics, GradCAM and boundary-case reporting.

// Per-channel pixel loops read better indexed.
#![allow(clippy::needless_range_loop)]

pub mod backbone;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval_explain;
pub mod ladder;
pub mod mask_gen;
pub mod nn_util;
pub mod preprocess;
pub mod proxy_classifier;
pub mod run;
pub mod segmenter;
pub mod splitter;
pub mod train_util;

pub use error::{Error, Result};
