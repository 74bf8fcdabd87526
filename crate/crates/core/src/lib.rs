//! Self-supervised representation learning by auto-encoding transformations.
//!
//! A sampled image transformation is regressed from the features of the
//! original and the transformed image: a shared-weight encoder embeds both,
//! and a decoder head predicts the transformation's parameter vector. The
//! crate provides the transformation algebra and warping, a small
//! double-precision reverse-mode autodiff engine with the layers needed for
//! network-in-network encoders, dataset ingestion, and the training and
//! probing harness used to evaluate the learned features.

pub mod data;
pub mod model;
pub mod nn;
pub mod traineval;
pub mod warp;
pub mod xform;
