//! Dual global descriptor metric learning for image pair verification.
//!
//! A frozen convolutional filter bank produces feature maps; a two-branch
//! head (SPoC + MAC pooling, each normalized and projected) produces unit
//! embeddings trained with a supervised contrastive loss. Pairs are scored by
//! cosine similarity and evaluated with an exact rank-based ROC-AUC.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod descriptor;
pub mod evalfuse;
pub mod extractor;
pub mod linalg;
pub mod objective;
pub mod pipeline;
pub mod trainer;
