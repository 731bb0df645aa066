//! Desk-scale contrastive localized language-image pre-training.
//!
//! A from-scratch dual encoder whose image embedding can be prompted —
//! with a bounding box or a caption — into region embeddings, trained with
//! an image-text contrastive loss, a region-text contrastive loss, and a
//! box-regression grounding loss on procedurally generated region-text
//! corpora. Includes the caption-to-region pseudo-labeling pipeline and a
//! zero-shot region evaluation harness.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod params;
pub mod prompter;
pub mod synthdata;
pub mod tokenizer;
pub mod trainer;
pub mod vesl;
