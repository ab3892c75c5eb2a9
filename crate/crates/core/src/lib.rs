//! Multi-level knowledge-guided referring camouflaged object detection.
//!
//! The pipeline turns a class label and a camouflaged photo into a mask:
//!
//! 1. [`knowledge`] renders prompts and collects seven knowledge texts from a
//!    multimodal LLM backend, cached on disk.
//! 2. [`text_encoder`] embeds each text with a frozen backend.
//! 3. [`injector`] fuses the embeddings into a guidance vector.
//! 4. [`model`] encodes the photo with a LoRA-adapted ViT and decodes a mask
//!    conditioned on the guidance.
//! 5. [`train`] fits decoder, injector and adapters with BCE; [`metrics`]
//!    scores predictions.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod injector;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod text_encoder;
pub mod train;
