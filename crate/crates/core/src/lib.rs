//! Simulator for knowledge-base guided generative semantic communication.
//!
//! A semantic encoder maps an image to predicted attributes, a shared
//! semantic knowledge base (SKB) snaps them to the nearest class attribute
//! vector, and only that class index (plus, bandwidth permitting, a latent
//! code from a hierarchical conditional VAE) crosses the channel. The
//! receiver recovers the class directly from the index and either
//! reconstructs the source image or generates a class-consistent one.

pub mod channel;
pub mod config;
pub mod cvae;
pub mod dataset;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod skb;

pub use error::{Error, Result};
