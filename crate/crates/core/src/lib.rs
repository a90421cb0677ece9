//! Multi-item-query attention for sequential recommendation.
//!
//! This crate is the allocation-only numeric core: dense matrices, a
//! reverse-mode tape, Adam, interaction-log preprocessing, the single-query
//! and multi-item-query attention sublayers, the transformer recommender
//! built on them, the training loop, and full-corpus leave-one-out ranking
//! metrics. It has no IO; file formats, threading and the command line live
//! in the `miqrec` crate.
#![no_std]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]
// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adam;
pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod ops;
pub mod rng;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use graph::{Graph, NodeId, OpKind, ParamId, ParamStore, Parameter};
pub use matrix::{Mask, Matrix};

pub use model::{AttentionKind, ModelConfig, SeqRecModel};
pub use rng::RngStream;
