//! Two-stage visual place recognition retrieval.
//!
//! Compact binary codes answer the "which places look plausible" question
//! with a Hamming scan; high-dimensional float descriptors re-rank those
//! candidates. The crate also contains the differentiable machinery that
//! produces such descriptors — a minimal reverse-mode tensor library, a
//! frozen ViT-style backbone stub, multi-scale convolution side adapters
//! with GeM-pooled dual heads, metric and quantization losses with
//! straight-through sign estimation — plus the geo/heading category
//! division used to unify training datasets, a Recall@N evaluator, and a
//! retrieval latency benchmark.
//!
//! Start with the runnable programs in `examples/`; each one exercises a
//! single capability end to end. The `svpr` binary exposes the same
//! machinery as subcommands (`hash`, `index`, `search`, `eval`, `bench`,
//! `divide`, `traintoy`).
//!
//! ```
//! use svpr::descriptor::{l2_normalize, sign_hash, hamming_distance};
//!
//! let f = l2_normalize(&[0.3, -1.2, 0.7, 0.1]).unwrap();
//! let code = f.sign_hash();
//! assert_eq!(hamming_distance(&code, &code).unwrap(), 0);
//! ```

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod descriptor;
pub mod error;
pub mod index;
pub mod loss;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
