//! Discrete-valued neural communication.
//!
//! Messages exchanged between the modules of a recurrent modular network
//! are split into `G` segments and each segment is snapped to its nearest
//! vector in a shared codebook of size `L`, so a message takes at most
//! `L^G` distinct values. Gradients pass the snap straight through.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`graph`]: a small dense tensor type and a
//!   define-by-run reverse-mode autodiff engine.
//! - [`quantizer`]: the segment-wise vector quantizer, K-means codebook
//!   initialisation, a Gumbel-Softmax alternative and usage diagnostics.
//! - [`rim`]: a RIM-style modular recurrent network with top-K input
//!   attention and quantized communication.
//! - [`tasks`]: seeded adding and copying task generators.
//! - [`bounds`]: generalization-bound evaluation and a Monte Carlo check
//!   of the per-code concentration inequality.
//! - [`harness`]: configuration, training, evaluation, checkpoints and
//!   the command-line front end.
//!
//! ```
//! use dvnc::quantizer::quantize;
//! use dvnc::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let h = g.param(Tensor::vector(vec![0.9, 0.1]))?;
//! let codebook = g.param(Tensor::matrix(2, 1, vec![0.0, 1.0])?)?;
//! let q = quantize(h, codebook, 2, 0.25, true)?;
//! assert_eq!(q.indices, vec![1, 0]);
//! assert_eq!(q.quantized.value().data(), &[1.0, 0.0]);
//!
//! // The snap is the identity for gradients.
//! let grads = g.backward(q.quantized.sum()?)?;
//! assert_eq!(grads.wrt(h).data(), &[1.0, 1.0]);
//! # Ok::<(), dvnc::Error>(())
//! ```

pub mod bounds;
pub mod error;
pub mod graph;
pub mod harness;
pub mod optim;
pub mod quantizer;
pub mod rim;
pub mod seed;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
