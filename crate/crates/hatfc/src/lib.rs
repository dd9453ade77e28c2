//! Desk-scale hierarchical autoregressive transformer forecasting.
//!
//! The crate builds a two-level autoregressive forecaster: segment-level
//! initialization followed by step-wise refinement, on top of a causal
//! windowed attention with a learnable exponential decay kernel and
//! precomputed relative position encodings. Everything runs on a small
//! recorded-graph reverse-mode differentiation engine, so training,
//! gradient verification, and complexity benchmarking need no external
//! ML framework.
//!
//! Modules map onto the moving parts:
//!
//! * [`tensor`] — dense tensors with recorded reverse-mode gradients
//! * [`encoding`] — offset-indexed sinusoidal relative position table
//! * [`attention`] — causal windows, decay kernel, windowed attention,
//!   and a dense reference oracle
//! * [`model`] — encoder blocks, segment initializer, step refiner,
//!   checkpoints
//! * [`autoregress`] — the two-level generation loop
//! * [`training`] — hierarchical discounted loss, Adam, gradient
//!   clipping, the fit loop
//! * [`data`] — CSV ingest, synthetic series, standardization, sliding
//!   windows
//! * [`evaluation`] — MSE/MAE/Pearson and linear reference baselines
//! * [`bench`] — FLOP accounting and wall-time scaling of windowed vs
//!   full attention
//! * [`cli`] — the `hatfc` command line (train / forecast / eval /
//!   bench / synth)
//!
//! See the crate examples for one runnable walk-through per capability.

pub mod attention;
pub mod autoregress;
pub mod bench;
pub mod cli;
pub mod data;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod mat;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use mat::Mat;
pub use tensor::{Graph, Real, Tensor};

/// Build a rayon thread pool honoring the `HATFC_THREADS` cap.
pub fn thread_pool() -> rayon::ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HATFC_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                builder = builder.num_threads(n);
            }
        }
    }
    builder.build().expect("thread pool")
}
