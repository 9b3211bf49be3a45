//! Aesthetic score-distribution prediction on full-resolution photos.
//!
//! Images of arbitrary sizes are zero-padded into fixed-size batches; an ROI
//! max-pooling layer reads only the image region of each padded canvas, so the
//! padding never influences the prediction. Visual features are fused with an
//! encoded challenge theme and trained against vote histograms with an earth
//! mover's distance loss.
//!
//! The crate is organized as:
//!
//! * [`tensor`] — dense f64 tensors plus the forward/backward primitives the
//!   model needs (conv, pooling, affine, softmax, ...), all checkable against
//!   naive references and finite differences.
//! * [`roi`] — coordinate mapping and ROI max-pooling / ROI align / adaptive
//!   pooling over padded feature maps.
//! * [`metrics`] — vote normalization, the EMD loss and its gradient, and the
//!   full evaluation metric set (divergences, SRCC/PLCC/MSE).
//! * [`model`] — the theme-aware network, its hand-wired backward pass, and
//!   checkpoint serialization.
//! * [`data`] — padding/resize/augmentation transforms, PPM I/O, manifests,
//!   and the synthetic stripe dataset generator.
//! * [`train`] — SGD with momentum, the learning-rate schedule, the training
//!   loop, and the evaluator with test-time view averaging.
//! * [`verify`] — the runnable property suite behind `aesth verify`.
//! * [`ablate`] — the ablation driver comparing input-transform variants.

pub mod ablate;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod roi;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Initialize the global thread pool from the `AESTH_THREADS` environment
/// variable. No-op if a pool was already built (e.g. by an embedding test
/// harness) or the variable is unset/invalid.
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("AESTH_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
