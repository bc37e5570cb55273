//! Recurrent networks with adaptive detrending, recurrent normalizers, and the
//! tooling to train and inspect them.

pub mod cell;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod diagnostics;
pub mod experiment;
pub mod grad;
pub mod kernels;
pub mod network;
pub mod norm;
pub mod params;
pub mod plot;
pub mod prng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use grad::{Tape, Var};
pub use kernels::ConvSpec;
pub use prng::Prng;
pub use tensor::{Precision, Tensor, TensorError};

/// Sizes the global worker pool; call once, before any parallel work.
pub fn init_threads(n: usize) -> Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}
