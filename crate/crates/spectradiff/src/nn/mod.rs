//! Minimal differentiable-computation substrate.
//!
//! Tensors, layer ops with explicit backward passes, Adam, parameter storage,
//! finite-difference gradient checking and the checkpoint container. There is
//! no general autodiff tape: networks are static layer graphs that call each
//! layer's `backward` in reverse order.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use params::{GradStore, Param, ParamStore};
pub use tensor::TensorND;

/// Number of worker threads for batch-parallel training, from the
/// `SPECTRADIFF_THREADS` environment variable (defaults to the machine's
/// available parallelism, capped at 8).
pub fn worker_threads() -> usize {
    let default = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8);
    match std::env::var("SPECTRADIFF_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(default),
        Err(_) => default,
    }
}
