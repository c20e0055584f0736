//! Dense tensors, hand-derived layer gradients, Adam, finite-difference
//! checking and the weight container format.

pub mod adam;
pub mod gradcheck;
pub mod mlp;
pub mod rng;
pub mod tensor;
pub mod weights;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use mlp::{mlp_forward, neg_log_sigmoid, sigmoid, Activation, Dense, Mlp, MlpCache};
pub use rng::{derive_seed, Rng, Stream};
pub use tensor::{dot, matmul, Scalar, Tensor};
pub use weights::{decode_tensors, encode_tensors, read_tensors, sidecar_path, write_tensors};

/// L2-normalise `v` in place; returns the original norm.
pub fn normalize<T: Scalar>(v: &mut [T]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x = T::of(x.f64() / n);
        }
    }
    n
}

/// Backward through `e = h / ‖h‖` given the normalised output and the norm.
pub fn normalize_backward(e: &[f64], norm: f64, de: &[f64]) -> Vec<f64> {
    let proj: f64 = e.iter().zip(de).map(|(a, b)| a * b).sum();
    e.iter().zip(de).map(|(&ei, &g)| (g - ei * proj) / norm).collect()
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}
