//! Fused kernels: single-pass, row-parallel forward and analytic backward.

mod cross_entropy;
mod glu;
mod norm;
mod reduce;
mod rope;

pub use cross_entropy::{cross_entropy, safe_neg_log, CEResult, Reduction};
pub(crate) use cross_entropy::{cross_entropy_rows, validate_targets};
pub use glu::{
    geglu_backward, geglu_forward, gelu_tanh, gelu_tanh_grad, sigmoid, silu, swiglu_backward, swiglu_forward,
    GluInputs, GELU_CUBIC, GELU_CUBIC_DERIV, GELU_HALF_K, GELU_K,
};
pub use norm::{
    layernorm_backward, layernorm_forward, rmsnorm_backward, rmsnorm_forward, NormResiduals, DEFAULT_EPS,
};
pub use rope::{rope_backward, rope_backward_unguarded, rope_forward, RotationSpec};
