//! Fused transformer-training kernels with analytic backward passes.
//!
//! * [`tensor`]: row-major matrices, the `(B·T, H)` flattening and layout guards.
//! * [`ops`]: fused RMSNorm, LayerNorm, RoPE, SwiGLU, GeGLU and in-place cross entropy.
//! * [`flce`]: chunked projection + cross entropy that never holds the full logits.
//! * [`reference`]: unfused f64 oracle, tolerances and finite differences.
//! * [`mem`]: explicit allocation ledger for peak-memory accounting.

pub mod error;
pub mod flce;
pub mod linalg;
pub mod mem;
pub mod ops;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
pub use flce::{flce_forward_backward, linear_cross_entropy_unchunked, plan_chunks, ChunkPlan, FlceOutput, ProjectionHead};
pub use mem::{logits_bytes, AllocationLedger};
pub use ops::Reduction;
pub use reference::{OpKind, Tolerance};
pub use tensor::{DType, Element, IndexWidth, Matrix, Vector};
