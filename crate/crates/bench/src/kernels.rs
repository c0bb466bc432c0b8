//! Function table of the kernels under test, so a suite can be run against a
//! deliberately broken build.

use fusekit::flce::{flce_forward_backward, ChunkPlan, FlceOutput, ProjectionHead};
use fusekit::ops::{self, CEResult, GluInputs, NormResiduals, Reduction, RotationSpec};
use fusekit::{Element, Matrix, Result, Vector};

pub type NormFwd<T> = fn(&Matrix<T>, &Vector<T>, f64) -> Result<(Matrix<T>, NormResiduals<T>)>;
pub type LayerNormFwd<T> = fn(&Matrix<T>, &Vector<T>, &Vector<T>, f64) -> Result<(Matrix<T>, NormResiduals<T>)>;
pub type RmsNormBwd<T> = fn(&Matrix<T>, &Matrix<T>, &NormResiduals<T>, &Vector<T>) -> Result<(Matrix<T>, Vector<T>)>;
pub type LayerNormBwd<T> =
    fn(&Matrix<T>, &Matrix<T>, &NormResiduals<T>, &Vector<T>) -> Result<(Matrix<T>, Vector<T>, Vector<T>)>;
pub type RopeFn<T> = fn(&Matrix<T>, &Matrix<T>, &RotationSpec) -> Result<(Matrix<T>, Matrix<T>)>;
pub type GluFwd<T> = for<'a> fn(GluInputs<'a, T>) -> Result<Matrix<T>>;
pub type GluBwd<T> = for<'a> fn(&Matrix<T>, GluInputs<'a, T>) -> Result<(Matrix<T>, Matrix<T>)>;
pub type CrossEntropyFn<T> = fn(&mut Matrix<T>, &[usize], Reduction) -> Result<CEResult>;
pub type FlceFn<T> = fn(&Matrix<T>, &mut ProjectionHead<T>, &[usize], Reduction, &ChunkPlan) -> Result<FlceOutput<T>>;

#[derive(Clone, Copy)]
pub struct KernelTable<T: Element> {
    pub rmsnorm_forward: NormFwd<T>,
    pub rmsnorm_backward: RmsNormBwd<T>,
    pub layernorm_forward: LayerNormFwd<T>,
    pub layernorm_backward: LayerNormBwd<T>,
    pub rope_forward: RopeFn<T>,
    pub rope_backward: RopeFn<T>,
    pub swiglu_forward: GluFwd<T>,
    pub swiglu_backward: GluBwd<T>,
    pub geglu_forward: GluFwd<T>,
    pub geglu_backward: GluBwd<T>,
    pub cross_entropy: CrossEntropyFn<T>,
    pub flce: FlceFn<T>,
}

impl<T: Element> KernelTable<T> {
    /// The library's fused kernels.
    pub fn fused() -> Self {
        Self {
            rmsnorm_forward: ops::rmsnorm_forward::<T>,
            rmsnorm_backward: ops::rmsnorm_backward::<T>,
            layernorm_forward: ops::layernorm_forward::<T>,
            layernorm_backward: ops::layernorm_backward::<T>,
            rope_forward: ops::rope_forward::<T>,
            rope_backward: ops::rope_backward::<T>,
            swiglu_forward: ops::swiglu_forward::<T>,
            swiglu_backward: ops::swiglu_backward::<T>,
            geglu_forward: ops::geglu_forward::<T>,
            geglu_backward: ops::geglu_backward::<T>,
            cross_entropy: ops::cross_entropy::<T>,
            flce: flce_forward_backward::<T>,
        }
    }
}

impl<T: Element> Default for KernelTable<T> {
    fn default() -> Self {
        Self::fused()
    }
}

impl<T: Element> std::fmt::Debug for KernelTable<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelTable").field("dtype", &T::DTYPE).finish_non_exhaustive()
    }
}
