//! Fused linear cross entropy: the lm-head projection and the loss computed
//! chunk by chunk over rows, so only one `chunk_rows × V` logits buffer is
//! ever live.
//!
//! Per chunk: `logits = h·W`, cross entropy turns the logits into their
//! gradient in place, then `dh = (∇logits)·Wᵀ` and `dW += hᵀ·(∇logits)`.
//! Under mean reduction each chunk's logit gradient is rescaled by
//! `chunk_rows / (B·T)` (using the actual size of a short last chunk).

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn_acc, matmul, matmul_nt, matmul_tn};
use crate::mem;
use crate::ops::{cross_entropy, cross_entropy_rows, validate_targets, Reduction};
use crate::tensor::{assert_contiguous, Element, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPlan {
    chunk_rows: usize,
    num_chunks: usize,
    total_rows: usize,
}

/// `2^⌈log₂⌈BT / ⌈V/H⌉⌉⌉`
pub fn plan_chunks(total_rows: usize, vocab: usize, hidden: usize) -> ChunkPlan {
    let total_rows = total_rows.max(1);
    let vocab_per_hidden = vocab.max(1).div_ceil(hidden.max(1));
    let rows_per_chunk = total_rows.div_ceil(vocab_per_hidden).max(1);
    let chunk_rows = rows_per_chunk.next_power_of_two();
    ChunkPlan { chunk_rows, num_chunks: total_rows.div_ceil(chunk_rows), total_rows }
}

impl ChunkPlan {
    /// A plan with an explicit chunk size. Sizes above the next power of two
    /// of `total_rows` are clamped to it.
    pub fn with_chunk_rows(total_rows: usize, chunk_rows: usize) -> Result<Self> {
        if total_rows == 0 {
            return Err(Error::InvalidArgument("total_rows must be positive".into()));
        }
        if !chunk_rows.is_power_of_two() {
            return Err(Error::InvalidChunkSize(chunk_rows));
        }
        let chunk_rows = chunk_rows.min(total_rows.next_power_of_two());
        Ok(Self { chunk_rows, num_chunks: total_rows.div_ceil(chunk_rows), total_rows })
    }

    pub fn chunk_rows(&self) -> usize {
        self.chunk_rows
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    /// Nominal mean-reduction factor `chunk_rows / (B·T)`.
    pub fn scale_ratio(&self) -> f64 {
        self.chunk_rows as f64 / self.total_rows as f64
    }

    /// Rows of the logits scratch buffer actually needed.
    pub fn scratch_rows(&self) -> usize {
        self.chunk_rows.min(self.total_rows)
    }

    /// `(start, end)` row ranges, last one possibly short.
    pub fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_chunks).map(move |c| {
            let start = c * self.chunk_rows;
            (start, (start + self.chunk_rows).min(self.total_rows))
        })
    }
}

/// The lm-head weight `W: H × V` and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ProjectionHead<T> {
    weight: Matrix<T>,
    grad_accum: Matrix<T>,
}

impl<T: Element> ProjectionHead<T> {
    pub fn new(weight: Matrix<T>) -> Self {
        let grad_accum = Matrix::zeros(weight.rows(), weight.cols());
        Self { weight, grad_accum }
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Matrix<T> {
        &mut self.weight
    }

    /// `∇_W L` from the most recent forward-backward call.
    pub fn grad(&self) -> &Matrix<T> {
        &self.grad_accum
    }

    pub fn hidden(&self) -> usize {
        self.weight.rows()
    }

    pub fn vocab(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone)]
pub struct FlceOutput<T> {
    pub loss: f64,
    pub grad_hidden: Matrix<T>,
}

fn check_inputs<T: Element>(hidden: &Matrix<T>, head: &ProjectionHead<T>, targets: &[usize]) -> Result<()> {
    assert_contiguous(hidden, "hidden")?;
    assert_contiguous(&head.weight, "weight")?;
    if hidden.cols() != head.hidden() {
        return Err(shape_err(format!(
            "hidden {:?} does not match projection weight {:?}",
            hidden.shape(),
            head.weight.shape()
        )));
    }
    validate_targets(targets, hidden.rows(), head.vocab())
}

/// Loss and gradients of `CE(hidden · W, targets)` computed chunk by chunk.
/// `∇_W L` is left in `head.grad()`.
pub fn flce_forward_backward<T: Element>(
    hidden: &Matrix<T>,
    head: &mut ProjectionHead<T>,
    targets: &[usize],
    reduction: Reduction,
    plan: &ChunkPlan,
) -> Result<FlceOutput<T>> {
    check_inputs(hidden, head, targets)?;
    let (bt, h) = hidden.shape();
    let v = head.vocab();
    if plan.total_rows() != bt {
        return Err(shape_err(format!("plan covers {} rows, hidden has {bt}", plan.total_rows())));
    }

    head.grad_accum.as_mut_slice().fill(T::zero());
    let mut grad_hidden = Matrix::zeros(bt, h);
    mem::retain(mem::TAG_OUTPUT, grad_hidden.byte_size());

    let scratch_len = plan.scratch_rows() * v;
    let _scratch_guard = mem::scoped(mem::TAG_LOGITS, (scratch_len * T::DTYPE.byte_width()) as u64);
    let mut scratch = vec![T::zero(); scratch_len];

    let w = head.weight.as_slice();
    let mut loss = 0.0;
    for (start, end) in plan.chunks() {
        let rows = end - start;
        let h_chunk = &hidden.as_slice()[start * h..end * h];
        let logits = &mut scratch[..rows * v];

        gemm_nn(h_chunk, w, logits, rows, h, v);
        let chunk_loss = cross_entropy_rows(logits, v, &targets[start..end], reduction)?;
        loss += match reduction {
            Reduction::Sum => chunk_loss,
            Reduction::Mean => {
                let ratio = rows as f64 / bt as f64;
                let r = T::cast_f64(ratio);
                logits.iter_mut().for_each(|g| *g = *g * r);
                chunk_loss * ratio
            }
        };

        gemm_nt(logits, w, &mut grad_hidden.as_mut_slice()[start * h..end * h], rows, v, h);
        gemm_tn_acc(h_chunk, logits, head.grad_accum.as_mut_slice(), rows, h, v);
    }

    Ok(FlceOutput { loss, grad_hidden })
}

/// The same computation with the full `B·T × V` logits materialized at once.
pub fn linear_cross_entropy_unchunked<T: Element>(
    hidden: &Matrix<T>,
    head: &mut ProjectionHead<T>,
    targets: &[usize],
    reduction: Reduction,
) -> Result<FlceOutput<T>> {
    check_inputs(hidden, head, targets)?;
    let mut logits = matmul(hidden, &head.weight)?;
    let _guard = mem::scoped(mem::TAG_LOGITS, logits.byte_size());
    let ce = cross_entropy(&mut logits, targets, reduction)?;
    let grad_hidden = matmul_nt(&logits, &head.weight)?;
    head.grad_accum = matmul_tn(hidden, &logits)?;
    mem::retain(mem::TAG_OUTPUT, grad_hidden.byte_size());
    Ok(FlceOutput { loss: ce.loss, grad_hidden })
}
