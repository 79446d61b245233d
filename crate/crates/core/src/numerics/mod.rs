//! Dense `f32` tensors and a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, grad_check, primitive_suite, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
use tape::gelu_scalar;

use crate::error::{Error, Result};
use crate::masking::{masked_rows, MaskPlan};

/// Masked-position mean squared error.
///
/// `pred` is `[B, N, D]` or the equivalent `[B*N, D]`; `target` is `[B, N, D]`.
/// The mean runs over batch, masked patches, and channels.
pub fn mse_masked(tape: &mut Tape, pred: Var, target: &Tensor, plans: &[MaskPlan]) -> Result<Var> {
    let ts = target.shape();
    if ts.len() != 3 || ts[0] != plans.len() {
        return Err(Error::shape("mse_masked", ts, &[plans.len()]));
    }
    if plans.iter().any(|p| p.n_patches() != ts[1]) {
        return Err(Error::Invalid("mask plan does not match the patch count of the target".into()));
    }
    let rows = masked_rows(plans)?;
    tape.masked_mse(pred, target, rows)
}
