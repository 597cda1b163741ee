//! Ranking objective: pointwise regression plus a pairwise hinge that
//! penalizes order inversions between predictions and targets.

use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tape, Tensor};

/// `mse(pred, target) + alpha * sum_{i,j} max(0, -(pred_i - pred_j) * (target_i - target_j))`
///
/// The mean-squared term averages over nodes; the hinge sums over all
/// ordered pairs, so each inverted pair is counted twice. Adding a constant
/// to every prediction leaves the hinge term unchanged (differences only)
/// but moves the regression term.
pub fn ranking_loss<S: Scalar>(
    tape: &Tape<S>,
    pred: &Tensor<S>,
    target: &Tensor<S>,
    alpha: f64,
) -> Result<Tensor<S>, ShapeError> {
    if pred.shape() != target.shape() || pred.rank() != 1 {
        return Err(ShapeError::Mismatch {
            expected: target.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    let n = pred.shape()[0];
    let mse = tape.mse(pred, target)?;

    // Pairwise differences via column-minus-row broadcasting.
    let p_col = tape.reshape(pred, &[n, 1])?;
    let p_row = tape.reshape(pred, &[1, n])?;
    let t_col = tape.reshape(target, &[n, 1])?;
    let t_row = tape.reshape(target, &[1, n])?;
    let dp = tape.sub(&p_col, &p_row)?;
    let dt = tape.sub(&t_col, &t_row)?;
    let agreement = tape.mul(&dp, &dt)?;
    let hinge = tape.relu(&tape.scale(&agreement, -1.0));
    let penalty = tape.sum(&hinge);
    tape.add(&mse, &tape.scale(&penalty, alpha))
}
