use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Mean binary cross-entropy of `b x 1` probabilities against 0/1 labels.
/// Probabilities are effectively clamped to `[1e-12, 1 − 1e-12]` by the log
/// floor.
pub fn bce_loss(tape: &mut Tape, yhat: Tensor, labels: &[f64]) -> Result<Tensor> {
    let (rows, cols) = tape.shape(yhat);
    if cols != 1 || rows != labels.len() {
        return Err(Error::shape("bce_loss", (rows, cols), (labels.len(), 1)));
    }
    if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data(format!(
            "label {} at row {i} is not 0 or 1",
            labels[i]
        )));
    }
    let y = tape.constant(Matrix::from_vec(rows, 1, labels.to_vec()));
    let not_y = tape.constant(Matrix::from_vec(
        rows,
        1,
        labels.iter().map(|l| 1.0 - l).collect(),
    ));
    let log_p = tape.log(yhat);
    let neg = tape.neg(yhat);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_q = tape.log(one_minus);
    let pos = tape.mul(y, log_p)?;
    let negs = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, negs)?;
    let mean = tape.mean(ll);
    Ok(tape.neg(mean))
}

/// `L = L_BCE + α·L_MI`. Without an MI term the BCE tensor is returned
/// unchanged, so no MI gradient work happens.
pub fn total_loss(tape: &mut Tape, bce: Tensor, mi: Option<Tensor>, alpha: f64) -> Result<Tensor> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    match mi {
        None => Ok(bce),
        Some(mi) => {
            let weighted = tape.scale(mi, alpha);
            tape.add(bce, weighted)
        }
    }
}
