use candle_core::Tensor;

use crate::error::{Error, Result};

/// Binary cross-entropy on a logit, `softplus(z) - y z`.
pub fn bce_loss(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over matching `(b,)` logits and labels.
pub fn bce_loss_mean(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if logits.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} and labels {:?} differ",
            logits.dims(),
            labels.dims()
        )));
    }
    let softplus = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((softplus - logits.mul(labels)?)?.mean_all()?)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
