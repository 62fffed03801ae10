//! Training objectives, the optimizer, and evaluation metrics.

mod metrics;
mod optim;

pub use metrics::{latitude_weights, rmse, rmse_all};
pub use optim::{AdamW, AdamWConfig};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tape, Var};

/// Default weight of the reconstruction term.
pub const LAMBDA: f64 = 0.1;

/// Scalar loss nodes from one evaluation of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub pred: Var,
    pub recon: Var,
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Uncertainty-weighted prediction loss, `mean(r² · e^{-w} + w)` with `w`
/// broadcast over the grid.
///
/// With a `mask` (`[1, 1, channels]` of 0/1), masked-out channels contribute
/// nothing and the mean runs over the kept elements only.
pub fn dynamic_prediction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    w: Var,
    mask: Option<Var>,
) -> Result<Var> {
    same_shape(tape, "dynamic_prediction_loss", pred, target)?;
    let channels = tape.shape(pred).last().copied().unwrap_or(0);
    let w_shape = tape.shape(w);
    if w_shape.iter().product::<usize>() != channels || w_shape.last() != Some(&channels) {
        return Err(Error::ShapeMismatch {
            op: "dynamic_prediction_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let r = tape.sub(pred, target)?;
    let r2 = tape.square(r)?;
    let neg_w = tape.neg(w)?;
    let inv = tape.exp(neg_w)?;
    let scaled = tape.mul(r2, inv)?;
    let per_elem = tape.add(scaled, w)?;
    match mask {
        None => tape.mean(per_elem),
        Some(m) => {
            let kept: f64 = tape.value(m).data().iter().map(|v| v.f64()).sum();
            if kept <= 0.0 {
                return Err(Error::Domain {
                    op: "dynamic_prediction_loss",
                    detail: "mask keeps no channel".into(),
                });
            }
            let masked = tape.mul(per_elem, m)?;
            let total = tape.sum(masked)?;
            let cells = tape.value(pred).numel() / channels.max(1);
            tape.mul_scalar(total, T::of(1.0 / (kept * cells as f64)))
        }
    }
}

/// Mean squared error between two same-shaped nodes.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mse", a, b)?;
    let r = tape.sub(a, b)?;
    let r2 = tape.square(r)?;
    tape.mean(r2)
}

/// `mean((Dec(Enc(x)) - x)²)`; the transformer blocks are not evaluated.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, model: &Model<T>, x: Var) -> Result<Var> {
    let z = model.encode(tape, x)?;
    let recon = model.decode(tape, z)?;
    mse(tape, recon, x)
}

/// `pred + λ · recon` for one `(x, target)` pair, sharing a single encoding.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    x: Var,
    target: Var,
    lambda: f64,
    mask: Option<Var>,
) -> Result<LossParts> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} must be non-negative")));
    }
    let out = model.forward_full(tape, x)?;
    let w = model.loss_weights(tape)?;
    let pred = dynamic_prediction_loss(tape, out.pred, target, w, mask)?;
    let recon = mse(tape, out.recon, x)?;
    let weighted = tape.mul_scalar(recon, T::of(lambda))?;
    let total = tape.add(pred, weighted)?;
    Ok(LossParts { total, pred, recon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_residual_zero_weight_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64 * 0.1);
        let p = tape.constant(x.clone());
        let t = tape.constant(x);
        let w = tape.constant(Tensor::zeros([1, 1, 4]));
        let l = dynamic_prediction_loss(&mut tape, p, t, w, None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn unit_residual_is_one() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_fn(
            [2, 2, 3],
            |i| if i % 2 == 0 { 1.0 } else { -1.0 },
        ));
        let t = tape.constant(Tensor::zeros([2, 2, 3]));
        let w = tape.constant(Tensor::zeros([1, 1, 3]));
        let l = dynamic_prediction_loss(&mut tape, p, t, w, None).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn mask_excludes_channels() {
        let mut tape = Tape::<f64>::new();
        // channel 1 has a huge residual but is masked out
        let p = tape.constant(Tensor::from_fn(
            [2, 2, 2],
            |i| if i % 2 == 1 { 100.0 } else { 2.0 },
        ));
        let t = tape.constant(Tensor::zeros([2, 2, 2]));
        let w = tape.constant(Tensor::zeros([1, 1, 2]));
        let m = tape.constant(Tensor::from_f64([1, 1, 2], &[1.0, 0.0]).unwrap());
        let l = dynamic_prediction_loss(&mut tape, p, t, w, Some(m)).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
    }

    #[test]
    fn weight_shape_is_checked() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros([2, 2, 3]));
        let t = tape.constant(Tensor::zeros([2, 2, 3]));
        let w = tape.constant(Tensor::zeros([1, 1, 2]));
        assert!(matches!(
            dynamic_prediction_loss(&mut tape, p, t, w, None),
            Err(Error::ShapeMismatch { .. })
        ));
        let t2 = tape.constant(Tensor::zeros([2, 2, 2]));
        assert!(matches!(mse(&mut tape, p, t2), Err(Error::ShapeMismatch { .. })));
    }
}
