use crate::error::{Error, Result};
use crate::model::VariableCatalog;
use crate::tensor::{Scalar, Tensor};

/// Cosine-of-latitude row weights for an `h`-row grid spanning pole to
/// pole, normalised to mean 1.
pub fn latitude_weights(h: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..h)
        .map(|i| {
            let lat = -90.0 + (i as f64 + 0.5) * 180.0 / h as f64;
            lat.to_radians().cos()
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / h.max(1) as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

fn check<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if pred.shape() != target.shape() || pred.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "rmse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let s = pred.shape();
    Ok((s[0], s[1], s[2]))
}

/// Per-channel RMSE over the grid of `[H, W, C]` fields, in channel order.
pub fn rmse_all<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, lat_weighted: bool) -> Result<Vec<f64>> {
    let (h, w, c) = check(pred, target)?;
    let weights = if lat_weighted {
        latitude_weights(h)
    } else {
        vec![1.0; h]
    };
    let mut acc = vec![0.0f64; c];
    for (cell, (p, t)) in pred
        .data()
        .chunks_exact(c)
        .zip(target.data().chunks_exact(c))
        .enumerate()
    {
        let wt = weights[cell / w];
        for ch in 0..c {
            let e = p[ch].f64() - t[ch].f64();
            acc[ch] += wt * e * e;
        }
    }
    let cells = (h * w) as f64;
    Ok(acc.into_iter().map(|s| (s / cells).sqrt()).collect())
}

/// RMSE of the named channel.
pub fn rmse<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    catalog: &VariableCatalog,
    channel: &str,
    lat_weighted: bool,
) -> Result<f64> {
    let idx = catalog.channel_index(channel)?;
    let (_, _, c) = check(pred, target)?;
    if c != catalog.channels() {
        return Err(Error::CatalogMismatch {
            expected: catalog.channels(),
            actual: c,
        });
    }
    Ok(rmse_all(pred, target, lat_weighted)?[idx])
}
