//! The learnable per-channel loss weights settle at the log of each
//! channel's mean squared residual.

use vamoe::losses::dynamic_prediction_loss;
use vamoe::tensor::{Tape, Tensor};

fn main() -> vamoe::Result<()> {
    let scales = [0.1, 0.5, 1.0, 2.0, 4.0];
    let c = scales.len();
    let residual = Tensor::from_fn([8, 8, c], |i| {
        let s = scales[i % c];
        s * if (i / c) % 2 == 0 { 1.0 } else { -1.0 }
    });
    let zeros = Tensor::zeros([8, 8, c]);
    let mut w = vec![0.0f64; c];
    for _ in 0..200 {
        let mut tape = Tape::new();
        let p = tape.constant(residual.clone());
        let t = tape.constant(zeros.clone());
        let wv = tape.leaf(Tensor::new([1, 1, c], w.clone())?, true);
        let l = dynamic_prediction_loss(&mut tape, p, t, wv, None)?;
        let g = tape.backward(l)?;
        let g = g.wrt(wv).expect("leaf");
        for (x, d) in w.iter_mut().zip(g.data()) {
            *x -= c as f64 * d;
        }
    }
    for (s, x) in scales.iter().zip(&w) {
        println!("scale {s:>4}: w = {x:+.5}, ln(m) = {:+.5}", (s * s).ln());
    }
    Ok(())
}
