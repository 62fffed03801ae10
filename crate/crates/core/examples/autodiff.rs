//! Build a small expression on the tape, backpropagate, and compare the
//! gradient with central differences.

use vamoe::tensor::gradcheck::{check, Coverage};
use vamoe::tensor::{Tape, Tensor};

fn main() -> vamoe::Result<()> {
    let x = Tensor::from_fn([3, 4], |i| (i as f64 * 0.37).sin());
    let w = Tensor::from_fn([4, 2], |i| (i as f64 * 0.91).cos());

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let wv = tape.leaf(w.clone(), true);
    let h = tape.matmul(xv, wv)?;
    let h = tape.gelu(h)?;
    let sq = tape.square(h)?;
    let loss = tape.mean(sq)?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).item());
    println!("dL/dw = {:?}", grads.wrt(wv).map(|g| g.data().to_vec()));

    let report = check(&[x, w], 1e-6, Coverage::All, |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.gelu(h)?;
        let sq = t.square(h)?;
        t.mean(sq)
    })?;
    println!(
        "finite-difference check: rel err {:.2e} over {} entries",
        report.rel_err, report.checked
    );
    Ok(())
}
