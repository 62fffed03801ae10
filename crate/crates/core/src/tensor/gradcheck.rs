//! Central finite-difference checks for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked
    /// coordinates (0 when both vanish).
    pub rel_err: f64,
    /// Largest absolute elementwise difference.
    pub max_abs_diff: f64,
    /// Number of scalar coordinates that were perturbed.
    pub checked: usize,
    /// Coordinate (input, flat index) with the largest absolute difference.
    pub worst: (usize, usize),
}

/// Which coordinates of each input to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// Random subset: `fraction` of each input (at least one entry), seeded.
    Sampled {
        fraction: f64,
        seed: u64,
    },
}

/// Compare the tape gradient of a scalar function against central
/// differences with step `step`.
///
/// `f` records the function on a fresh tape given leaf vars for `inputs`.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, coverage: Coverage, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(match coverage {
        Coverage::All => 0,
        Coverage::Sampled { seed, .. } => seed,
    });
    let mut acc = Accum::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sampled { fraction, .. } => {
                let count = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
                let mut c = sample(&mut rng, n, count).into_vec();
                c.sort_unstable();
                c
            }
        };
        let analytic = grads.wrt(vars[i]);
        for j in coords {
            let base = input.data()[j];
            probe[i].data_mut()[j] = base + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = base - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.map_or(0.0, |g| g.data()[j]);
            acc.push(a, numeric, (i, j));
        }
    }
    Ok(acc.finish())
}

/// Like [`check`], but perturbs the trainable parameters of a store. `f`
/// binds parameters through [`Tape::param`]. Frozen parameters are skipped.
pub fn check_store<F>(store: &ParamStore<f64>, step: f64, coverage: Coverage, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let analytic: std::collections::HashMap<ParamId, &Tensor<f64>> = grads.params().into_iter().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(match coverage {
        Coverage::All => 0,
        Coverage::Sampled { seed, .. } => seed,
    });
    let mut probe = store.clone();
    let mut acc = Accum::default();
    for id in store.ids() {
        let p = store.get(id);
        if p.frozen {
            continue;
        }
        let n = p.numel();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sampled { fraction, .. } => {
                let count = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
                let mut c = sample(&mut rng, n, count).into_vec();
                c.sort_unstable();
                c
            }
        };
        for j in coords {
            let base = p.value.data()[j];
            probe.get_mut(id).value.data_mut()[j] = base + step;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[j] = base - step;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[j]);
            acc.push(a, numeric, (id.0, j));
        }
    }
    Ok(acc.finish())
}

#[derive(Default)]
struct Accum {
    diff_sq: f64,
    an_sq: f64,
    num_sq: f64,
    max_abs_diff: f64,
    worst: (usize, usize),
    checked: usize,
}

impl Accum {
    fn push(&mut self, analytic: f64, numeric: f64, at: (usize, usize)) {
        let d = (analytic - numeric).abs();
        if d > self.max_abs_diff {
            self.max_abs_diff = d;
            self.worst = at;
        }
        self.diff_sq += d * d;
        self.an_sq += analytic * analytic;
        self.num_sq += numeric * numeric;
        self.checked += 1;
    }

    fn finish(self) -> GradCheck {
        let scale = self.an_sq.sqrt().max(self.num_sq.sqrt());
        GradCheck {
            rel_err: if scale == 0.0 {
                0.0
            } else {
                self.diff_sq.sqrt() / scale
            },
            max_abs_diff: self.max_abs_diff,
            checked: self.checked,
            worst: self.worst,
        }
    }
}
