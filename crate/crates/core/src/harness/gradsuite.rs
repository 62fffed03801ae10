//! Finite-difference gradient checks of every differentiable operation, the
//! losses, one expert, one block, and the end-to-end model.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::harness::config::{GradcheckConfig, RunConfig};
use crate::harness::run::{create_run_dir, write_text};
use crate::incremental::{expand, IndexInit};
use crate::losses::{dynamic_prediction_loss, mse, reconstruction_loss, total_loss, LAMBDA};
use crate::model::{ChannelAdaptiveExpert, Model, ModelConfig, VaMoeBlock, VariableCatalog};
use crate::tensor::gradcheck::{check, check_store, Coverage, GradCheck};
use crate::tensor::{Indices, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub op: String,
    pub rel_err: f64,
    pub max_abs_diff: f64,
    pub checked: usize,
    pub tolerance: f64,
    /// Worst coordinate, human readable.
    pub point: String,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradcheckEntry::passed)
    }

    pub fn entry(&self, op: &str) -> Option<&GradcheckEntry> {
        self.entries.iter().find(|e| e.op == op)
    }

    /// The first failing entry as an error.
    pub fn ensure_passed(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.passed()) {
            None => Ok(()),
            Some(e) => Err(Error::GradCheck {
                op: e.op.clone(),
                rel_err: e.rel_err,
                point: e.point.clone(),
            }),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<31} {:>11} {:>11} {:>8} {:>9}  {}\n",
            "op", "rel_err", "max_abs", "checked", "tol", "status"
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{:<31} {:>11.3e} {:>11.3e} {:>8} {:>9.0e}  {}\n",
                e.op,
                e.rel_err,
                e.max_abs_diff,
                e.checked,
                e.tolerance,
                if e.passed() { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!("suite seconds: {:.2}\n", self.seconds));
        s
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, offset: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        offset + scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| 0.5 + rng.random::<f64>())
}

/// Random projection of `y` to a scalar, so no gradient is trivially
/// symmetric.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let n = tape.value(y).numel();
    let r = Tensor::new(tape.shape(y).to_vec(), weights.data()[..n].to_vec())?;
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Perturb every parameter so that zero-initialised projections carry
/// gradient too.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        let noise = normal(rng, p.value.shape(), scale, 0.0);
        let v = p.value.zip_map(&noise, |a, b| a + b).expect("same shape");
        p.set_value(v);
    }
}

struct Suite {
    step: f64,
    tol: f64,
    rng: ChaCha8Rng,
    weights: Tensor<f64>,
    entries: Vec<GradcheckEntry>,
}

impl Suite {
    fn push(&mut self, op: &str, tolerance: f64, g: GradCheck, point: String) {
        self.entries.push(GradcheckEntry {
            op: op.to_string(),
            rel_err: g.rel_err,
            max_abs_diff: g.max_abs_diff,
            checked: g.checked,
            tolerance,
            point,
        });
    }

    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let w = self.weights.clone();
        let g = check(&inputs, self.step, Coverage::All, |tape, v| {
            let y = f(tape, v)?;
            if tape.value(y).numel() == 1 {
                Ok(y)
            } else {
                project(tape, y, &w)
            }
        })?;
        let point = format!("input {} coordinate {}", g.worst.0, g.worst.1);
        self.push(name, self.tol, g, point);
        Ok(())
    }

    fn store<F>(
        &mut self,
        name: &str,
        store: &ParamStore<f64>,
        coverage: Coverage,
        tol: f64,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let g = check_store(store, self.step, coverage, f)?;
        let point = format!(
            "parameter `{}` coordinate {}",
            store.get(ParamId(g.worst.0)).name,
            g.worst.1
        );
        self.push(name, tol, g, point);
        Ok(())
    }

    fn n(&mut self, shape: &[usize]) -> Tensor<f64> {
        normal(&mut self.rng, shape, 1.0, 0.0)
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        height: 4,
        width: 8,
        latent: 8,
        heads: 2,
        blocks: 1,
        k: 3,
        patch: 2,
        kernel: 3,
    }
}

fn elementwise(s: &mut Suite) -> Result<()> {
    let (a, b) = (s.n(&[3, 4, 5]), s.n(&[5]));
    s.op("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
    s.op("sub", vec![a.clone(), b], |t, v| t.sub(v[0], v[1]))?;
    let b2 = s.n(&[4, 5]);
    s.op("mul", vec![a.clone(), b2], |t, v| t.mul(v[0], v[1]))?;
    let d = positive(&mut s.rng, &[1, 5]);
    s.op("div", vec![a.clone(), d], |t, v| t.div(v[0], v[1]))?;
    s.op("exp", vec![a.clone()], |t, v| t.exp(v[0]))?;
    let p = positive(&mut s.rng, &[3, 4]);
    s.op("log", vec![p], |t, v| t.log(v[0]))?;
    s.op("square", vec![a.clone()], |t, v| t.square(v[0]))?;
    s.op("neg", vec![a.clone()], |t, v| t.neg(v[0]))?;
    s.op("gelu", vec![a.clone()], |t, v| t.gelu(v[0]))?;
    s.op("add_scalar", vec![a.clone()], |t, v| t.add_scalar(v[0], 0.7))?;
    s.op("mul_scalar", vec![a.clone()], |t, v| t.mul_scalar(v[0], -1.3))?;
    s.op("sum", vec![a.clone()], |t, v| t.sum(v[0]))?;
    s.op("mean", vec![a], |t, v| t.mean(v[0]))
}

fn linear_algebra(s: &mut Suite) -> Result<()> {
    let (a, b) = (s.n(&[2, 3, 4]), s.n(&[4, 5]));
    s.op("matmul", vec![a, b], |t, v| t.matmul(v[0], v[1]))?;
    let (a, b) = (s.n(&[2, 3, 4]), s.n(&[2, 4, 2]));
    s.op("bmm", vec![a, b], |t, v| t.bmm(v[0], v[1]))?;
    let (x, w, bias) = (s.n(&[3, 4]), s.n(&[4, 5]), s.n(&[5]));
    s.op("linear", vec![x, w, bias], |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })
}

fn layout(s: &mut Suite) -> Result<()> {
    let a = s.n(&[2, 3, 4]);
    s.op("permute", vec![a.clone()], |t, v| t.permute(v[0], &[2, 0, 1]))?;
    s.op("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[6, 4]))?;
    s.op("narrow", vec![a], |t, v| t.narrow(v[0], 1, 1, 2))?;
    let (p, q) = (s.n(&[2, 3]), s.n(&[2, 2]));
    s.op("concat", vec![p, q], |t, v| t.concat(&[v[0], v[1]], 1))
}

fn normalization(s: &mut Suite) -> Result<()> {
    let x = s.n(&[4, 6]);
    s.op("softmax", vec![x.clone()], |t, v| t.softmax(v[0]))?;
    let (g, b) = (normal(&mut s.rng, &[6], 0.2, 1.0), s.n(&[6]));
    s.op("layer_norm", vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]))
}

fn routing(s: &mut Suite) -> Result<()> {
    let x = s.n(&[4, 6]);
    let idx = Indices {
        shape: vec![4, 3],
        data: vec![0, 5, 2, 1, 1, 3, 4, 0, 5, 2, 3, 4],
    };
    s.op("gather", vec![x.clone()], move |t, v| t.gather(v[0], &idx))?;
    s.op("topk", vec![x], |t, v| {
        let p = t.softmax(v[0])?;
        Ok(t.topk(p, 3)?.1)
    })
}

fn convolution(s: &mut Suite) -> Result<()> {
    let (x, k) = (s.n(&[6, 6, 3]), normal(&mut s.rng, &[3, 3, 3, 4], 0.5, 0.0));
    s.op("conv2d", vec![x, k], |t, v| t.conv2d(v[0], v[1], 2))?;
    let (x, k) = (s.n(&[3, 3, 4]), normal(&mut s.rng, &[3, 3, 4, 3], 0.5, 0.0));
    s.op("conv_transpose2d", vec![x, k], |t, v| {
        t.conv_transpose2d(v[0], v[1], 2)
    })
}

fn losses(s: &mut Suite) -> Result<()> {
    let (pred, target, w) = (
        s.n(&[4, 4, 3]),
        s.n(&[4, 4, 3]),
        normal(&mut s.rng, &[1, 1, 3], 0.5, 0.0),
    );
    s.op("dynamic_prediction_loss", vec![pred.clone(), w.clone()], {
        let target = target.clone();
        move |t, v| {
            let y = t.constant(target.clone());
            dynamic_prediction_loss(t, v[0], y, v[1], None)
        }
    })?;
    s.op("dynamic_prediction_loss_masked", vec![pred.clone(), w], {
        let target = target.clone();
        move |t, v| {
            let y = t.constant(target.clone());
            let m = t.constant(Tensor::from_f64([1, 1, 3], &[1.0, 0.0, 1.0])?);
            dynamic_prediction_loss(t, v[0], y, v[1], Some(m))
        }
    })?;
    s.op("mse", vec![pred, target], |t, v| mse(t, v[0], v[1]))
}

fn expert_and_block(s: &mut Suite) -> Result<()> {
    let (c, k, tokens) = (8, 3, 6);
    let cae = ChannelAdaptiveExpert::new("moe", "z", c, k)?;
    let mut store = ParamStore::new();
    cae.init(&mut store, &mut s.rng);
    randomize(&mut store, &mut s.rng, 0.3);
    let x = s.n(&[tokens, c]);
    let index = s.n(&[1, c]);
    let w = s.weights.clone();
    {
        let (store, index) = (&store, index.clone());
        s.op("cae_input", vec![x.clone()], move |t, v| {
            let i = t.constant(index.clone());
            Ok(cae.forward(t, store, v[0], i)?.0)
        })?;
    }
    let cae = ChannelAdaptiveExpert::new("moe", "z", c, k)?;
    let tol = s.tol;
    s.store("cae_params", &store, Coverage::All, tol, |t, st| {
        let xv = t.constant(x.clone());
        let i = t.constant(index.clone());
        let y = cae.forward(t, st, xv, i)?.0;
        project(t, y, &w)
    })?;

    let mut block = VaMoeBlock::new(0, c, 2, k)?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut s.rng);
    for g in ["z", "t"] {
        block.add_expert(g, &mut store, &mut s.rng)?;
    }
    randomize(&mut store, &mut s.rng, 0.3);
    let indices = [s.n(&[1, c]), s.n(&[1, c])];
    let x = s.n(&[tokens, c]);
    let bind = |t: &mut Tape<f64>| -> Vec<Var> { indices.iter().map(|i| t.constant(i.clone())).collect() };
    {
        let store = &store;
        let block = &block;
        s.op("block_input", vec![x.clone()], move |t, v| {
            let idx = bind(t);
            Ok(block.forward(t, store, v[0], &idx)?.0)
        })?;
    }
    s.store("block_params", &store, Coverage::All, tol, |t, st| {
        let xv = t.constant(x.clone());
        let idx = bind(t);
        let y = block.forward(t, st, xv, &idx)?.0;
        project(t, y, &w)
    })
}

fn model_losses(s: &mut Suite, seed: u64) -> Result<()> {
    let cfg = tiny_config();
    let mut model: Model<f64> = Model::new(cfg.clone(), VariableCatalog::upper_air(1), seed)?;
    randomize(&mut model.params, &mut s.rng, 0.2);
    let n = model.channels();
    let x = s.n(&[cfg.height, cfg.width, n]);
    let y = s.n(&[cfg.height, cfg.width, n]);
    let tol = s.tol;
    let run = |model: &Model<f64>, st: &ParamStore<f64>, t: &mut Tape<f64>, full: bool| -> Result<Var> {
        let m = Model {
            params: st.clone(),
            ..model.clone()
        };
        let xv = t.constant(x.clone());
        if full {
            let yv = t.constant(y.clone());
            Ok(total_loss(t, &m, xv, yv, LAMBDA, None)?.total)
        } else {
            reconstruction_loss(t, &m, xv)
        }
    };
    s.store(
        "reconstruction_loss",
        &model.params,
        Coverage::All,
        tol,
        |t, st| run(&model, st, t, false),
    )?;
    s.store("total_loss", &model.params, Coverage::All, tol, |t, st| {
        run(&model, st, t, true)
    })?;

    let mut inc = model.clone();
    expand(
        &mut inc,
        &VariableCatalog::surface_groups(),
        IndexInit::Reinit,
        seed,
    )?;
    randomize(&mut inc.params, &mut s.rng, 0.2);
    let n = inc.channels();
    let x = s.n(&[cfg.height, cfg.width, n]);
    let y = s.n(&[cfg.height, cfg.width, n]);
    s.store(
        "total_loss_incremental",
        &inc.params,
        Coverage::All,
        tol,
        |t, st| {
            let m = Model {
                params: st.clone(),
                ..inc.clone()
            };
            let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
            Ok(total_loss(t, &m, xv, yv, LAMBDA, None)?.total)
        },
    )
}

fn end_to_end(s: &mut Suite, cfg: &GradcheckConfig, seed: u64) -> Result<()> {
    let mut model: Model<f64> = Model::new(cfg.model.clone(), VariableCatalog::upper_air(1), seed)?;
    randomize(&mut model.params, &mut s.rng, 0.1);
    let x = s.n(&[cfg.model.height, cfg.model.width, model.channels()]);
    let coverage = Coverage::Sampled {
        fraction: cfg.end_to_end_fraction,
        seed,
    };
    s.store(
        "model_end_to_end",
        &model.params,
        coverage,
        cfg.end_to_end_tolerance,
        |t, st| {
            let m = Model {
                params: st.clone(),
                ..model.clone()
            };
            let xv = t.constant(x.clone());
            let out = m.forward(t, xv)?;
            let sq = t.square(out)?;
            t.mean(sq)
        },
    )
}

/// Run every check at 64-bit.
pub fn run_suite(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = normal(&mut rng, &[4096], 1.0, 0.0);
    let mut s = Suite {
        step: cfg.step,
        tol: cfg.tolerance,
        rng,
        weights,
        entries: Vec::new(),
    };
    elementwise(&mut s)?;
    linear_algebra(&mut s)?;
    layout(&mut s)?;
    normalization(&mut s)?;
    routing(&mut s)?;
    convolution(&mut s)?;
    losses(&mut s)?;
    expert_and_block(&mut s)?;
    model_losses(&mut s, seed)?;
    end_to_end(&mut s, cfg, seed)?;
    Ok(GradcheckReport {
        entries: s.entries,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// `gradcheck`: writes `gradcheck.txt`; any failing operation is an error
/// naming the operation and its worst coordinate.
pub fn gradcheck(config: &RunConfig, out: &Path) -> Result<(PathBuf, GradcheckReport)> {
    let dir = create_run_dir(out, "gradcheck", config)?;
    let report = run_suite(&config.gradcheck, config.seed)?;
    write_text(&dir.join("gradcheck.txt"), &report.to_table())?;
    report.ensure_passed()?;
    Ok((dir, report))
}
