//! Pre-norm transformer block whose feed-forward branch is the variable-
//! adaptive mixture of experts:
//!
//! ```text
//! x_mid = x_in  + SA(LN1(x_in))
//! x_out = x_mid + shared(LN2(x_mid)) + up(Σ_g CAE_g(LN2(x_mid), I_g))
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::cae::{ChannelAdaptiveExpert, GateDecision};
use crate::model::layers::{linear, trunc_normal, Mlp, INIT_STD};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct VaMoeBlock {
    pub prefix: String,
    pub latent: usize,
    pub heads: usize,
    pub k: usize,
    pub experts: Vec<ChannelAdaptiveExpert>,
    pub shared: Mlp,
}

/// Per-group routing decisions from one block evaluation.
pub type BlockRouting = Vec<(String, GateDecision)>;

impl VaMoeBlock {
    pub fn new(index: usize, latent: usize, heads: usize, k: usize) -> Result<Self> {
        if heads == 0 || !latent.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "latent width {latent} not divisible into {heads} heads"
            )));
        }
        if k == 0 || k > latent {
            return Err(Error::TopKRange { k, channels: latent });
        }
        let prefix = format!("blocks.{index}");
        Ok(VaMoeBlock {
            shared: Mlp::new(format!("{prefix}.moe.shared"), latent, 2 * latent, latent),
            prefix,
            latent,
            heads,
            k,
            experts: Vec::new(),
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Register the dense (non-expert) parameters. Output projections of both
    /// residual branches start at zero so the block starts as the identity.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = self.latent;
        for norm in ["norm1", "norm2"] {
            store.insert(self.name(&format!("{norm}.gain")), Tensor::ones([c]));
            store.insert(self.name(&format!("{norm}.bias")), Tensor::zeros([c]));
        }
        store.insert(
            self.name("attn.qkv.weight"),
            trunc_normal(rng, &[c, 3 * c], INIT_STD),
        );
        store.insert(self.name("attn.qkv.bias"), Tensor::zeros([3 * c]));
        store.insert(self.name("attn.out.weight"), Tensor::zeros([c, c]));
        store.insert(self.name("attn.out.bias"), Tensor::zeros([c]));
        self.shared.init(store, rng, true);
        store.insert(self.name("moe.up.weight"), Tensor::zeros([self.k, c]));
        store.insert(self.name("moe.up.bias"), Tensor::zeros([c]));
    }

    /// Add (and initialize) an expert for `group`.
    pub fn add_expert<T: Scalar, R: Rng>(
        &mut self,
        group: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        if self.experts.iter().any(|e| e.group == group) {
            return Err(Error::DuplicateGroup(group.to_string()));
        }
        let cae = ChannelAdaptiveExpert::new(&format!("{}.moe", self.prefix), group, self.latent, self.k)?;
        cae.init(store, rng);
        self.experts.push(cae);
        Ok(())
    }

    /// Multi-head scaled dot-product self-attention over all tokens.
    pub fn attention<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (tokens, c) = (tape.shape(x)[0], self.latent);
        let (h, d) = (self.heads, self.latent / self.heads);
        let qkv = linear(tape, store, &self.name("attn.qkv"), x)?;
        let split = |tape: &mut Tape<T>, part: usize, axes: &[usize]| -> Result<Var> {
            let s = tape.narrow(qkv, 1, part * c, c)?;
            let s = tape.reshape(s, &[tokens, h, d])?;
            tape.permute(s, axes)
        };
        let q = split(tape, 0, &[1, 0, 2])?;
        let kt = split(tape, 1, &[1, 2, 0])?;
        let v = split(tape, 2, &[1, 0, 2])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.mul_scalar(scores, T::one() / T::of(d as f64).sqrt())?;
        let att = tape.softmax(scores)?;
        let o = tape.bmm(att, v)?;
        let o = tape.permute(o, &[1, 0, 2])?;
        let o = tape.reshape(o, &[tokens, c])?;
        linear(tape, store, &self.name("attn.out"), o)
    }

    /// `shared(x) + up(Σ_g CAE_g(x, I_g))`; `indices` pairs each expert's
    /// group with its latent index vector, in expert order.
    pub fn vamoe<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        indices: &[Var],
    ) -> Result<(Var, BlockRouting)> {
        if indices.len() != self.experts.len() {
            return Err(Error::Phase(format!(
                "{} index vectors for {} experts",
                indices.len(),
                self.experts.len()
            )));
        }
        let mut fused: Option<Var> = None;
        let mut routing = Vec::with_capacity(self.experts.len());
        for (cae, &ig) in self.experts.iter().zip(indices) {
            let (out, decision) = cae.forward(tape, store, x, ig)?;
            fused = Some(match fused {
                None => out,
                Some(acc) => tape.add(acc, out)?,
            });
            routing.push((cae.group.clone(), decision));
        }
        let shared = self.shared.forward(tape, store, x)?;
        let out = match fused {
            Some(f) => {
                let up = linear(tape, store, &self.name("moe.up"), f)?;
                tape.add(shared, up)?
            }
            None => shared,
        };
        Ok((out, routing))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        indices: &[Var],
    ) -> Result<(Var, BlockRouting)> {
        let ln = |tape: &mut Tape<T>, which: &str, v: Var| -> Result<Var> {
            let g = tape.param_named(store, &self.name(&format!("{which}.gain")))?;
            let b = tape.param_named(store, &self.name(&format!("{which}.bias")))?;
            tape.layer_norm(v, g, b)
        };
        let h = ln(tape, "norm1", x)?;
        let a = self.attention(tape, store, h)?;
        let mid = tape.add(x, a)?;
        let h2 = ln(tape, "norm2", mid)?;
        let (m, routing) = self.vamoe(tape, store, h2, indices)?;
        Ok((tape.add(mid, m)?, routing))
    }
}
