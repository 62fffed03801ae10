//! Channel-adaptive experts: index-conditioned top-K channel routing followed
//! by a small per-group expert network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::layers::Mlp;
use crate::tensor::{Indices, ParamStore, Scalar, Tape, Var};

/// Routing result for one group over all tokens.
#[derive(Debug, Clone)]
pub struct GateDecision {
    /// `[tokens, K]` selected latent channels, descending gate probability.
    pub indices: Indices,
    /// `[tokens, K]` softmax probabilities at the selected channels.
    pub weights: Var,
    /// `[tokens, C]` full softmax output.
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct ChannelAdaptiveExpert {
    pub group: String,
    pub k: usize,
    /// Routing-logit network `C -> C -> C`.
    pub gate: Mlp,
    /// Expert network `K -> 2K -> K`.
    pub expert: Mlp,
}

impl ChannelAdaptiveExpert {
    pub fn new(prefix: &str, group: &str, latent: usize, k: usize) -> Result<Self> {
        if k == 0 || k > latent {
            return Err(Error::TopKRange { k, channels: latent });
        }
        let base = format!("{prefix}.cae.{group}");
        Ok(ChannelAdaptiveExpert {
            group: group.to_string(),
            k,
            gate: Mlp::new(format!("{base}.gate"), latent, latent, latent),
            expert: Mlp::new(format!("{base}.expert"), k, 2 * k, k),
        })
    }

    /// Parameter-name prefix shared by every tensor of this expert.
    pub fn prefix(&self) -> &str {
        self.gate
            .prefix
            .strip_suffix(".gate")
            .expect("gate prefix ends with .gate")
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.gate.init(store, rng, false);
        self.expert.init(store, rng, false);
    }

    /// `topk(softmax(gate(x ⊙ i_g)), K)`.
    pub fn gate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        index: Var,
    ) -> Result<GateDecision> {
        let fused = tape.mul(x, index)?;
        let logits = self.gate.forward(tape, store, fused)?;
        let probs = tape.softmax(logits)?;
        let (indices, weights) = tape.topk(probs, self.k)?;
        Ok(GateDecision {
            indices,
            weights,
            probs,
        })
    }

    /// Gate, select the routed channels of `x`, weight them, and run the
    /// expert. Returns `[tokens, K]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        index: Var,
    ) -> Result<(Var, GateDecision)> {
        let decision = self.gate(tape, store, x, index)?;
        let out = self.apply(tape, store, x, &decision)?;
        Ok((out, decision))
    }

    /// Expert path for a given routing decision.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        decision: &GateDecision,
    ) -> Result<Var> {
        let selected = tape.gather(x, &decision.indices)?;
        let weighted = tape.mul(decision.weights, selected)?;
        self.expert.forward(tape, store, weighted)
    }
}
