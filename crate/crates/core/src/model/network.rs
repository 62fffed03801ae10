use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::block::{BlockRouting, VaMoeBlock};
use crate::model::catalog::VariableCatalog;
use crate::model::index::{IndexEmbedding, PROJECTOR};
use crate::model::layers::{trunc_normal, INIT_STD};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub const ENCODER_KERNEL: &str = "encoder.kernel";
pub const ENCODER_KERNEL_INC: &str = "encoder.kernel_inc";
pub const ENCODER_BIAS: &str = "encoder.bias";
pub const POS_EMBED: &str = "pos_embed";
pub const DECODER_KERNEL: &str = "decoder.kernel";
pub const DECODER_KERNEL_INC: &str = "decoder.kernel_inc";
pub const DECODER_BIAS: &str = "decoder.bias";
pub const DECODER_BIAS_INC: &str = "decoder.bias_inc";
pub const LOSS_W: &str = "loss.w";
pub const LOSS_W_INC: &str = "loss.w_inc";

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Latent width `C`.
    pub latent: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Channels routed per expert.
    pub k: usize,
    /// Encoder stride (patch size).
    pub patch: usize,
    /// Spatial extent of the encoder/decoder kernels.
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 16,
            width: 32,
            latent: 64,
            heads: 4,
            blocks: 2,
            k: 16,
            patch: 2,
            kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return bad(format!(
                "grid {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.heads == 0 || !self.latent.is_multiple_of(self.heads) {
            return bad(format!(
                "latent {} not divisible by heads {}",
                self.latent, self.heads
            ));
        }
        if self.k == 0 || self.k > self.latent {
            return bad(format!("k = {} outside 1..={}", self.k, self.latent));
        }
        if self.blocks == 0 {
            return bad("at least one block required".into());
        }
        Ok(())
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Incremental,
}

/// Outputs of one full forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[H, W, channels]` one-step prediction.
    pub pred: Var,
    /// `[H, W, channels]` decoder applied directly to the encoding.
    pub recon: Var,
    pub routing: Vec<BlockRouting>,
}

/// Encoder, transformer blocks, and decoder, with all parameters in one
/// store.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub catalog: VariableCatalog,
    pub index: IndexEmbedding,
    pub blocks: Vec<VaMoeBlock>,
    pub params: ParamStore<T>,
    pub phase: Phase,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with one expert per catalog group.
    pub fn new(config: ModelConfig, catalog: VariableCatalog, seed: u64) -> Result<Self> {
        config.validate()?;
        if catalog.is_empty() {
            return Err(Error::Config("empty catalog".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (c, kk, n) = (config.latent, config.kernel, catalog.channels());
        params.insert(ENCODER_KERNEL, trunc_normal(&mut rng, &[kk, kk, n, c], INIT_STD));
        params.insert(ENCODER_BIAS, Tensor::zeros([c]));
        params.insert(POS_EMBED, trunc_normal(&mut rng, &[config.tokens(), c], INIT_STD));
        params.insert(PROJECTOR, trunc_normal(&mut rng, &[n, c], INIT_STD));
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut block = VaMoeBlock::new(b, c, config.heads, config.k)?;
            block.init(&mut params, &mut rng);
            for g in catalog.groups() {
                block.add_expert(&g.name, &mut params, &mut rng)?;
            }
            blocks.push(block);
        }
        params.insert(DECODER_KERNEL, trunc_normal(&mut rng, &[kk, kk, c, n], INIT_STD));
        params.insert(DECODER_BIAS, Tensor::zeros([n]));
        params.insert(LOSS_W, Tensor::zeros([1, 1, n]));
        Ok(Model {
            index: IndexEmbedding::from_catalog(&catalog),
            config,
            catalog,
            blocks,
            params,
            phase: Phase::Initial,
        })
    }

    pub fn channels(&self) -> usize {
        self.catalog.channels()
    }

    pub fn is_expanded(&self) -> bool {
        self.params.id(ENCODER_KERNEL_INC).is_some()
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            catalog: self.catalog.clone(),
            index: self.index.clone(),
            blocks: self.blocks.clone(),
            params: self.params.cast(),
            phase: self.phase,
        }
    }

    fn segments(&self, base: &str, inc: &str) -> Vec<String> {
        let mut v = vec![base.to_string()];
        if self.params.id(inc).is_some() {
            v.push(inc.to_string());
        }
        v
    }

    fn bind_concat(&self, tape: &mut Tape<T>, names: &[String], axis: usize) -> Result<Var> {
        let vars = names
            .iter()
            .map(|n| tape.param_named(&self.params, n))
            .collect::<Result<Vec<_>>>()?;
        if vars.len() == 1 {
            Ok(vars[0])
        } else {
            tape.concat(&vars, axis)
        }
    }

    /// Effective encoder kernel `[k, k, channels, C]` (pretrained and added
    /// slices concatenated along the input axis).
    pub fn encoder_kernel(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.bind_concat(&mut tape, &self.segments(ENCODER_KERNEL, ENCODER_KERNEL_INC), 2)?;
        Ok(tape.value(v).clone())
    }

    /// Effective decoder kernel `[k, k, C, channels]`.
    pub fn decoder_kernel(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.bind_concat(&mut tape, &self.segments(DECODER_KERNEL, DECODER_KERNEL_INC), 3)?;
        Ok(tape.value(v).clone())
    }

    /// Checks that encoder, decoder, index embedding and expert sets agree
    /// with the catalog.
    pub fn validate(&self) -> Result<()> {
        let n = self.channels();
        let enc = self.encoder_kernel()?;
        if enc.shape()[2] != n {
            return Err(Error::CatalogMismatch {
                expected: n,
                actual: enc.shape()[2],
            });
        }
        let dec = self.decoder_kernel()?;
        if dec.shape()[3] != n {
            return Err(Error::CatalogMismatch {
                expected: n,
                actual: dec.shape()[3],
            });
        }
        let names: Vec<&str> = self.catalog.groups().iter().map(|g| g.name.as_str()).collect();
        let index: Vec<&str> = self.index.groups().iter().map(String::as_str).collect();
        if index != names {
            return Err(Error::Phase(format!(
                "index embedding groups {index:?} do not match catalog {names:?}"
            )));
        }
        for b in &self.blocks {
            let experts: Vec<&str> = b.experts.iter().map(|e| e.group.as_str()).collect();
            if experts != names {
                return Err(Error::Phase(format!(
                    "{} experts {experts:?} do not match catalog {names:?}",
                    b.prefix
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let n = self.channels();
        if shape.len() != 3 || shape[2] != n {
            return Err(Error::CatalogMismatch {
                expected: n,
                actual: shape.get(2).copied().unwrap_or(0),
            });
        }
        if shape[0] != self.config.height || shape[1] != self.config.width {
            return Err(Error::InvalidShape {
                op: "model_forward",
                detail: format!(
                    "grid {}x{} does not match configured {}x{}",
                    shape[0], shape[1], self.config.height, self.config.width
                ),
            });
        }
        Ok(())
    }

    /// Strided convolution plus position embedding: `[H, W, N] -> [T, C]`.
    pub fn encode(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let kernel = self.bind_concat(tape, &self.segments(ENCODER_KERNEL, ENCODER_KERNEL_INC), 2)?;
        let bias = tape.param_named(&self.params, ENCODER_BIAS)?;
        let pos = tape.param_named(&self.params, POS_EMBED)?;
        let z = tape.conv2d(x, kernel, self.config.patch)?;
        let z = tape.add(z, bias)?;
        let z = tape.reshape(z, &[self.config.tokens(), self.config.latent])?;
        tape.add(z, pos)
    }

    /// Transposed convolution: `[T, C] -> [H, W, N]`.
    pub fn decode(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let (th, tw) = self.config.token_grid();
        let z = tape.reshape(z, &[th, tw, self.config.latent])?;
        let kernel = self.bind_concat(tape, &self.segments(DECODER_KERNEL, DECODER_KERNEL_INC), 3)?;
        let bias = self.bind_concat(tape, &self.segments(DECODER_BIAS, DECODER_BIAS_INC), 0)?;
        let y = tape.conv_transpose2d(z, kernel, self.config.patch)?;
        tape.add(y, bias)
    }

    /// Latent index vector `[1, C]` for every catalog group, in catalog order.
    pub fn index_vectors(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        (0..self.index.groups().len())
            .map(|g| self.index.project(tape, &self.params, g))
            .collect()
    }

    /// Transformer trunk on encoded tokens.
    pub fn trunk(&self, tape: &mut Tape<T>, z: Var) -> Result<(Var, Vec<BlockRouting>)> {
        let indices = self.index_vectors(tape)?;
        let mut h = z;
        let mut routing = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, r) = block.forward(tape, &self.params, h, &indices)?;
            h = out;
            routing.push(r);
        }
        Ok((h, routing))
    }

    /// Prediction and reconstruction sharing one encoding.
    pub fn forward_full(&self, tape: &mut Tape<T>, x: Var) -> Result<ForwardOutput> {
        self.validate()?;
        let z = self.encode(tape, x)?;
        let recon = self.decode(tape, z)?;
        let (h, routing) = self.trunk(tape, z)?;
        let pred = self.decode(tape, h)?;
        Ok(ForwardOutput { pred, recon, routing })
    }

    /// One-step prediction `X^{t+1} = Φ(X^t)`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.validate()?;
        let z = self.encode(tape, x)?;
        let (h, _) = self.trunk(tape, z)?;
        self.decode(tape, h)
    }

    /// Untaped convenience for inference.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Learnable per-channel loss weights `[1, 1, channels]`.
    pub fn loss_weights(&self, tape: &mut Tape<T>) -> Result<Var> {
        self.bind_concat(tape, &self.segments(LOSS_W, LOSS_W_INC), 2)
    }
}
