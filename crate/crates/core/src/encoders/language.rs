//! Frozen language-encoder stand-in: a causal transformer that maps a token
//! sequence to a unit-norm classifier weight vector.
//!
//! Pooling follows text encoders of contrastive vision-language models:
//! positional embeddings, causal blocks, final layer norm, the hidden state
//! at the last position, a linear projection, then L2 normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{BlockParams, BlockRun, BlockVars, BLOCK_TENSOR_NAMES, LN_EPS};
use crate::dataio::TensorArchive;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub context_length: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 4,
            heads: 1,
            context_length: 77,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl LanguageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.blocks == 0 || self.context_length == 0 {
            return Err(Error::Config(format!(
                "degenerate language encoder config {self:?}"
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        Ok(())
    }
}

/// Parameters of the frozen encoder. Nothing here is ever bound as trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageEncoder<T> {
    pub config: LanguageConfig,
    pub positional: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    pub projection: Tensor<T>,
}

impl<T: Scalar> LanguageEncoder<T> {
    /// Deterministic synthesis from `config.seed`: all matrices and positional
    /// embeddings `normal(0, init_std)`.
    pub fn synthesize(config: LanguageConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.width;
        let positional = Tensor::randn([config.context_length, d], config.init_std, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams::init(d, config.init_std, &mut rng))
            .collect();
        let projection = Tensor::randn([d, d], config.init_std, &mut rng);
        Ok(Self {
            config,
            positional,
            blocks,
            final_gain: Tensor::full([d], T::one()),
            final_bias: Tensor::zeros([d]),
            projection,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn context_length(&self) -> usize {
        self.config.context_length
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("lang.positional".to_string(), &self.positional)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in BLOCK_TENSOR_NAMES.iter().zip(b.tensors()) {
                out.push((format!("lang.block{i}.{suffix}"), t));
            }
        }
        out.push(("lang.ln_final.gain".into(), &self.final_gain));
        out.push(("lang.ln_final.bias".into(), &self.final_bias));
        out.push(("lang.projection".into(), &self.projection));
        out
    }

    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        for (name, t) in self.named_tensors() {
            archive.insert_cast(name, t)?;
        }
        Ok(())
    }

    /// Loads exported weights; block count and context length are inferred
    /// from the archive, `heads` must be supplied.
    pub fn read_from(archive: &TensorArchive, heads: usize) -> Result<Self> {
        let positional = archive.require("lang.positional")?;
        if positional.dims().len() != 2 {
            return Err(Error::Validation("lang.positional must be a matrix".into()));
        }
        let (context_length, width) = (positional.dims()[0], positional.dims()[1]);
        let mut blocks = Vec::new();
        let expected = BlockParams::<T>::expected_dims(width);
        while archive
            .get(&format!("lang.block{}.ln1.gain", blocks.len()))
            .is_some()
        {
            let i = blocks.len();
            let mut tensors = Vec::with_capacity(12);
            for (suffix, dims) in BLOCK_TENSOR_NAMES.iter().zip(&expected) {
                let name = format!("lang.block{i}.{suffix}");
                let t = archive.require(&name)?;
                if t.dims() != dims.as_slice() {
                    return Err(Error::Validation(format!(
                        "{name} has dims {:?}, expected {dims:?}",
                        t.dims()
                    )));
                }
                tensors.push(t.cast());
            }
            blocks.push(BlockParams::from_tensors(tensors));
        }
        let config = LanguageConfig {
            width,
            blocks: blocks.len(),
            heads,
            context_length,
            init_std: 0.0,
            seed: 0,
        };
        config.validate()?;
        let vector = |name: &str| -> Result<Tensor<T>> {
            let t = archive.require(name)?;
            if t.dims() != [width] {
                return Err(Error::Validation(format!(
                    "{name} must have dims [{width}]"
                )));
            }
            Ok(t.cast())
        };
        let projection = archive.require("lang.projection")?;
        if projection.dims() != [width, width] {
            return Err(Error::Validation(format!(
                "lang.projection must be [{width}, {width}]"
            )));
        }
        Ok(Self {
            config,
            positional: positional.cast(),
            final_gain: vector("lang.ln_final.gain")?,
            final_bias: vector("lang.ln_final.bias")?,
            projection: projection.cast(),
            blocks,
        })
    }

    pub fn cast<U: Scalar>(&self) -> LanguageEncoder<U> {
        LanguageEncoder {
            config: self.config.clone(),
            positional: self.positional.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams::from_tensors(b.tensors().iter().map(|t| t.cast()).collect()))
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
            projection: self.projection.cast(),
        }
    }

    /// Binds every tensor as a constant.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<LanguageVars> {
        Ok(LanguageVars {
            config: self.config.clone(),
            positional: g.constant(self.positional.clone())?,
            blocks: self
                .blocks
                .iter()
                .map(|b| b.bind(g, false))
                .collect::<Result<Vec<_>>>()?,
            final_gain: g.constant(self.final_gain.clone())?,
            final_bias: g.constant(self.final_bias.clone())?,
            projection: g.constant(self.projection.clone())?,
        })
    }

    /// Unit-norm `[d]` embedding of an `[L x d]` token sequence.
    pub fn encode_sequence(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let x = g.constant(tokens.clone())?;
        let out = vars.encode(&mut g, x)?;
        g.value(out).clone().reshape([self.width()])
    }

    /// `[L x d]` hidden states after the final layer norm, before pooling.
    pub fn hidden_states(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let x = g.constant(tokens.clone())?;
        let h = vars.hidden(&mut g, x)?;
        Ok(g.value(h).clone())
    }
}

#[derive(Clone, Debug)]
pub struct LanguageVars {
    pub config: LanguageConfig,
    pub positional: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub projection: Var,
}

impl LanguageVars {
    fn hidden<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let dims = g.dims(tokens).to_vec();
        if dims.len() != 2 || dims[0] == 0 {
            return Err(Error::EmptyReference(format!(
                "encode_sequence needs at least one token, got dims {dims:?}"
            )));
        }
        let (len, width) = (dims[0], dims[1]);
        if width != self.config.width {
            return Err(Error::dim(
                "encode_sequence",
                format!("token width {width} vs encoder width {}", self.config.width),
            ));
        }
        if len > self.config.context_length {
            return Err(Error::Validation(format!(
                "sequence of {len} tokens exceeds context length {}",
                self.config.context_length
            )));
        }
        let pos = g.slice_rows(self.positional, 0, len)?;
        let mut x = g.add(tokens, pos)?;
        let run = BlockRun {
            heads: self.config.heads,
            causal: true,
            attn_path_dropout: 0.0,
            channel_dropout: 0.0,
            set_from: None,
        };
        for block in &self.blocks {
            x = block.forward::<T, ChaCha8Rng>(g, x, run, None)?;
        }
        g.layer_norm(x, self.final_gain, self.final_bias, LN_EPS)
    }

    /// `[1 x d]` unit-norm embedding of `tokens[L x d]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let h = self.hidden(g, tokens)?;
        let len = g.dims(h)[0];
        let last = g.slice_rows(h, len - 1, 1)?;
        let projected = g.matmul(last, self.projection)?;
        g.l2_normalize(projected)
    }
}
