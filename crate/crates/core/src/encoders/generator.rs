//! Visual token generator: learnable queries attend jointly with a class's
//! exemplar features and come out as language-space tokens ("vokens").

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{BlockParams, BlockRun, BlockVars, BLOCK_TENSOR_NAMES};
use super::Mode;
use crate::dataio::TensorArchive;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// The generator always stacks this many transformer blocks.
pub const GENERATOR_BLOCKS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub width: usize,
    /// Number of learnable queries, i.e. vokens per class.
    pub tokens: usize,
    pub heads: usize,
    pub attn_path_dropout: f64,
    pub channel_dropout: f64,
    pub init_std: f64,
    /// Total attention weight of the exemplar set, counted in keys. With M
    /// exemplars each exemplar key gets the logit offset `ln(mass / M)`, so
    /// only the distribution of exemplar rows matters, not their count.
    pub exemplar_mass: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 64,
            tokens: 2,
            heads: 1,
            attn_path_dropout: 0.1,
            channel_dropout: 0.1,
            init_std: 0.02,
            exemplar_mass: 16.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.tokens == 0 {
            return Err(Error::Config(format!(
                "generator needs width >= 1 and tokens >= 1, got {} and {}",
                self.width, self.tokens
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        if !(self.exemplar_mass > 0.0 && self.exemplar_mass.is_finite()) {
            return Err(Error::Config(format!(
                "exemplar_mass must be positive and finite, got {}",
                self.exemplar_mass
            )));
        }
        for (name, p) in [
            ("attn_path_dropout", self.attn_path_dropout),
            ("channel_dropout", self.channel_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} not in [0, 1)")));
            }
        }
        Ok(())
    }

    fn block_run(&self) -> BlockRun {
        BlockRun {
            heads: self.heads,
            causal: false,
            attn_path_dropout: self.attn_path_dropout,
            channel_dropout: self.channel_dropout,
            set_from: Some((self.tokens, self.exemplar_mass)),
        }
    }
}

/// The only trainable parameters of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T> {
    pub config: GeneratorConfig,
    pub queries: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
}

/// `[P x d]` visual tokens of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Voken<T>(pub Tensor<T>);

impl<T: Scalar> Voken<T> {
    pub fn tokens(&self) -> &Tensor<T> {
        &self.0
    }
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = Tensor::randn([config.tokens, config.width], config.init_std, &mut rng);
        let blocks = (0..GENERATOR_BLOCKS)
            .map(|_| BlockParams::init(config.width, config.init_std, &mut rng))
            .collect();
        Ok(Self {
            config,
            queries,
            blocks,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn tokens(&self) -> usize {
        self.config.tokens
    }

    /// All tensors in a fixed order, paired with their archive names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("vok.queries".to_string(), &self.queries)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in BLOCK_TENSOR_NAMES.iter().zip(b.tensors()) {
                out.push((format!("vok.block{i}.{suffix}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.queries];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorParams<U> {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.cast())
            .collect();
        GeneratorParams::from_ordered(self.config.clone(), tensors)
    }

    fn from_ordered(config: GeneratorConfig, mut tensors: Vec<Tensor<T>>) -> Self {
        let rest = tensors.split_off(1);
        let queries = tensors.pop().expect("queries");
        let blocks = rest
            .chunks(12)
            .map(|c| BlockParams::from_tensors(c.to_vec()))
            .collect();
        Self {
            config,
            queries,
            blocks,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<GeneratorVars> {
        let queries = if trainable {
            g.param(self.queries.clone())?
        } else {
            g.constant(self.queries.clone())?
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.bind(g, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratorVars {
            config: self.config.clone(),
            queries,
            blocks,
        })
    }

    /// Writes every tensor plus the head count (`vok.heads`) and exemplar
    /// mass (`vok.exemplar_mass`) into `archive`.
    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        for (name, t) in self.named_tensors() {
            archive.insert(name, t.cast())?;
        }
        archive.insert("vok.heads", Tensor::scalar(self.config.heads as f32))?;
        archive.insert(
            "vok.exemplar_mass",
            Tensor::scalar(self.config.exemplar_mass as f32),
        )?;
        Ok(())
    }

    /// Rebuilds parameters from an archive. Dropout rates are not stored and
    /// come from `dropout` (attention-path, channel).
    pub fn read_from(archive: &TensorArchive, dropout: (f64, f64)) -> Result<Self> {
        let queries = archive.require("vok.queries")?;
        if queries.dims().len() != 2 {
            return Err(Error::Validation(format!(
                "vok.queries must be a matrix, got {:?}",
                queries.dims()
            )));
        }
        let (tokens, width) = (queries.dims()[0], queries.dims()[1]);
        let heads = match archive.get("vok.heads") {
            Some(h) => h.item() as usize,
            None => 1,
        };
        let config = GeneratorConfig {
            width,
            tokens,
            heads,
            attn_path_dropout: dropout.0,
            channel_dropout: dropout.1,
            init_std: GeneratorConfig::default().init_std,
            exemplar_mass: archive
                .get("vok.exemplar_mass")
                .map_or(GeneratorConfig::default().exemplar_mass, |m| {
                    m.item() as f64
                }),
        };
        config.validate()?;
        let mut tensors = vec![queries.cast()];
        let expected = BlockParams::<T>::expected_dims(width);
        for i in 0..GENERATOR_BLOCKS {
            for (suffix, dims) in BLOCK_TENSOR_NAMES.iter().zip(&expected) {
                let name = format!("vok.block{i}.{suffix}");
                let t = archive.require(&name)?;
                if t.dims() != dims.as_slice() {
                    return Err(Error::Validation(format!(
                        "{name} has dims {:?}, expected {dims:?}",
                        t.dims()
                    )));
                }
                tensors.push(t.cast());
            }
        }
        Ok(Self::from_ordered(config, tensors))
    }

    /// Visual tokens for one class from its `[M x d]` exemplar features.
    pub fn generate_visual_tokens(
        &self,
        exemplars: &Tensor<T>,
        mode: Mode<'_>,
    ) -> Result<Voken<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let e = g.constant(exemplars.clone())?;
        let out = vars.visual_tokens(&mut g, e, mode)?;
        Ok(Voken(g.value(out).clone()))
    }
}

/// Graph handles of bound generator parameters.
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub config: GeneratorConfig,
    pub queries: Var,
    pub blocks: Vec<BlockVars>,
}

impl GeneratorVars {
    /// Reassembles handles listed in [`GeneratorVars::vars`] order.
    pub fn from_vars(config: GeneratorConfig, vars: &[Var]) -> Result<Self> {
        if vars.len() != 1 + 12 * GENERATOR_BLOCKS {
            return Err(Error::Config(format!(
                "expected {} generator handles, got {}",
                1 + 12 * GENERATOR_BLOCKS,
                vars.len()
            )));
        }
        let blocks = vars[1..]
            .chunks(12)
            .map(|c| BlockVars(c.try_into().expect("12 handles")))
            .collect();
        Ok(Self {
            config,
            queries: vars[0],
            blocks,
        })
    }

    /// Handles in the same order as [`GeneratorParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.queries];
        for b in &self.blocks {
            out.extend(b.0);
        }
        out
    }

    /// Runs `[q; exemplars]` through the blocks without positional encoding
    /// and returns the outputs at the query positions. Exemplar keys carry the
    /// `ln(exemplar_mass / M)` logit offset, so the exemplars act as an
    /// empirical distribution: reordering them or repeating every row equally
    /// leaves the output as is.
    pub fn visual_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        exemplars: Var,
        mode: Mode<'_>,
    ) -> Result<Var> {
        let dims = g.dims(exemplars).to_vec();
        if dims.len() != 2 || dims[0] == 0 {
            return Err(Error::EmptyReference(format!(
                "visual token generation needs at least one exemplar, got dims {dims:?}"
            )));
        }
        if dims[1] != self.config.width {
            return Err(Error::dim(
                "generate_visual_tokens",
                format!(
                    "exemplar width {} vs generator width {}",
                    dims[1], self.config.width
                ),
            ));
        }
        let mut rng = mode.into_rng();
        let mut x = g.concat_rows(&[self.queries, exemplars])?;
        let run = self.config.block_run();
        for block in &self.blocks {
            x = block.forward(g, x, run, rng.as_deref_mut())?;
        }
        g.slice_rows(x, 0, self.config.tokens)
    }
}
