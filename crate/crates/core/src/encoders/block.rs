use rand::Rng;

use crate::error::Result;
use crate::numerics::{attention_with_key_bias, DropoutKind, Graph, Scalar, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Pre-norm transformer block: `x + Attn(LN(x))` then `x + FFN(LN(x))`,
/// with a `4d` GELU feed-forward layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub fc1: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

/// Suffixes under which a block's tensors are archived, in visiting order.
pub const BLOCK_TENSOR_NAMES: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc1",
    "mlp.fc1_bias",
    "mlp.fc2",
    "mlp.fc2_bias",
];

impl<T: Scalar> BlockParams<T> {
    /// Linear weights `normal(0, std)`, biases zero, layer-norm gains one.
    pub fn init<R: Rng + ?Sized>(width: usize, std: f64, rng: &mut R) -> Self {
        let hidden = 4 * width;
        Self {
            ln1_gain: Tensor::full([width], T::one()),
            ln1_bias: Tensor::zeros([width]),
            wq: Tensor::randn([width, width], std, rng),
            wk: Tensor::randn([width, width], std, rng),
            wv: Tensor::randn([width, width], std, rng),
            wo: Tensor::randn([width, width], std, rng),
            ln2_gain: Tensor::full([width], T::one()),
            ln2_bias: Tensor::zeros([width]),
            fc1: Tensor::randn([width, hidden], std, rng),
            fc1_bias: Tensor::zeros([hidden]),
            fc2: Tensor::randn([hidden, width], std, rng),
            fc2_bias: Tensor::zeros([width]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.fc1,
            &self.fc1_bias,
            &self.fc2,
            &self.fc2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc1,
            &mut self.fc1_bias,
            &mut self.fc2,
            &mut self.fc2_bias,
        ]
    }

    /// Expected dims of each tensor, in [`BLOCK_TENSOR_NAMES`] order.
    pub fn expected_dims(width: usize) -> [Vec<usize>; 12] {
        let h = 4 * width;
        [
            vec![width],
            vec![width],
            vec![width, width],
            vec![width, width],
            vec![width, width],
            vec![width, width],
            vec![width],
            vec![width],
            vec![width, h],
            vec![h],
            vec![h, width],
            vec![width],
        ]
    }

    pub(crate) fn from_tensors(mut t: Vec<Tensor<T>>) -> Self {
        assert_eq!(t.len(), 12);
        let mut next = || t.remove(0);
        Self {
            ln1_gain: next(),
            ln1_bias: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            fc1: next(),
            fc1_bias: next(),
            fc2: next(),
            fc2_bias: next(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BlockVars> {
        let mut vars = Vec::with_capacity(12);
        for t in self.tensors() {
            vars.push(if trainable {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            });
        }
        Ok(BlockVars(vars.try_into().expect("12 block tensors")))
    }
}

/// Graph handles for one bound block, in [`BLOCK_TENSOR_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars(pub [Var; 12]);

/// Per-call settings of a block forward pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockRun {
    pub heads: usize,
    pub causal: bool,
    pub attn_path_dropout: f64,
    pub channel_dropout: f64,
    /// `(start, mass)`: key positions from `start` on form an unordered set
    /// whose total attention weight equals that of `mass` ordinary keys with
    /// the set's mean logit. Each gets the logit offset `ln(mass / set size)`.
    pub set_from: Option<(usize, f64)>,
}

impl BlockVars {
    pub(crate) fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        run: BlockRun,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, fc1, fc1_b, fc2, fc2_b] = self.0;

        let h = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let bias = run.set_from.map(|(start, mass)| {
            let n = g.dims(x)[0];
            let offset = (mass / (n - start) as f64).ln();
            (0..n)
                .map(|i| if i < start { 0.0 } else { offset })
                .collect::<Vec<_>>()
        });
        let a = attention_with_key_bias(g, q, k, v, run.heads, run.causal, bias.as_deref())?;
        let a = g.matmul(a, wo)?;
        let a = g.dropout(
            a,
            run.attn_path_dropout,
            DropoutKind::Path,
            rng.as_deref_mut(),
        )?;
        let x = g.add(x, a)?;

        let h = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let f = g.matmul(h, fc1)?;
        let f = g.add_row(f, fc1_b)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, fc2)?;
        let f = g.add_row(f, fc2_b)?;
        let f = g.dropout(f, run.channel_dropout, DropoutKind::Channel, rng)?;
        g.add(x, f)
    }
}
