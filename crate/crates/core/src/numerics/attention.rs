use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Scaled dot-product attention over `[L x d]` queries, keys and values.
///
/// The model dimension is split into `heads` contiguous column groups; each
/// head computes `softmax(Q Kᵀ / sqrt(d_head)) V` and the head outputs are
/// concatenated back to `[L x d]`. With `causal`, position `i` attends only to
/// positions `<= i`.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    attention_with_key_bias(g, queries, keys, values, heads, causal, None)
}

/// [`attention`] with a fixed additive bias on the post-scaling logit of
/// each key position, shared by all queries and heads.
pub fn attention_with_key_bias<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    causal: bool,
    key_bias: Option<&[f64]>,
) -> Result<Var> {
    let qd = g.dims(queries).to_vec();
    if qd.len() != 2 || g.dims(keys) != qd.as_slice() || g.dims(values) != qd.as_slice() {
        return Err(Error::dim(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", qd, g.dims(keys), g.dims(values)),
        ));
    }
    let d = qd[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    let head_dim = d / heads;
    let temperature = (head_dim as f64).sqrt();
    let bias = match key_bias {
        None => None,
        Some(b) if b.len() == qd[0] => {
            // Added before the softmax divides by the temperature.
            let row: Vec<T> = b.iter().map(|&x| T::lit(x * temperature)).collect();
            Some(g.constant(Tensor::new([qd[0]], row)?)?)
        }
        Some(b) => {
            return Err(Error::dim(
                "attention",
                format!("{} key biases for {} keys", b.len(), qd[0]),
            ))
        }
    };

    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, k, v) = if heads == 1 {
            (queries, keys, values)
        } else {
            let start = h * head_dim;
            (
                g.slice_cols(queries, start, head_dim)?,
                g.slice_cols(keys, start, head_dim)?,
                g.slice_cols(values, start, head_dim)?,
            )
        };
        let kt = g.transpose(k)?;
        let mut scores = g.matmul(q, kt)?;
        if let Some(b) = bias {
            scores = g.add_row(scores, b)?;
        }
        let weights = if causal {
            g.causal_softmax(scores, temperature)?
        } else {
            g.softmax(scores, temperature)?
        };
        outputs.push(g.matmul(weights, v)?);
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        g.concat_cols(&outputs)
    }
}
