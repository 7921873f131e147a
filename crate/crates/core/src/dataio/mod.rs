//! Tensor archives, dataset manifests, base/novel splits and the synthetic
//! fixture generator.

mod archive;
mod fixture;
mod manifest;

pub use archive::{
    read_archive, write_archive, write_atomic, TensorArchive, DTYPE_F32, MAGIC, VERSION,
};
pub use fixture::{derive_text_tokens, generate_fixture, FixtureConfig, FixtureOutput};
pub use manifest::{
    load_dataset, split_base_novel, ClassEntry, Dataset, DatasetManifest, EncoderSpec, Split,
    MANIFEST_VERSION,
};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Materialized references of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassReferenceSet<T> {
    pub id: String,
    pub label: usize,
    /// Unit-norm exemplar features `[M x d]`.
    pub exemplars: Option<Tensor<T>>,
    /// Text token embeddings `[L x d]`.
    pub text: Tensor<T>,
    /// Unit-norm held-out features `[N x d]`.
    pub targets: Option<Tensor<T>>,
}

impl<T: Scalar> ClassReferenceSet<T> {
    /// Copy that keeps only the first `shots` exemplar rows.
    pub fn with_exemplar_limit(&self, shots: usize) -> Result<Self> {
        let mut out = self.clone();
        if let Some(e) = &self.exemplars {
            let n = e.rows().min(shots);
            if n == 0 {
                return Err(Error::EmptyReference(format!(
                    "class {} keeps no exemplars",
                    self.id
                )));
            }
            out.exemplars = Some(e.slice_rows(0, n)?);
        }
        Ok(out)
    }
}

/// L2-normalizes every row in place. A zero row is rejected.
pub fn normalize_rows<T: Scalar>(t: &mut Tensor<T>) -> Result<()> {
    if t.is_empty() {
        return Ok(());
    }
    let c = t.cols();
    for (r, row) in t.data_mut().chunks_mut(c).enumerate() {
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::Degenerate(format!("row {r} has norm {norm}")));
        }
        for x in row.iter_mut() {
            *x /= norm;
        }
    }
    Ok(())
}

/// Stacks the feature rows of `refs` with their labels, skipping classes
/// without that kind of feature.
pub fn pooled_features<T: Scalar>(
    refs: &[ClassReferenceSet<T>],
    pick: impl Fn(&ClassReferenceSet<T>) -> Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, r) in refs.iter().enumerate() {
        if let Some(t) = pick(r) {
            if *width.get_or_insert(t.cols()) != t.cols() {
                return Err(Error::dim(
                    "pooled_features",
                    format!("class {} has width {}", r.id, t.cols()),
                ));
            }
            data.extend_from_slice(t.data());
            labels.extend(std::iter::repeat_n(i, t.rows()));
        }
    }
    let d = width.unwrap_or(0);
    Ok((Tensor::new([labels.len(), d], data)?, labels))
}
