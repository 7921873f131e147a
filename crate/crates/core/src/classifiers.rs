//! Cosine-similarity softmax classifiers over banks of unit-norm class weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::TensorArchive;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Default classifier temperature (logit scale 100).
pub const DEFAULT_TAU_T: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassifierKind {
    /// Text tokens only.
    #[serde(rename = "T")]
    Text,
    /// Visual tokens only.
    #[serde(rename = "V")]
    Vision,
    /// Visual tokens followed by text tokens.
    #[serde(rename = "VT")]
    MultiModal,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [
        ClassifierKind::Text,
        ClassifierKind::Vision,
        ClassifierKind::MultiModal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ClassifierKind::Text => "T",
            ClassifierKind::Vision => "V",
            ClassifierKind::MultiModal => "VT",
        }
    }

    fn archive_name(self) -> &'static str {
        match self {
            ClassifierKind::Text => "bank.w_T",
            ClassifierKind::Vision => "bank.w_V",
            ClassifierKind::MultiModal => "bank.w_VT",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" | "t" | "text" => Ok(ClassifierKind::Text),
            "V" | "v" | "vision" => Ok(ClassifierKind::Vision),
            "VT" | "vt" | "multimodal" => Ok(ClassifierKind::MultiModal),
            other => Err(Error::Validation(format!("unknown classifier {other:?}"))),
        }
    }
}

/// Classifier weights for one label space; rows follow `class_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank<T> {
    w_text: Option<Tensor<T>>,
    w_vision: Option<Tensor<T>>,
    w_multi: Option<Tensor<T>>,
    tau_t: f64,
    class_ids: Vec<String>,
}

impl<T: Scalar> ClassifierBank<T> {
    pub fn new(
        w_text: Option<Tensor<T>>,
        w_vision: Option<Tensor<T>>,
        w_multi: Option<Tensor<T>>,
        tau_t: f64,
        class_ids: Vec<String>,
    ) -> Result<Self> {
        if !(tau_t > 0.0) || !tau_t.is_finite() {
            return Err(Error::Parameter(format!(
                "tau_t must be positive, got {tau_t}"
            )));
        }
        let present: Vec<&Tensor<T>> = [&w_text, &w_vision, &w_multi]
            .into_iter()
            .flatten()
            .collect();
        let first = present
            .first()
            .ok_or_else(|| Error::Validation("classifier bank holds no weight matrix".into()))?;
        for w in &present {
            if w.dims().len() != 2 || w.dims() != first.dims() {
                return Err(Error::dim(
                    "classifier_bank",
                    format!("weight dims {:?} vs {:?}", w.dims(), first.dims()),
                ));
            }
        }
        if first.dims()[0] != class_ids.len() {
            return Err(Error::dim(
                "classifier_bank",
                format!("{} rows for {} class ids", first.dims()[0], class_ids.len()),
            ));
        }
        Ok(Self {
            w_text,
            w_vision,
            w_multi,
            tau_t,
            class_ids,
        })
    }

    pub fn text(&self) -> Option<&Tensor<T>> {
        self.w_text.as_ref()
    }

    pub fn vision(&self) -> Option<&Tensor<T>> {
        self.w_vision.as_ref()
    }

    pub fn multimodal(&self) -> Option<&Tensor<T>> {
        self.w_multi.as_ref()
    }

    pub fn get(&self, kind: ClassifierKind) -> Option<&Tensor<T>> {
        match kind {
            ClassifierKind::Text => self.text(),
            ClassifierKind::Vision => self.vision(),
            ClassifierKind::MultiModal => self.multimodal(),
        }
    }

    pub fn tau_t(&self) -> f64 {
        self.tau_t
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        for kind in ClassifierKind::ALL {
            if let Some(w) = self.get(kind) {
                archive.insert_cast(kind.archive_name(), w)?;
            }
        }
        archive.insert("bank.tau_t", Tensor::scalar(self.tau_t as f32))
    }

    /// Rebuilds a bank whose rows belong to `class_ids`, in order.
    pub fn read_from(archive: &TensorArchive, class_ids: Vec<String>) -> Result<Self> {
        let tau_t = archive.require("bank.tau_t")?.item() as f64;
        let load = |kind: ClassifierKind| archive.get(kind.archive_name()).map(|t| t.cast());
        Self::new(
            load(ClassifierKind::Text),
            load(ClassifierKind::Vision),
            load(ClassifierKind::MultiModal),
            tau_t,
            class_ids,
        )
    }
}

/// Graph form of [`classify`]: `softmax(cos(features, weights) / tau_t)`.
pub fn classify_var<T: Scalar>(
    g: &mut Graph<T>,
    weights: Var,
    features: Var,
    tau_t: f64,
) -> Result<Var> {
    let dims = g.dims(weights);
    if dims.len() != 2 || dims[0] == 0 {
        return Err(Error::Validation(format!(
            "classifier bank is empty (weights {dims:?})"
        )));
    }
    let f = g.l2_normalize(features)?;
    let wt = g.transpose(weights)?;
    let logits = g.matmul(f, wt)?;
    g.softmax(logits, tau_t)
}

/// Class probabilities `[N x C]` of `features[N x d]` under unit-norm `weights[C x d]`.
///
/// Feature rows are L2-normalized here, so the call is idempotent with respect
/// to prior normalization.
pub fn classify<T: Scalar>(
    weights: &Tensor<T>,
    features: &Tensor<T>,
    tau_t: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let w = g.constant(weights.clone())?;
    let f = g.constant(features.clone())?;
    let p = classify_var(&mut g, w, f, tau_t)?;
    Ok(g.value(p).clone())
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let c = scores.cols();
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub probs: Tensor<T>,
    pub labels: Vec<usize>,
}

pub fn predict<T: Scalar>(
    bank: &ClassifierBank<T>,
    features: &Tensor<T>,
    kind: ClassifierKind,
) -> Result<Prediction<T>> {
    let w = bank
        .get(kind)
        .ok_or_else(|| Error::Reference(format!("bank has no {kind} classifier")))?;
    if features.dims().len() == 2 && features.dims()[0] == 0 {
        return Ok(Prediction {
            probs: Tensor::zeros([0, bank.num_classes()]),
            labels: Vec::new(),
        });
    }
    let probs = classify(w, features, bank.tau_t())?;
    let labels = argmax_rows(&probs);
    Ok(Prediction { probs, labels })
}

/// Fraction of `predicted` equal to `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}
