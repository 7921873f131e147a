//! Preference-based fusion of the text, vision-only and multi-modal
//! classifiers, weighted per class by how well each one classifies the
//! class's own exemplars.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifiers::{argmax_rows, predict, ClassifierBank, ClassifierKind};
use crate::dataio::{pooled_features, ClassReferenceSet, TensorArchive};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Default preference temperature.
pub const DEFAULT_TAU_P: f64 = 10.0;

/// Column order of preference tables.
pub const PREFERENCE_ORDER: [ClassifierKind; 3] = [
    ClassifierKind::Vision,
    ClassifierKind::MultiModal,
    ClassifierKind::Text,
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    F1,
    Precision,
    Recall,
    /// Identical preferences for every classifier.
    Mean,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::F1, Metric::Precision, Metric::Recall, Metric::Mean];

    pub fn name(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::Mean => "mean",
        }
    }

    fn code(self) -> f32 {
        Metric::ALL.iter().position(|&m| m == self).expect("listed") as f32
    }

    fn from_code(code: f32) -> Result<Self> {
        Metric::ALL
            .iter()
            .copied()
            .find(|m| m.code() == code)
            .ok_or_else(|| Error::Validation(format!("unknown metric code {code}")))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown metric {s:?}; expected f1, precision, recall or mean"
                ))
            })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision, recall or F1 for each of `c` classes. Every 0/0
/// evaluates to 0. `Metric::Mean` yields all ones.
pub fn per_class_metric(
    preds: &[usize],
    labels: &[usize],
    c: usize,
    metric: Metric,
) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(Error::Validation(
            "metric needs at least one prediction".into(),
        ));
    }
    if preds.len() != labels.len() {
        return Err(Error::dim(
            "per_class_metric",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&x| x >= c) {
        return Err(Error::Index(format!("class index {bad} not below {c}")));
    }
    if metric == Metric::Mean {
        return Ok(vec![1.0; c]);
    }
    let mut tp = vec![0usize; c];
    let mut predicted = vec![0usize; c];
    let mut actual = vec![0usize; c];
    for (&p, &l) in preds.iter().zip(labels) {
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    Ok((0..c)
        .map(|k| {
            let precision = ratio(tp[k], predicted[k]);
            let recall = ratio(tp[k], actual[k]);
            match metric {
                Metric::Precision => precision,
                Metric::Recall => recall,
                _ => {
                    if precision + recall == 0.0 {
                        0.0
                    } else {
                        2.0 * precision * recall / (precision + recall)
                    }
                }
            }
        })
        .collect())
}

/// Per-class metric scores `alpha` and their softmax weights `alpha_hat`,
/// both `[C x 3]` with columns (V, VT, T).
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceWeights {
    pub alpha: Tensor<f64>,
    pub alpha_hat: Tensor<f64>,
    pub tau_p: f64,
    pub metric: Metric,
}

impl PreferenceWeights {
    pub fn num_classes(&self) -> usize {
        self.alpha.rows()
    }

    /// Uniform weights, equivalent to averaging the three classifiers.
    pub fn uniform(c: usize) -> Self {
        Self {
            alpha: Tensor::full([c, 3], 1.0),
            alpha_hat: Tensor::full([c, 3], 1.0 / 3.0),
            tau_p: 0.0,
            metric: Metric::Mean,
        }
    }

    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        archive.insert_cast("pref.alpha", &self.alpha)?;
        archive.insert_cast("pref.alpha_hat", &self.alpha_hat)?;
        archive.insert("pref.tau_p", Tensor::scalar(self.tau_p as f32))?;
        archive.insert("pref.metric", Tensor::scalar(self.metric.code()))
    }

    pub fn read_from(archive: &TensorArchive) -> Result<Self> {
        let alpha: Tensor<f64> = archive.require("pref.alpha")?.cast();
        let alpha_hat: Tensor<f64> = archive.require("pref.alpha_hat")?.cast();
        if alpha.dims() != alpha_hat.dims() || alpha.dims().len() != 2 || alpha.cols() != 3 {
            return Err(Error::Validation(format!(
                "preference tensors have dims {:?} and {:?}",
                alpha.dims(),
                alpha_hat.dims()
            )));
        }
        Ok(Self {
            alpha,
            alpha_hat,
            tau_p: archive.require("pref.tau_p")?.item() as f64,
            metric: Metric::from_code(archive.require("pref.metric")?.item())?,
        })
    }
}

/// `alpha_hat[k] = softmax(tau_p * [alpha_V[k], alpha_VT[k], alpha_T[k]])`.
pub fn preference_weights(
    alpha_v: &[f64],
    alpha_vt: &[f64],
    alpha_t: &[f64],
    tau_p: f64,
    metric: Metric,
) -> Result<PreferenceWeights> {
    if !(tau_p >= 0.0) || !tau_p.is_finite() {
        return Err(Error::Validation(format!(
            "tau_p must be finite and >= 0, got {tau_p}"
        )));
    }
    let c = alpha_v.len();
    if alpha_vt.len() != c || alpha_t.len() != c {
        return Err(Error::dim(
            "preference_weights",
            format!("score lengths {c}, {}, {}", alpha_vt.len(), alpha_t.len()),
        ));
    }
    let mut alpha = Vec::with_capacity(3 * c);
    let mut alpha_hat = Vec::with_capacity(3 * c);
    for k in 0..c {
        let row = [alpha_v[k], alpha_vt[k], alpha_t[k]];
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Validation(format!(
                "class {k}: score {bad} outside [0, 1]"
            )));
        }
        let logits = row.map(|a| tau_p * a);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = logits.map(|l| (l - max).exp());
        let z: f64 = exps.iter().sum();
        alpha.extend(row);
        alpha_hat.extend(exps.map(|e| e / z));
    }
    Ok(PreferenceWeights {
        alpha: Tensor::new([c, 3], alpha)?,
        alpha_hat: Tensor::new([c, 3], alpha_hat)?,
        tau_p,
        metric,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPrediction {
    /// Raw fused scores; rows need not sum to one.
    pub scores: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl FusedPrediction {
    /// Scores with each row rescaled to sum to one. Argmax is unchanged.
    pub fn renormalized(&self) -> Tensor<f64> {
        let mut out = self.scores.clone();
        if out.is_empty() {
            return out;
        }
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        out
    }
}

/// `score[n, k] = sum_j alpha_hat[k, j] * probs_j[n, k]` over (V, VT, T).
pub fn fuse_predict<T: Scalar>(
    probs_v: &Tensor<T>,
    probs_vt: &Tensor<T>,
    probs_t: &Tensor<T>,
    prefs: &PreferenceWeights,
) -> Result<FusedPrediction> {
    let dims = probs_v.dims();
    if probs_vt.dims() != dims || probs_t.dims() != dims || dims.len() != 2 {
        return Err(Error::dim(
            "fuse_predict",
            format!(
                "probability dims {:?}, {:?}, {:?}",
                dims,
                probs_vt.dims(),
                probs_t.dims()
            ),
        ));
    }
    let c = dims[1];
    if prefs.num_classes() != c {
        return Err(Error::dim(
            "fuse_predict",
            format!("{} preference rows for {c} classes", prefs.num_classes()),
        ));
    }
    let w = prefs.alpha_hat.data();
    let mut scores = Vec::with_capacity(probs_v.len());
    for ((v, vt), t) in probs_v
        .data()
        .chunks(c.max(1))
        .zip(probs_vt.data().chunks(c.max(1)))
        .zip(probs_t.data().chunks(c.max(1)))
    {
        for k in 0..c {
            let a = &w[3 * k..3 * k + 3];
            scores.push(a[0] * v[k].as_f64() + a[1] * vt[k].as_f64() + a[2] * t[k].as_f64());
        }
    }
    let scores = Tensor::new(dims.to_vec(), scores)?;
    let labels = argmax_rows(&scores);
    Ok(FusedPrediction { scores, labels })
}

/// A bank with preference weights derived from its own exemplars.
#[derive(Clone, Debug)]
pub struct FusedClassifier<T> {
    pub bank: ClassifierBank<T>,
    pub prefs: PreferenceWeights,
}

/// Probabilities of all three classifiers for one feature batch.
#[derive(Clone, Debug)]
pub struct ClassifierOutputs<T> {
    pub vision: Tensor<T>,
    pub multimodal: Tensor<T>,
    pub text: Tensor<T>,
}

impl<T: Scalar> ClassifierOutputs<T> {
    pub fn compute(bank: &ClassifierBank<T>, features: &Tensor<T>) -> Result<Self> {
        Ok(Self {
            vision: predict(bank, features, ClassifierKind::Vision)?.probs,
            multimodal: predict(bank, features, ClassifierKind::MultiModal)?.probs,
            text: predict(bank, features, ClassifierKind::Text)?.probs,
        })
    }

    pub fn get(&self, kind: ClassifierKind) -> &Tensor<T> {
        match kind {
            ClassifierKind::Vision => &self.vision,
            ClassifierKind::MultiModal => &self.multimodal,
            ClassifierKind::Text => &self.text,
        }
    }

    pub fn fuse(&self, prefs: &PreferenceWeights) -> Result<FusedPrediction> {
        fuse_predict(&self.vision, &self.multimodal, &self.text, prefs)
    }
}

impl<T: Scalar> FusedClassifier<T> {
    pub fn predict(&self, features: &Tensor<T>) -> Result<FusedPrediction> {
        ClassifierOutputs::compute(&self.bank, features)?.fuse(&self.prefs)
    }
}

/// Validates each classifier on the pooled exemplars of `refs` (labels are
/// positions in `refs`, matching bank rows), then turns per-class metric
/// scores into preference weights.
pub fn build_fused_classifier<T: Scalar>(
    bank: ClassifierBank<T>,
    refs: &[ClassReferenceSet<T>],
    tau_p: f64,
    metric: Metric,
) -> Result<FusedClassifier<T>> {
    for kind in ClassifierKind::ALL {
        if bank.get(kind).is_none() {
            return Err(Error::Reference(format!(
                "fusion needs the {kind} classifier"
            )));
        }
    }
    if refs.len() != bank.num_classes() {
        return Err(Error::dim(
            "build_fused_classifier",
            format!(
                "{} reference sets for {} bank classes",
                refs.len(),
                bank.num_classes()
            ),
        ));
    }
    if let Some(r) = refs
        .iter()
        .find(|r| r.exemplars.as_ref().is_none_or(|e| e.rows() == 0))
    {
        return Err(Error::EmptyReference(format!(
            "class {} has no exemplars, so preference fusion is unavailable",
            r.id
        )));
    }
    let (features, labels) = pooled_features(refs, |r| r.exemplars.as_ref())?;
    let outputs = ClassifierOutputs::compute(&bank, &features)?;
    let c = bank.num_classes();
    let score = |kind| per_class_metric(&argmax_rows(outputs.get(kind)), &labels, c, metric);
    let prefs = preference_weights(
        &score(ClassifierKind::Vision)?,
        &score(ClassifierKind::MultiModal)?,
        &score(ClassifierKind::Text)?,
        tau_p,
        metric,
    )?;
    Ok(FusedClassifier { bank, prefs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn f1_hand_case() {
        let f1 = per_class_metric(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, Metric::F1).unwrap();
        assert_abs_diff_eq!(f1[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f1[1], 0.8, epsilon = 1e-12);
        let p = per_class_metric(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, Metric::Precision).unwrap();
        assert_eq!(p, vec![1.0, 2.0 / 3.0]);
        let r = per_class_metric(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, Metric::Recall).unwrap();
        assert_eq!(r, vec![0.5, 1.0]);
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let s = per_class_metric(&[0, 1], &[0, 1], 3, Metric::F1).unwrap();
        assert_eq!(s, vec![1.0, 1.0, 0.0]);
        assert_eq!(
            per_class_metric(&[0, 1], &[0, 1], 3, Metric::Mean).unwrap(),
            vec![1.0; 3]
        );
        assert!(per_class_metric(&[], &[], 3, Metric::F1).is_err());
        assert!(per_class_metric(&[3], &[0], 3, Metric::F1).is_err());
    }

    #[test]
    fn preference_softmax_example() {
        let p = preference_weights(&[0.5], &[0.8], &[0.5], 10.0, Metric::F1).unwrap();
        let row = p.alpha_hat.row(0);
        assert_abs_diff_eq!(row[0], 0.0453, epsilon = 1e-4);
        assert_abs_diff_eq!(row[1], 0.9094, epsilon = 1e-4);
        assert_abs_diff_eq!(row[2], 0.0453, epsilon = 1e-4);
        let u = preference_weights(&[0.1], &[0.9], &[0.4], 0.0, Metric::F1).unwrap();
        assert_eq!(u.alpha_hat.row(0), &[1.0 / 3.0; 3]);
        assert!(preference_weights(&[1.2], &[0.0], &[0.0], 10.0, Metric::F1).is_err());
        assert!(preference_weights(&[0.2], &[0.0], &[0.0], -1.0, Metric::F1).is_err());
    }

    #[test]
    fn fused_hand_case() {
        let pt = Tensor::<f64>::from_f64([1, 2], &[0.9, 0.1]).unwrap();
        let pv = Tensor::<f64>::from_f64([1, 2], &[0.2, 0.8]).unwrap();
        let pvt = Tensor::<f64>::from_f64([1, 2], &[0.6, 0.4]).unwrap();
        let prefs = PreferenceWeights {
            alpha: Tensor::full([2, 3], 0.5),
            alpha_hat: Tensor::from_f64([2, 3], &[0.2, 0.3, 0.5, 0.5, 0.3, 0.2]).unwrap(),
            tau_p: 10.0,
            metric: Metric::F1,
        };
        let out = fuse_predict(&pv, &pvt, &pt, &prefs).unwrap();
        assert_abs_diff_eq!(out.scores.data()[0], 0.67, epsilon = 1e-12);
        assert_abs_diff_eq!(out.scores.data()[1], 0.54, epsilon = 1e-12);
        assert_eq!(out.labels, vec![0]);
        let r = out.renormalized();
        assert_abs_diff_eq!(r.data()[0] + r.data()[1], 1.0, epsilon = 1e-12);
        assert!(fuse_predict(&pv, &pvt, &Tensor::zeros([1, 3]), &prefs).is_err());
    }

    #[test]
    fn archive_roundtrip() {
        let p = preference_weights(&[0.5, 0.25], &[0.8, 0.5], &[0.5, 1.0], 10.0, Metric::Recall)
            .unwrap();
        let mut a = TensorArchive::new();
        p.write_to(&mut a).unwrap();
        let back = PreferenceWeights::read_from(&a).unwrap();
        assert_eq!(back.metric, Metric::Recall);
        assert!(back.alpha_hat.max_abs_diff(&p.alpha_hat) < 1e-7);
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("F1".parse::<Metric>().unwrap(), Metric::F1);
        assert_eq!("mean".parse::<Metric>().unwrap(), Metric::Mean);
        assert!("auc".parse::<Metric>().is_err());
    }
}
