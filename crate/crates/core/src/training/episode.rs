//! K-shot episodes: per class, K samples split into M exemplars and K-M
//! targets, and the joint loss over the vision-only and multi-modal
//! classifiers they induce.

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::classify_var;
use crate::dataio::ClassReferenceSet;
use crate::encoders::{class_weight_vars, GeneratorVars, LanguageVars, Mode};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// Samples drawn per class.
    pub k: usize,
    /// Classes per episode.
    pub class_batch: usize,
    /// Fail instead of skipping classes with fewer than `k` samples.
    pub strict: bool,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            k: 8,
            class_batch: 16,
            strict: false,
        }
    }
}

impl EpisodeSpec {
    /// Preset matching the large-scale recipe (192 classes per episode).
    pub fn full_scale() -> Self {
        Self {
            class_batch: 192,
            ..Self::default()
        }
    }

    pub fn m_low(&self) -> usize {
        self.k.div_ceil(4)
    }

    pub fn m_high(&self) -> usize {
        3 * self.k / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_batch == 0 {
            return Err(Error::Validation("class_batch must be positive".into()));
        }
        let (lo, hi) = (self.m_low(), self.m_high());
        if !(1 <= lo && lo <= hi && hi + 1 <= self.k) {
            return Err(Error::Validation(format!(
                "k = {} gives exemplar range {lo}..={hi}, which must satisfy 1 <= low <= high <= k-1",
                self.k
            )));
        }
        Ok(())
    }
}

/// Training samples per class. Only classes with text and exemplars take part.
#[derive(Clone, Debug)]
pub struct TrainingPool<T> {
    pub ids: Vec<String>,
    pub samples: Vec<Tensor<T>>,
    pub texts: Vec<Tensor<T>>,
}

impl<T: Scalar> TrainingPool<T> {
    /// Uses each class's exemplar rows as its sample pool.
    pub fn from_references(refs: &[ClassReferenceSet<T>]) -> Self {
        let mut pool = Self {
            ids: Vec::new(),
            samples: Vec::new(),
            texts: Vec::new(),
        };
        for r in refs {
            if let Some(e) = &r.exemplars {
                pool.ids.push(r.id.clone());
                pool.samples.push(e.clone());
                pool.texts.push(r.text.clone());
            }
        }
        pool
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices of classes with at least `spec.k` samples, after applying the
    /// strict/skip policy.
    pub fn eligible(&self, spec: &EpisodeSpec) -> Result<Vec<usize>> {
        let mut ok = Vec::with_capacity(self.len());
        let mut short = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.rows() >= spec.k {
                ok.push(i);
            } else {
                short.push(self.ids[i].as_str());
            }
        }
        if !short.is_empty() {
            if spec.strict {
                return Err(Error::Validation(format!(
                    "classes with fewer than {} samples: {}",
                    spec.k,
                    short.join(", ")
                )));
            }
            warn!(
                "skipping {} classes with fewer than {} samples: {}",
                short.len(),
                spec.k,
                short.join(", ")
            );
        }
        if ok.len() < spec.class_batch {
            return Err(Error::Validation(format!(
                "{} classes have at least {} samples but an episode needs {}",
                ok.len(),
                spec.k,
                spec.class_batch
            )));
        }
        Ok(ok)
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeClass<T> {
    /// Index into the training pool.
    pub class: usize,
    /// Label within the episode, `0..class_batch`.
    pub label: usize,
    pub exemplar_rows: Vec<usize>,
    pub target_rows: Vec<usize>,
    pub exemplars: Tensor<T>,
    pub targets: Tensor<T>,
    pub text: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Episode<T> {
    pub classes: Vec<EpisodeClass<T>>,
}

impl<T: Scalar> Episode<T> {
    pub fn m_range(&self) -> (usize, usize) {
        let ms = self.classes.iter().map(|c| c.exemplar_rows.len());
        (ms.clone().min().unwrap_or(0), ms.max().unwrap_or(0))
    }
}

fn gather_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let d = t.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new([rows.len(), d], data)
}

/// Draws `class_batch` classes, then per class K samples without
/// replacement split into M exemplars and K-M targets, M uniform in
/// `m_low..=m_high` and drawn independently per class.
pub fn sample_episode<T: Scalar, R: Rng + ?Sized>(
    pool: &TrainingPool<T>,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode<T>> {
    spec.validate()?;
    let eligible = pool.eligible(spec)?;
    sample_from(pool, &eligible, spec, rng)
}

pub(crate) fn sample_from<T: Scalar, R: Rng + ?Sized>(
    pool: &TrainingPool<T>,
    eligible: &[usize],
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode<T>> {
    let picked = index::sample(rng, eligible.len(), spec.class_batch);
    let mut classes = Vec::with_capacity(spec.class_batch);
    for (label, slot) in picked.into_iter().enumerate() {
        let class = eligible[slot];
        let samples = &pool.samples[class];
        let rows = index::sample(rng, samples.rows(), spec.k).into_vec();
        let m = rng.random_range(spec.m_low()..=spec.m_high());
        let (ex, tg) = rows.split_at(m);
        classes.push(EpisodeClass {
            class,
            label,
            exemplars: gather_rows(samples, ex)?,
            targets: gather_rows(samples, tg)?,
            exemplar_rows: ex.to_vec(),
            target_rows: tg.to_vec(),
            text: pool.texts[class].clone(),
        });
    }
    Ok(Episode { classes })
}

/// Handles produced by [`episode_loss`].
#[derive(Clone, Copy, Debug)]
pub struct EpisodeLoss {
    pub loss: Var,
    pub ce_vision: Var,
    pub ce_multimodal: Var,
}

/// `CE(p_V) + CE(p_VT)` over the episode's targets, where both classifiers
/// are built from the episode's exemplars. The text classifier is not part
/// of the objective.
pub fn episode_loss<T: Scalar>(
    g: &mut Graph<T>,
    gen: &GeneratorVars,
    lang: &LanguageVars,
    episode: &Episode<T>,
    tau_t: f64,
    mut mode: Mode<'_>,
) -> Result<EpisodeLoss> {
    if episode.classes.is_empty() {
        return Err(Error::Validation("episode has no classes".into()));
    }
    let mut vision = Vec::with_capacity(episode.classes.len());
    let mut multi = Vec::with_capacity(episode.classes.len());
    let mut targets = Vec::with_capacity(episode.classes.len());
    let mut labels = Vec::new();
    for c in &episode.classes {
        let e = g.constant(c.exemplars.clone())?;
        let w = class_weight_vars(g, gen, lang, e, &c.text, mode.reborrow())?;
        vision.push(w.vision);
        multi.push(w.multimodal);
        targets.push(g.constant(c.targets.clone())?);
        labels.extend(std::iter::repeat_n(c.label, c.targets.rows()));
    }
    let w_v = g.concat_rows(&vision)?;
    let w_vt = g.concat_rows(&multi)?;
    let v = g.concat_rows(&targets)?;
    let p_v = classify_var(g, w_v, v, tau_t)?;
    let p_vt = classify_var(g, w_vt, v, tau_t)?;
    let ce_vision = g.cross_entropy(p_v, &labels)?;
    let ce_multimodal = g.cross_entropy(p_vt, &labels)?;
    let loss = g.add(ce_vision, ce_multimodal)?;
    Ok(EpisodeLoss {
        loss,
        ce_vision,
        ce_multimodal,
    })
}
