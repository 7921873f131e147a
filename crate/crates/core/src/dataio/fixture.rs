//! Synthetic datasets standing in for encoded images and class names.
//!
//! Each class gets a unit-norm prototype. Exemplar and target features are
//! noisy copies of it. Text tokens are fitted so the frozen encoder maps them
//! close to a perturbed copy of the prototype, so text is informative but
//! imperfect. A chosen fraction of classes then trade text tokens pairwise,
//! so their text describes a different class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{ClassEntry, Dataset, DatasetManifest, EncoderSpec, Split, MANIFEST_VERSION};
use super::{normalize_rows, TensorArchive};
use crate::encoders::{LanguageConfig, LanguageEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::training::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureConfig {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    /// Exemplar rows per class; the same number of target rows is drawn.
    pub shots: usize,
    pub ambiguity: f64,
    pub sigma: f64,
    pub text_len: usize,
    /// Optimization steps used to fit each class's text tokens.
    pub text_fit_steps: usize,
    /// L2 norm every fitted text token is held at.
    pub text_norm: f64,
    /// Per-coordinate std of the noise added to a prototype before text
    /// tokens are fitted to it, so text describes its class imperfectly.
    pub text_noise: f64,
    pub encoder: LanguageConfig,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: 20,
            dim: 64,
            shots: 24,
            ambiguity: 0.5,
            sigma: 0.3,
            text_len: 2,
            text_fit_steps: 150,
            text_norm: 1.0,
            text_noise: 0.2,
            encoder: LanguageConfig::default(),
        }
    }
}

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Validation(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.shots < 2 {
            return Err(Error::Validation(format!(
                "shots must be >= 2, got {}",
                self.shots
            )));
        }
        if self.dim == 0 {
            return Err(Error::Validation("dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Validation(format!(
                "ambiguity must lie in [0, 1], got {}",
                self.ambiguity
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Validation(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.text_norm > 0.0) || !self.text_norm.is_finite() {
            return Err(Error::Validation(format!(
                "text_norm must be positive, got {}",
                self.text_norm
            )));
        }
        if !(self.text_noise >= 0.0) || !self.text_noise.is_finite() {
            return Err(Error::Validation(format!(
                "text_noise must be >= 0, got {}",
                self.text_noise
            )));
        }
        if self.text_len == 0 || self.text_len > self.encoder.context_length {
            return Err(Error::Validation(format!(
                "text_len must lie in 1..={}, got {}",
                self.encoder.context_length, self.text_len
            )));
        }
        Ok(())
    }

    /// Number of classes whose text is swapped: the requested fraction,
    /// rounded down to an even count.
    pub fn swapped_count(&self) -> usize {
        let n = (self.ambiguity * self.classes as f64 + 1e-9).floor() as usize;
        n - n % 2
    }
}

#[derive(Clone, Debug)]
pub struct FixtureOutput {
    pub dataset: Dataset,
    pub prototypes: Tensor<f32>,
    /// Ids of classes whose text tokens describe another class.
    pub swapped: Vec<String>,
}

pub fn class_id(i: usize) -> String {
    format!("c{i:03}")
}

/// Fits `len` tokens so that `lang` encodes them to `direction` (unit norm).
///
/// Projected gradient ascent on the cosine with Adam from a random start;
/// every token row is rescaled to `norm` after each step.
pub fn derive_text_tokens<R: Rng + ?Sized>(
    lang: &LanguageEncoder<f32>,
    direction: &[f32],
    len: usize,
    steps: usize,
    norm: f64,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let d = lang.width();
    if direction.len() != d {
        return Err(Error::dim(
            "derive_text_tokens",
            format!("direction of {} for width {d}", direction.len()),
        ));
    }
    let mut tokens = Tensor::randn([len, d], 1.0, rng);
    rescale_rows(&mut tokens, norm as f32)?;
    let target = Tensor::new([d, 1], direction.to_vec())?;
    let mut state = AdamState::new(AdamConfig::default(), &[&tokens]);
    for _ in 0..steps {
        let mut g = Graph::new();
        let lv = lang.bind(&mut g)?;
        let t = g.param(tokens.clone())?;
        let dir = g.constant(target.clone())?;
        let w = lv.encode(&mut g, t)?;
        let cos = g.matmul(w, dir)?;
        let s = g.sum(cos)?;
        let loss = g.scale(s, -1.0)?;
        g.backward(loss)?;
        let grad = g.grad(t).expect("token grad");
        adam_step(&mut [&mut tokens], &[grad], &mut state, 0.05 * norm)?;
        rescale_rows(&mut tokens, norm as f32)?;
    }
    Ok(tokens)
}

fn rescale_rows(t: &mut Tensor<f32>, norm: f32) -> Result<()> {
    normalize_rows(t)?;
    t.data_mut().iter_mut().for_each(|x| *x *= norm);
    Ok(())
}

fn noisy_rows(proto: &[f32], rows: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let d = proto.len();
    let mut data = Vec::with_capacity(rows * d);
    if sigma == 0.0 {
        for _ in 0..rows {
            data.extend_from_slice(proto);
        }
    } else {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Validation(e.to_string()))?;
        for _ in 0..rows {
            data.extend(proto.iter().map(|&p| p + noise.sample(rng) as f32));
        }
    }
    let mut t = Tensor::new([rows, d], data)?;
    normalize_rows(&mut t)?;
    Ok(t)
}

/// Builds the manifest and archive of a synthetic dataset. Deterministic in
/// `config`. The encoder is synthesized from the fixture seed and recorded in
/// the manifest.
pub fn generate_fixture(config: &FixtureConfig) -> Result<FixtureOutput> {
    config.validate()?;
    let (c, d) = (config.classes, config.dim);
    let encoder_cfg = LanguageConfig {
        width: d,
        seed: config.seed,
        ..config.encoder.clone()
    };
    let lang = LanguageEncoder::<f32>::synthesize(encoder_cfg.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut prototypes = Tensor::<f32>::randn([c, d], 1.0, &mut rng);
    normalize_rows(&mut prototypes)?;

    let mut archive = TensorArchive::new();
    let mut texts = Vec::with_capacity(c);
    for i in 0..c {
        let proto = prototypes.row(i);
        let exemplars = noisy_rows(proto, config.shots, config.sigma, &mut rng)?;
        let targets = noisy_rows(proto, config.shots, config.sigma, &mut rng)?;
        let id = class_id(i);
        archive.insert(format!("class.{id}.exemplars"), exemplars)?;
        archive.insert(format!("class.{id}.targets"), targets)?;
        let described = noisy_rows(proto, 1, config.text_noise, &mut rng)?;
        texts.push(derive_text_tokens(
            &lang,
            described.data(),
            config.text_len,
            config.text_fit_steps,
            config.text_norm,
            &mut rng,
        )?);
    }

    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);
    let mut swapped: Vec<usize> = order[..config.swapped_count()].to_vec();
    for pair in swapped.chunks(2) {
        texts.swap(pair[0], pair[1]);
    }
    swapped.sort_unstable();

    let mut classes = Vec::with_capacity(c);
    for (i, text) in texts.into_iter().enumerate() {
        let id = class_id(i);
        archive.insert(format!("class.{id}.text"), text)?;
        classes.push(ClassEntry {
            name: format!("synthetic class {i}"),
            split: Split::Novel,
            exemplars: Some(format!("class.{id}.exemplars")),
            text: format!("class.{id}.text"),
            targets: Some(format!("class.{id}.targets")),
            id,
        });
    }
    let swapped: Vec<String> = swapped.into_iter().map(class_id).collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        d,
        archive: "fixture.ovma".into(),
        encoder: EncoderSpec::Synthesize(encoder_cfg),
        provenance: format!(
            "synthetic fixture: seed={} classes={c} dim={d} shots={} ambiguity={} sigma={} text_len={}; swapped text: [{}]",
            config.seed,
            config.shots,
            config.ambiguity,
            config.sigma,
            config.text_len,
            swapped.join(", ")
        ),
        classes,
    };
    Ok(FixtureOutput {
        dataset: Dataset::new(manifest, archive)?,
        prototypes,
        swapped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> FixtureConfig {
        FixtureConfig {
            seed,
            classes: 6,
            dim: 16,
            shots: 3,
            text_len: 2,
            text_fit_steps: 40,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate_fixture(&small(3)).unwrap();
        let b = generate_fixture(&small(3)).unwrap();
        assert_eq!(a.dataset.archive.to_bytes(), b.dataset.archive.to_bytes());
        assert_eq!(a.dataset.manifest.to_json(), b.dataset.manifest.to_json());
        let c = generate_fixture(&small(4)).unwrap();
        assert_ne!(a.dataset.archive.to_bytes(), c.dataset.archive.to_bytes());
    }

    #[test]
    fn zero_noise_copies_prototype() {
        let out = generate_fixture(&FixtureConfig {
            sigma: 0.0,
            ..small(1)
        })
        .unwrap();
        let refs = out.dataset.references::<f32>().unwrap();
        for (i, r) in refs.iter().enumerate() {
            let e = r.exemplars.as_ref().unwrap();
            for row in 0..e.rows() {
                for (a, b) in e.row(row).iter().zip(out.prototypes.row(i)) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn swapped_count_follows_fraction() {
        let cfg = FixtureConfig {
            classes: 20,
            ambiguity: 0.5,
            ..Default::default()
        };
        assert_eq!(cfg.swapped_count(), 10);
        let out = generate_fixture(&FixtureConfig {
            ambiguity: 0.5,
            ..small(2)
        })
        .unwrap();
        assert_eq!(out.swapped.len(), 2);
    }

    #[test]
    fn invalid_settings_rejected() {
        for cfg in [
            FixtureConfig {
                ambiguity: 1.5,
                ..small(0)
            },
            FixtureConfig {
                classes: 1,
                ..small(0)
            },
            FixtureConfig {
                shots: 1,
                ..small(0)
            },
            FixtureConfig {
                sigma: -0.1,
                ..small(0)
            },
        ] {
            assert!(matches!(generate_fixture(&cfg), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn fitted_text_points_at_prototype() {
        let cfg = FixtureConfig {
            ambiguity: 0.0,
            text_noise: 0.0,
            ..small(5)
        };
        let out = generate_fixture(&cfg).unwrap();
        let lang = out.dataset.language_encoder::<f32>().unwrap();
        let refs = out.dataset.references::<f32>().unwrap();
        for (i, r) in refs.iter().enumerate() {
            let w = lang.encode_sequence(&r.text).unwrap();
            let cos: f32 = w
                .data()
                .iter()
                .zip(out.prototypes.row(i))
                .map(|(a, b)| a * b)
                .sum();
            assert!(cos > 0.8, "class {i}: cos {cos}");
        }
    }
}
