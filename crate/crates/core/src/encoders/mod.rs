//! Visual token generator, frozen language encoder, and classifier weight
//! synthesis from class references.

mod block;
mod generator;
mod language;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use block::{BlockParams, BlockVars, BLOCK_TENSOR_NAMES};
pub use generator::{GeneratorConfig, GeneratorParams, GeneratorVars, Voken, GENERATOR_BLOCKS};
pub use language::{LanguageConfig, LanguageEncoder, LanguageVars};

use crate::classifiers::ClassifierBank;
use crate::dataio::ClassReferenceSet;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Whether dropout is active. Training mode carries the rng that draws masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl<'a> Mode<'a> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub(crate) fn into_rng(self) -> Option<&'a mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        }
    }

    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }
}

/// Keeps at most `max_len` leading rows of a token sequence.
pub fn truncate_tokens<T: Scalar>(tokens: &Tensor<T>, max_len: usize) -> Result<Tensor<T>> {
    let len = tokens.dims().first().copied().unwrap_or(0);
    if len <= max_len {
        Ok(tokens.clone())
    } else {
        tokens.slice_rows(0, max_len)
    }
}

/// Vision-only and multi-modal weight rows (`[1 x d]` each) of one class.
#[derive(Clone, Copy, Debug)]
pub struct ClassWeightVars {
    pub vokens: Var,
    pub vision: Var,
    pub multimodal: Var,
}

/// Builds the vision-only weight `encode(voken)` and the multi-modal weight
/// `encode([voken; text])` for one class inside `g`.
///
/// Text tokens are cut from the tail when vokens plus text would exceed the
/// encoder context; vokens are always kept.
pub fn class_weight_vars<T: Scalar>(
    g: &mut Graph<T>,
    gen: &GeneratorVars,
    lang: &LanguageVars,
    exemplars: Var,
    text: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<ClassWeightVars> {
    let p = gen.config.tokens;
    let budget = lang.config.context_length.checked_sub(p).ok_or_else(|| {
        Error::Config(format!(
            "{p} visual tokens do not fit context length {}",
            lang.config.context_length
        ))
    })?;
    let vokens = gen.visual_tokens(g, exemplars, mode)?;
    let vision = lang.encode(g, vokens)?;
    let multimodal = if budget == 0 || text.is_empty() {
        vision
    } else {
        let text = g.constant(truncate_tokens(text, budget)?)?;
        let seq = g.concat_rows(&[vokens, text])?;
        lang.encode(g, seq)?
    };
    Ok(ClassWeightVars {
        vokens,
        vision,
        multimodal,
    })
}

/// Per-class weight rows produced by [`build_classifier_weights`].
struct ClassRows<T> {
    text: Vec<T>,
    vision: Option<Vec<T>>,
    multimodal: Option<Vec<T>>,
}

fn class_rows<T: Scalar>(
    gen: Option<&GeneratorParams<T>>,
    lang: &LanguageEncoder<T>,
    class: &ClassReferenceSet<T>,
    visual: bool,
    mode: Mode<'_>,
) -> Result<ClassRows<T>> {
    let text = truncate_tokens(&class.text, lang.context_length())?;
    if text.is_empty() {
        return Err(Error::Reference(format!(
            "class {} has no text tokens",
            class.id
        )));
    }
    let w_text = lang.encode_sequence(&text)?.into_data();
    if !visual {
        return Ok(ClassRows {
            text: w_text,
            vision: None,
            multimodal: None,
        });
    }
    let gen = gen.ok_or_else(|| {
        Error::Reference("vision and multi-modal classifiers need a visual token generator".into())
    })?;
    let exemplars = class.exemplars.as_ref().ok_or_else(|| {
        Error::Reference(format!(
            "class {} has no exemplars; only a text classifier can be built",
            class.id
        ))
    })?;
    let mut g = Graph::new();
    let gv = gen.bind(&mut g, false)?;
    let lv = lang.bind(&mut g)?;
    let e = g.constant(exemplars.clone())?;
    let w = class_weight_vars(&mut g, &gv, &lv, e, &class.text, mode)?;
    Ok(ClassRows {
        text: w_text,
        vision: Some(g.value(w.vision).data().to_vec()),
        multimodal: Some(g.value(w.multimodal).data().to_vec()),
    })
}

/// Text, vision-only and multi-modal classifier weights for every class.
///
/// With `visual == false` only the text weights are built and no generator
/// is needed. Evaluation mode runs classes in parallel; training mode is
/// sequential so dropout masks follow the rng deterministically.
pub fn build_classifier_weights<T: Scalar>(
    gen: Option<&GeneratorParams<T>>,
    lang: &LanguageEncoder<T>,
    refs: &[ClassReferenceSet<T>],
    visual: bool,
    tau_t: f64,
    mut mode: Mode<'_>,
) -> Result<ClassifierBank<T>> {
    if let Some(gen) = gen {
        if gen.width() != lang.width() {
            return Err(Error::dim(
                "build_classifier_weights",
                format!(
                    "generator width {} vs encoder width {}",
                    gen.width(),
                    lang.width()
                ),
            ));
        }
    }
    let rows: Vec<ClassRows<T>> = if mode.is_train() {
        refs.iter()
            .map(|c| class_rows(gen, lang, c, visual, mode.reborrow()))
            .collect::<Result<_>>()?
    } else {
        refs.par_iter()
            .map(|c| class_rows(gen, lang, c, visual, Mode::Eval))
            .collect::<Result<_>>()?
    };
    let d = lang.width();
    let stack = |pick: &dyn Fn(&ClassRows<T>) -> Option<&Vec<T>>| -> Result<Option<Tensor<T>>> {
        let picked: Option<Vec<Vec<T>>> = rows.iter().map(|r| pick(r).cloned()).collect();
        picked.map(|p| Tensor::from_rows(&p, d)).transpose()
    };
    let w_text = stack(&|r| Some(&r.text))?;
    let w_vision = stack(&|r| r.vision.as_ref())?;
    let w_multi = stack(&|r| r.multimodal.as_ref())?;
    ClassifierBank::new(
        w_text,
        w_vision,
        w_multi,
        tau_t,
        refs.iter().map(|c| c.id.clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (GeneratorParams<f64>, LanguageEncoder<f64>) {
        let gen = GeneratorParams::init(
            GeneratorConfig {
                width: 16,
                init_std: 0.2,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let lang = LanguageEncoder::synthesize(LanguageConfig {
            width: 16,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        (gen, lang)
    }

    fn class(id: &str, seed: u64, text_len: usize) -> ClassReferenceSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Tensor::randn([4, 16], 1.0, &mut rng);
        crate::dataio::normalize_rows(&mut e).unwrap();
        ClassReferenceSet {
            id: id.into(),
            label: 0,
            exemplars: Some(e),
            text: Tensor::randn([text_len, 16], 0.5, &mut rng),
            targets: None,
        }
    }

    #[test]
    fn bank_shapes_and_unit_rows() {
        let (gen, lang) = setup();
        let refs: Vec<_> = (0..3).map(|i| class(&format!("c{i}"), i, 3)).collect();
        let bank =
            build_classifier_weights(Some(&gen), &lang, &refs, true, 0.01, Mode::Eval).unwrap();
        for w in [bank.text(), bank.vision(), bank.multimodal()] {
            let w = w.unwrap();
            assert_eq!(w.dims(), &[3, 16]);
            for r in 0..3 {
                let n: f64 = w.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_references_give_identical_rows() {
        let (gen, lang) = setup();
        let a = class("a", 7, 3);
        let mut b = a.clone();
        b.id = "b".into();
        let bank =
            build_classifier_weights(Some(&gen), &lang, &[a, b], true, 0.01, Mode::Eval).unwrap();
        for w in [bank.text(), bank.vision(), bank.multimodal()] {
            let w = w.unwrap();
            assert_eq!(w.row(0), w.row(1));
        }
    }

    #[test]
    fn long_text_is_truncated_not_rejected() {
        let (gen, lang) = setup();
        assert_eq!(gen.tokens(), 2);
        let c = class("long", 3, 76);
        let bank =
            build_classifier_weights(Some(&gen), &lang, &[c.clone()], true, 0.01, Mode::Eval)
                .unwrap();

        let mut short = c.clone();
        short.text = c.text.slice_rows(0, 75).unwrap();
        let reference =
            build_classifier_weights(Some(&gen), &lang, &[short], true, 0.01, Mode::Eval).unwrap();
        assert_eq!(bank.multimodal().unwrap(), reference.multimodal().unwrap());
    }

    #[test]
    fn missing_exemplars_only_allow_text() {
        let (gen, lang) = setup();
        let mut c = class("x", 1, 3);
        c.exemplars = None;
        assert!(matches!(
            build_classifier_weights(Some(&gen), &lang, &[c.clone()], true, 0.01, Mode::Eval),
            Err(Error::Reference(_))
        ));
        let bank = build_classifier_weights(None, &lang, &[c], false, 0.01, Mode::Eval).unwrap();
        assert!(bank.text().is_some() && bank.vision().is_none());
    }

    #[test]
    fn visual_request_without_generator_is_reference_error() {
        let (_, lang) = setup();
        let c = class("x", 1, 3);
        assert!(matches!(
            build_classifier_weights(None, &lang, &[c], true, 0.01, Mode::Eval),
            Err(Error::Reference(_))
        ));
    }
}
