mod support;

use modref_core::classifiers::ClassifierKind;
use modref_core::dataio::{generate_fixture, FixtureConfig};
use modref_core::encoders::{build_classifier_weights, GeneratorConfig, GeneratorParams, Mode};
use support::voken_invariance;

#[test]
fn vokens_ignore_exemplar_order_and_multiplicity() {
    let worst = voken_invariance(50, 31).unwrap();
    assert!(worst < 1e-5, "max change {worst:e}");
}

#[test]
fn bank_rows_are_unit_norm_and_text_needs_no_generator() {
    let fx = generate_fixture(&FixtureConfig {
        classes: 4,
        dim: 16,
        shots: 4,
        text_fit_steps: 20,
        ..Default::default()
    })
    .unwrap();
    let ds = &fx.dataset;
    let lang = ds.language_encoder::<f32>().unwrap();
    let refs = ds.references::<f32>().unwrap();
    let text_only = build_classifier_weights(None, &lang, &refs, false, 0.01, Mode::Eval).unwrap();
    assert!(text_only.vision().is_none() && text_only.multimodal().is_none());

    let generator = GeneratorParams::<f32>::init(
        GeneratorConfig {
            width: 16,
            ..Default::default()
        },
        3,
    )
    .unwrap();
    let bank =
        build_classifier_weights(Some(&generator), &lang, &refs, true, 0.01, Mode::Eval).unwrap();
    assert_eq!(bank.text(), text_only.text());
    for kind in ClassifierKind::ALL {
        let w = bank.get(kind).unwrap();
        assert_eq!(w.dims(), &[4, 16]);
        for r in 0..4 {
            let n: f32 = w.row(r).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "{kind} row {r} norm {n}");
        }
    }
    // Evaluation is deterministic despite running classes in parallel.
    let again =
        build_classifier_weights(Some(&generator), &lang, &refs, true, 0.01, Mode::Eval).unwrap();
    assert_eq!(bank, again);
}
