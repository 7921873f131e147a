//! Subcommand bodies. Each resolves its flags, checks every path before any
//! work starts, then calls into the core library.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use modref_core::classifiers::{
    accuracy, argmax_rows, ClassifierBank, ClassifierKind, DEFAULT_TAU_T,
};
use modref_core::dataio::{
    generate_fixture, load_dataset, pooled_features, read_archive, write_archive, write_atomic,
    ClassReferenceSet, Dataset, FixtureConfig, Split, TensorArchive,
};
use modref_core::encoders::{build_classifier_weights, GeneratorConfig, GeneratorParams, Mode};
use modref_core::fusion::{
    build_fused_classifier, ClassifierOutputs, Metric, PreferenceWeights, DEFAULT_TAU_P,
    PREFERENCE_ORDER,
};
use modref_core::numerics::Tensor;
use modref_core::training::{
    log_to_csv, train as run_training, EpisodeSpec, TrainConfig, TrainingPool,
};

use crate::args::{EvalArgs, ExportBankArgs, FixturesArgs, Merge, SplitArg, TrainArgs};
use crate::report::{Accuracy, EvalReport, MeanFusionCheck, PreferenceRow, REPORT_VERSION};
use crate::Failure;

/// Exemplar rows per class used at evaluation unless overridden.
pub const DEFAULT_SHOTS_EXEMPLAR: usize = 16;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn require<T>(flag: &str, v: Option<T>) -> Result<T, Failure> {
    v.ok_or_else(|| invalid(format!("{flag} is required")))
}

fn existing_file(flag: &str, path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Io(format!(
            "{flag} {}: no such file",
            path.display()
        )))
    }
}

fn writable_target(flag: &str, path: &Path) -> Result<(), Failure> {
    if path.file_name().is_none() {
        return Err(invalid(format!(
            "{flag} {} does not name a file",
            path.display()
        )));
    }
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Failure::Io(format!(
            "{flag} {}: directory {} does not exist",
            path.display(),
            dir.display()
        ))),
        _ => Ok(()),
    }
}

/// `prefix` with `suffix` appended to its final component.
pub fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn positive(flag: &str, v: f64) -> Result<f64, Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(format!(
            "{flag} must be a positive number, got {v}"
        )))
    }
}

fn select_split(ds: Dataset, split: SplitArg) -> Result<Dataset, Failure> {
    let wanted = match split {
        SplitArg::All => return Ok(ds),
        SplitArg::Base => Split::Base,
        SplitArg::Novel => Split::Novel,
    };
    let m = ds.manifest.filter_split(wanted);
    if m.classes.is_empty() {
        return Err(invalid(format!(
            "--split {} selects no classes",
            split.name()
        )));
    }
    Ok(ds.with_manifest(m)?)
}

fn load_split(flag: &str, path: &Path, split: SplitArg) -> Result<Dataset, Failure> {
    existing_file(flag, path)?;
    select_split(load_dataset(path)?, split)
}

pub fn fixtures(args: FixturesArgs) -> Result<(), Failure> {
    let a = args.resolve()?;
    let out = require("--out", a.out)?;
    let manifest_path = suffixed(&out, ".manifest.json");
    let archive_path = suffixed(&out, ".ovma");
    writable_target("--out", &manifest_path)?;

    let d = FixtureConfig::default();
    let cfg = FixtureConfig {
        seed: a.seed.unwrap_or(d.seed),
        classes: a.classes.unwrap_or(d.classes),
        dim: a.dim.unwrap_or(d.dim),
        shots: a.shots.unwrap_or(d.shots),
        ambiguity: a.ambiguity.unwrap_or(d.ambiguity),
        sigma: a.sigma.unwrap_or(d.sigma),
        ..d
    };
    if cfg.classes < 2 {
        return Err(invalid(format!(
            "--classes must be at least 2, got {}",
            cfg.classes
        )));
    }
    if cfg.dim == 0 {
        return Err(invalid("--dim must be positive"));
    }
    if cfg.shots < 2 {
        return Err(invalid(format!(
            "--shots must be at least 2, got {}",
            cfg.shots
        )));
    }
    if !(0.0..=1.0).contains(&cfg.ambiguity) {
        return Err(invalid(format!(
            "--ambiguity must lie in [0, 1], got {}",
            cfg.ambiguity
        )));
    }
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(invalid(format!(
            "--sigma must be a finite number >= 0, got {}",
            cfg.sigma
        )));
    }

    let mut fx = generate_fixture(&cfg)?;
    fx.dataset.manifest.archive = archive_path
        .file_name()
        .expect("checked above")
        .to_string_lossy()
        .into_owned();
    fx.dataset.save(&manifest_path)?;
    println!(
        "fixtures: {} classes, d={}, {} shots, sigma {}, {} with swapped text -> {}",
        cfg.classes,
        cfg.dim,
        cfg.shots,
        cfg.sigma,
        fx.swapped.len(),
        manifest_path.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let a = args.resolve()?;
    let data = require("--data", a.data)?;
    let out = require("--out", a.out)?;
    let model_path = suffixed(&out, ".ovma");
    let log_path = suffixed(&out, ".log.csv");
    existing_file("--data", &data)?;
    writable_target("--out", &model_path)?;

    let defaults = TrainConfig::default();
    let spec = EpisodeSpec {
        k: a.k.unwrap_or(defaults.episode.k),
        class_batch: a.class_batch.unwrap_or(defaults.episode.class_batch),
        strict: a.strict,
    };
    if let Err(e) = spec.validate() {
        return Err(invalid(format!("--k / --class-batch: {e}")));
    }
    let seed = a.seed.unwrap_or(0);
    let config = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        episodes_per_epoch: a.episodes_per_epoch,
        base_lr: positive("--lr", a.lr.unwrap_or(defaults.base_lr))?,
        tau_t: positive("--tau-t", a.tau_t.unwrap_or(defaults.tau_t))?,
        seed,
        episode: spec,
        checkpoint_every: a.checkpoint_every,
        checkpoint_path: a.checkpoint_every.map(|_| model_path.clone()),
        dump_path: Some(suffixed(&out, ".nonfinite.ovma")),
    };
    if config.epochs == 0 {
        return Err(invalid("--epochs must be at least 1"));
    }
    if config.episodes_per_epoch == Some(0) {
        return Err(invalid("--episodes-per-epoch must be at least 1"));
    }
    if config.checkpoint_every == Some(0) {
        return Err(invalid("--checkpoint-every must be at least 1"));
    }

    let ds = load_split("--data", &data, a.split.unwrap_or_default())?;
    let lang = ds.language_encoder::<f32>()?;
    let refs = ds.references::<f32>()?;
    let pool = TrainingPool::from_references(&refs);
    if pool.len() < refs.len() {
        warn!(
            "{} classes have no exemplars and are left out of training",
            refs.len() - pool.len()
        );
    }
    let init = GeneratorParams::init(
        GeneratorConfig {
            width: ds.manifest.d,
            tokens: a.tokens.unwrap_or(GeneratorConfig::default().tokens),
            ..Default::default()
        },
        seed,
    )
    .map_err(|e| invalid(format!("--tokens: {e}")))?;

    let outcome = run_training(&pool, &lang, init, &config)?;
    let mut archive = TensorArchive::new();
    outcome.params.write_to(&mut archive)?;
    archive.insert("train.step", Tensor::scalar(outcome.log.len() as f32))?;
    write_archive(&model_path, &archive)?;
    write_atomic(&log_path, log_to_csv(&outcome.log).as_bytes())?;

    let first = outcome.log.first().map_or(f64::NAN, |r| r.loss);
    let tail = &outcome.log[outcome.log.len().saturating_sub(20)..];
    let last = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "train: {} steps, loss {first:.4} -> {last:.4} (mean of last {}), wrote {} and {}",
        outcome.log.len(),
        tail.len(),
        model_path.display(),
        log_path.display()
    );
    Ok(())
}

fn limited_refs(
    refs: Vec<ClassReferenceSet<f32>>,
    shots: usize,
) -> Result<Vec<ClassReferenceSet<f32>>, Failure> {
    if shots == 0 {
        return Err(invalid("--shots-exemplar must be at least 1"));
    }
    refs.iter()
        .map(|r| r.with_exemplar_limit(shots).map_err(Failure::from))
        .collect()
}

fn load_generator(path: &Path) -> Result<GeneratorParams<f32>, Failure> {
    // Dropout rates are irrelevant at inference.
    Ok(GeneratorParams::read_from(
        &read_archive(path)?,
        (0.0, 0.0),
    )?)
}

/// Rebuilds the bank exactly as `eval` would, from a dataset and generator.
pub fn build_bank(
    ds: &Dataset,
    generator: Option<&GeneratorParams<f32>>,
    shots: usize,
    tau_t: f64,
) -> Result<(ClassifierBank<f32>, Vec<ClassReferenceSet<f32>>), Failure> {
    let lang = ds.language_encoder::<f32>()?;
    let refs = limited_refs(ds.references::<f32>()?, shots)?;
    let bank = build_classifier_weights(
        generator,
        &lang,
        &refs,
        generator.is_some(),
        tau_t,
        Mode::Eval,
    )?;
    Ok((bank, refs))
}

fn mean_fusion_check(
    outputs: &ClassifierOutputs<f32>,
    fused_scores: &Tensor<f64>,
) -> MeanFusionCheck {
    let direct: Vec<f64> = outputs
        .vision
        .data()
        .iter()
        .zip(outputs.multimodal.data())
        .zip(outputs.text.data())
        .map(|((&v, &vt), &t)| (v as f64 + vt as f64 + t as f64) / 3.0)
        .collect();
    let max_abs_diff = direct
        .iter()
        .zip(fused_scores.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let direct = Tensor::new(fused_scores.dims().to_vec(), direct).expect("same shape");
    let labels_agree = argmax_rows(&direct) == argmax_rows(fused_scores);
    MeanFusionCheck {
        max_abs_diff,
        labels_agree,
        passed: labels_agree && max_abs_diff <= 1e-12,
    }
}

/// Runs the evaluation, prints the tables and returns the report.
pub fn eval(args: EvalArgs) -> Result<EvalReport, Failure> {
    let a = args.resolve()?;
    let data = require("--data", a.data)?;
    existing_file("--data", &data)?;
    if let Some(p) = &a.generator {
        existing_file("--generator", p)?;
    }
    if let Some(p) = &a.bank {
        existing_file("--bank", p)?;
    }
    if let Some(p) = &a.report {
        writable_target("--report", p)?;
    }
    if a.generator.is_some() && a.bank.is_some() {
        return Err(invalid("--generator and --bank are mutually exclusive"));
    }
    if a.generator.is_none() && a.bank.is_none() && !a.text_only {
        return Err(invalid(
            "the V and VT classifiers need --generator (or --bank); pass --text-only to evaluate text alone",
        ));
    }
    let tau_p = a.tau_p.unwrap_or(DEFAULT_TAU_P);
    if !(tau_p >= 0.0 && tau_p.is_finite()) {
        return Err(invalid(format!(
            "--tau-p must be a finite number >= 0, got {tau_p}"
        )));
    }
    let tau_t = positive("--tau-t", a.tau_t.unwrap_or(DEFAULT_TAU_T))?;
    let metric = a.metric.unwrap_or_default();
    let shots = a.shots_exemplar.unwrap_or(DEFAULT_SHOTS_EXEMPLAR);
    let split = a.split.unwrap_or_default();

    let ds = load_split("--data", &data, split)?;
    let (bank, refs) = if let Some(path) = &a.bank {
        let bank = ClassifierBank::read_from(&read_archive(path)?, ds.manifest.class_ids())?;
        if a.tau_t.is_some() {
            warn!("--tau-t is ignored with --bank; the bank stores its own temperature");
        }
        (bank, limited_refs(ds.references::<f32>()?, shots)?)
    } else {
        let generator = a.generator.as_deref().map(load_generator).transpose()?;
        if let Some(g) = &generator {
            if g.width() != ds.manifest.d {
                return Err(invalid(format!(
                    "--generator width {} does not match dataset width {}",
                    g.width(),
                    ds.manifest.d
                )));
            }
        }
        build_bank(&ds, generator.as_ref(), shots, tau_t)?
    };
    let text_only = a.text_only || bank.vision().is_none() || bank.multimodal().is_none();
    if !a.text_only && text_only {
        return Err(invalid(
            "--bank lacks the V or VT classifier; pass --text-only to evaluate text alone",
        ));
    }

    let (features, truth) = pooled_features(&refs, |r| r.targets.as_ref())?;
    if truth.is_empty() {
        return Err(invalid(
            "the selected classes have no target rows to evaluate",
        ));
    }
    info!(
        "evaluating {} targets over {} classes",
        truth.len(),
        refs.len()
    );
    let acc_of = |kind: ClassifierKind| -> Result<f64, Failure> {
        let pred = modref_core::classifiers::predict(&bank, &features, kind)?;
        Ok(accuracy(&pred.labels, &truth))
    };
    let text_acc = acc_of(ClassifierKind::Text)?;

    let mut report = EvalReport {
        version: REPORT_VERSION,
        data: data.display().to_string(),
        split: split.name().into(),
        classes: refs.len(),
        targets: truth.len(),
        shots_exemplar: shots,
        tau_t: bank.tau_t(),
        tau_p,
        metric,
        accuracy: Accuracy {
            text: text_acc,
            vision: None,
            multimodal: None,
            fused: None,
        },
        fused_by_metric: BTreeMap::new(),
        mean_fusion_check: None,
        preference_columns: PREFERENCE_ORDER.map(|k| k.label().to_string()),
        preferences: Vec::new(),
    };

    if !text_only {
        report.accuracy.vision = Some(acc_of(ClassifierKind::Vision)?);
        report.accuracy.multimodal = Some(acc_of(ClassifierKind::MultiModal)?);
        let outputs = ClassifierOutputs::compute(&bank, &features)?;
        let mut chosen: Option<PreferenceWeights> = None;
        for m in Metric::ALL {
            let prefs = build_fused_classifier(bank.clone(), &refs, tau_p, m)?.prefs;
            let fused = outputs.fuse(&prefs)?;
            let acc = accuracy(&fused.labels, &truth);
            report.fused_by_metric.insert(m.name().into(), acc);
            if m == Metric::Mean {
                report.mean_fusion_check = Some(mean_fusion_check(&outputs, &fused.scores));
            }
            if m == metric {
                report.accuracy.fused = Some(acc);
                chosen = Some(prefs);
            }
        }
        let prefs = chosen.expect("every metric is evaluated");
        report.preferences = bank
            .class_ids()
            .iter()
            .enumerate()
            .map(|(k, id)| {
                let row = |t: &Tensor<f64>| [t.row(k)[0], t.row(k)[1], t.row(k)[2]];
                PreferenceRow {
                    class: id.clone(),
                    alpha: row(&prefs.alpha),
                    alpha_hat: row(&prefs.alpha_hat),
                }
            })
            .collect();
        if let Some(c) = &report.mean_fusion_check {
            if !c.passed {
                warn!(
                    "mean fusion deviates from the direct average by {:.3e}",
                    c.max_abs_diff
                );
            }
        }
    }

    // A closed stdout (e.g. piped into `head`) is not an error worth failing on.
    let _ = std::io::stdout().write_all(report.render_tables().as_bytes());
    if let Some(p) = &a.report {
        write_atomic(p, report.to_json().as_bytes())?;
        println!("report written to {}", p.display());
    }
    Ok(report)
}

pub fn export_bank(args: ExportBankArgs) -> Result<(), Failure> {
    let a = args.resolve()?;
    let data = require("--data", a.data)?;
    let generator = a
        .generator
        .ok_or_else(|| invalid("--generator is required to build the V and VT classifiers"))?;
    let out = require("--out", a.out)?;
    existing_file("--data", &data)?;
    existing_file("--generator", &generator)?;
    writable_target("--out", &out)?;
    let tau_t = positive("--tau-t", a.tau_t.unwrap_or(DEFAULT_TAU_T))?;
    let shots = a.shots_exemplar.unwrap_or(DEFAULT_SHOTS_EXEMPLAR);

    let ds = load_split("--data", &data, a.split.unwrap_or_default())?;
    let params = load_generator(&generator)?;
    if params.width() != ds.manifest.d {
        return Err(invalid(format!(
            "--generator width {} does not match dataset width {}",
            params.width(),
            ds.manifest.d
        )));
    }
    let (bank, _) = build_bank(&ds, Some(&params), shots, tau_t)?;
    let mut archive = TensorArchive::new();
    bank.write_to(&mut archive)?;
    write_archive(&out, &archive)?;

    // Read back what was written and confirm it is a usable bank.
    let back = ClassifierBank::<f32>::read_from(&read_archive(&out)?, ds.manifest.class_ids())?;
    for kind in ClassifierKind::ALL {
        let w = back
            .get(kind)
            .ok_or_else(|| Failure::Io(format!("{} lost the {kind} classifier", out.display())))?;
        for r in 0..w.rows() {
            let norm = w
                .row(r)
                .iter()
                .map(|&x| (x as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Failure::Io(format!(
                    "{}: {kind} row {r} has norm {norm}",
                    out.display()
                )));
            }
        }
    }
    println!(
        "export-bank: {} classes x 3 classifiers (tau_t {}) -> {}",
        back.num_classes(),
        tau_t,
        out.display()
    );
    Ok(())
}
