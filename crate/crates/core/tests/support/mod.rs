//! Property checks shared by the core integration tests and the workspace
//! acceptance target. Each check returns a summary instead of asserting so
//! callers can decide how to report it.
#![allow(dead_code)]

use modref_core::classifiers::ClassifierKind;
use modref_core::encoders::{
    GeneratorConfig, GeneratorParams, GeneratorVars, LanguageConfig, LanguageEncoder, Mode,
};
use modref_core::fusion::{
    fuse_predict, per_class_metric, preference_weights, Metric, PreferenceWeights,
};
use modref_core::numerics::{
    attention, attention_with_key_bias, grad_check, DropoutKind, GradCheckConfig, Graph, Tensor,
    Var,
};
use modref_core::training::{episode_loss, sample_episode, EpisodeSpec, TrainingPool};
use modref_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub const GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct OpResult {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor<f64> {
    Tensor::randn(dims.to_vec(), std, rng)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

/// `sum(out .* probe)` for a fixed random probe, so every output entry
/// carries a distinct weight into the scalar being differentiated.
fn probe_sum(g: &mut Graph<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(probe.clone())?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

type Loss = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One randomized instance of a primitive: parameters plus a scalar loss.
fn instance(op: &'static str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Loss) {
    let (r, c, k) = (dim(rng), dim(rng), dim(rng));
    match op {
        "matmul" => {
            let probe = randn(rng, &[r, c], 1.0);
            (
                vec![randn(rng, &[r, k], 1.0), randn(rng, &[k, c], 1.0)],
                Box::new(move |g, v| {
                    let o = g.matmul(v[0], v[1])?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "transpose" => {
            let probe = randn(rng, &[c, r], 1.0);
            (
                vec![randn(rng, &[r, c], 1.0)],
                Box::new(move |g, v| {
                    let o = g.transpose(v[0])?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "add" | "mul" => {
            let probe = randn(rng, &[r, c], 1.0);
            let is_add = op == "add";
            (
                vec![randn(rng, &[r, c], 1.0), randn(rng, &[r, c], 1.0)],
                Box::new(move |g, v| {
                    let o = if is_add {
                        g.add(v[0], v[1])?
                    } else {
                        g.mul(v[0], v[1])?
                    };
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "add_row" => {
            let probe = randn(rng, &[r, c], 1.0);
            (
                vec![randn(rng, &[r, c], 1.0), randn(rng, &[c], 1.0)],
                Box::new(move |g, v| {
                    let o = g.add_row(v[0], v[1])?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "scale" => {
            let probe = randn(rng, &[r, c], 1.0);
            let f = rng.random_range(-3.0..3.0);
            (
                vec![randn(rng, &[r, c], 1.0)],
                Box::new(move |g, v| {
                    let o = g.scale(v[0], f)?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "gelu" => {
            let probe = randn(rng, &[r, c], 1.0);
            (
                vec![randn(rng, &[r, c], 1.5)],
                Box::new(move |g, v| {
                    let o = g.gelu(v[0])?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "softmax" | "causal_softmax" => {
            let n = dim(rng);
            let cols = if op == "softmax" { c + 1 } else { n };
            let probe = randn(rng, &[n, cols], 1.0);
            let temp = rng.random_range(0.5..2.0);
            let causal = op == "causal_softmax";
            (
                vec![randn(rng, &[n, cols], 1.0)],
                Box::new(move |g, v| {
                    let o = if causal {
                        g.causal_softmax(v[0], temp)?
                    } else {
                        g.softmax(v[0], temp)?
                    };
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "layer_norm" => {
            let cols = c + 1;
            let probe = randn(rng, &[r, cols], 1.0);
            (
                vec![
                    randn(rng, &[r, cols], 1.0),
                    randn(rng, &[cols], 1.0),
                    randn(rng, &[cols], 1.0),
                ],
                Box::new(move |g, v| {
                    let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "l2_normalize" => {
            let probe = randn(rng, &[r, c], 1.0);
            (
                vec![randn(rng, &[r, c], 1.0)],
                Box::new(move |g, v| {
                    let o = g.l2_normalize(v[0])?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "cross_entropy" => {
            // Probabilities kept inside the simplex interior.
            let cols = c + 1;
            let mut p = randn(rng, &[r, cols], 1.0);
            for row in p.data_mut().chunks_mut(cols) {
                row.iter_mut().for_each(|x| *x = x.exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..cols)).collect();
            (
                vec![p],
                Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
            )
        }
        "apply_mask" => {
            let probe = randn(rng, &[r, c], 1.0);
            let mask: Vec<f64> = (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            (
                vec![randn(rng, &[r, c], 1.0)],
                Box::new(move |g, v| {
                    let o = g.apply_mask(v[0], mask.clone())?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "dropout" => {
            let probe = randn(rng, &[r, c], 1.0);
            let seed: u64 = rng.random();
            let kind = [
                DropoutKind::Element,
                DropoutKind::Channel,
                DropoutKind::Path,
            ][rng.random_range(0..3)];
            (
                vec![randn(rng, &[r, c], 1.0)],
                Box::new(move |g, v| {
                    // Same mask on every evaluation.
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                    let o = g.dropout(v[0], 0.3, kind, Some(&mut mask_rng))?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "concat_rows" | "concat_cols" => {
            let rows = op == "concat_rows";
            let (a_dims, b_dims, out) = if rows {
                ([r, c], [k, c], [r + k, c])
            } else {
                ([r, c], [r, k], [r, c + k])
            };
            let probe = randn(rng, &out, 1.0);
            (
                vec![randn(rng, &a_dims, 1.0), randn(rng, &b_dims, 1.0)],
                Box::new(move |g, v| {
                    let o = if rows {
                        g.concat_rows(&[v[0], v[1]])?
                    } else {
                        g.concat_cols(&[v[0], v[1]])?
                    };
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "slice_rows" | "slice_cols" => {
            let rows = op == "slice_rows";
            let n = 1 + r;
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            let (dims, out) = if rows {
                ([n, c], [len, c])
            } else {
                ([c, n], [c, len])
            };
            let probe = randn(rng, &out, 1.0);
            (
                vec![randn(rng, &dims, 1.0)],
                Box::new(move |g, v| {
                    let o = if rows {
                        g.slice_rows(v[0], start, len)?
                    } else {
                        g.slice_cols(v[0], start, len)?
                    };
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "sum" => {
            let weight = rng.random_range(-2.0..2.0);
            (
                vec![randn(rng, &[r, c], 1.0)],
                Box::new(move |g, v| {
                    let s = g.sum(v[0])?;
                    g.scale(s, weight)
                }),
            )
        }
        "biased_attention" => {
            let width = dim(rng);
            let n = dim(rng);
            let bias: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..1.0)).collect();
            let probe = randn(rng, &[n, width], 1.0);
            (
                vec![
                    randn(rng, &[n, width], 1.0),
                    randn(rng, &[n, width], 1.0),
                    randn(rng, &[n, width], 1.0),
                ],
                Box::new(move |g, v| {
                    let o = attention_with_key_bias(g, v[0], v[1], v[2], 1, false, Some(&bias))?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        "attention" | "causal_attention" => {
            let heads = rng.random_range(1..=2);
            let width = heads * dim(rng);
            let n = dim(rng);
            let causal = op == "causal_attention";
            let probe = randn(rng, &[n, width], 1.0);
            (
                vec![
                    randn(rng, &[n, width], 1.0),
                    randn(rng, &[n, width], 1.0),
                    randn(rng, &[n, width], 1.0),
                ],
                Box::new(move |g, v| {
                    let o = attention(g, v[0], v[1], v[2], heads, causal)?;
                    probe_sum(g, o, &probe)
                }),
            )
        }
        other => panic!("no generator for {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "mul",
    "add_row",
    "scale",
    "gelu",
    "softmax",
    "causal_softmax",
    "layer_norm",
    "l2_normalize",
    "cross_entropy",
    "apply_mask",
    "dropout",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "sum",
    "attention",
    "causal_attention",
    "biased_attention",
];

/// Gradient check of one primitive over `cases` random instances.
pub fn check_primitive(op: &'static str, cases: usize, seed: u64) -> Result<OpResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (params, loss) = instance(op, &mut rng);
        let report = grad_check(
            loss,
            &params,
            &GradCheckConfig {
                eps: 1e-5,
                max_entries_per_param: None,
                seed: case as u64,
            },
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(OpResult {
        op,
        cases,
        max_rel_error: worst,
    })
}

/// Width of the episode used by [`check_episode_loss`].
pub const EPISODE_GRAD_WIDTH: usize = 16;

/// Gradient check of the full episode loss with respect to every generator
/// tensor, at width 16 in f64. `train_mode` fixes a dropout mask by
/// reseeding its rng on every evaluation.
pub fn check_episode_loss(seed: u64, train_mode: bool, entries_per_param: usize) -> Result<f64> {
    let d = EPISODE_GRAD_WIDTH;
    let config = GeneratorConfig {
        width: d,
        init_std: 0.15,
        ..Default::default()
    };
    let generator = GeneratorParams::<f64>::init(config.clone(), seed)?;
    let lang = LanguageEncoder::<f64>::synthesize(LanguageConfig {
        width: d,
        blocks: 2,
        context_length: 16,
        init_std: 0.15,
        seed: seed + 1,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let classes = 4;
    let pool = TrainingPool {
        ids: (0..classes).map(|i| format!("g{i}")).collect(),
        samples: (0..classes)
            .map(|_| {
                let mut t = randn(&mut rng, &[6, d], 1.0);
                modref_core::dataio::normalize_rows(&mut t).expect("gaussian rows");
                t
            })
            .collect(),
        texts: (0..classes)
            .map(|_| randn(&mut rng, &[2, d], 0.5))
            .collect(),
    };
    let spec = EpisodeSpec {
        k: 4,
        class_batch: 3,
        strict: true,
    };
    let episode = sample_episode(&pool, &spec, &mut rng)?;
    let tau_t = modref_core::classifiers::DEFAULT_TAU_T;
    let params: Vec<Tensor<f64>> = generator
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let mask_seed = seed + 3;
    let report = grad_check(
        |g, vars| {
            let gv = GeneratorVars::from_vars(config.clone(), vars)?;
            let lv = lang.bind(g)?;
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let mode = if train_mode {
                Mode::Train(&mut mask_rng)
            } else {
                Mode::Eval
            };
            Ok(episode_loss(g, &gv, &lv, &episode, tau_t, mode)?.loss)
        },
        &params,
        &GradCheckConfig {
            eps: 1e-5,
            max_entries_per_param: Some(entries_per_param),
            seed,
        },
    )?;
    Ok(report.max_rel_error)
}

/// Precision, recall and F1 from an explicit confusion matrix.
pub fn brute_force_metric(preds: &[usize], labels: &[usize], c: usize, metric: Metric) -> Vec<f64> {
    let mut confusion = vec![vec![0u64; c]; c];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    (0..c)
        .map(|k| {
            let tp = confusion[k][k] as f64;
            let fp: f64 = (0..c)
                .filter(|&j| j != k)
                .map(|j| confusion[j][k] as f64)
                .sum();
            let fn_: f64 = (0..c)
                .filter(|&j| j != k)
                .map(|j| confusion[k][j] as f64)
                .sum();
            let frac = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
            match metric {
                Metric::Precision => frac(tp, tp + fp),
                Metric::Recall => frac(tp, tp + fn_),
                Metric::F1 => frac(2.0 * tp, 2.0 * tp + fp + fn_),
                Metric::Mean => 1.0,
            }
        })
        .collect()
}

/// Largest deviation between `per_class_metric` and the confusion-matrix
/// oracle over random instances with N <= 50 and C <= 10.
pub fn metric_oracle(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = rng.random_range(1..=10);
        let n = rng.random_range(1..=50);
        // Bias predictions toward the truth so all regimes (0/0, perfect) occur.
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let hit_rate: f64 = rng.random();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| {
                if rng.random::<f64>() < hit_rate {
                    l
                } else {
                    rng.random_range(0..c)
                }
            })
            .collect();
        for metric in [Metric::Precision, Metric::Recall, Metric::F1] {
            let got = per_class_metric(&preds, &labels, c, metric).expect("valid instance");
            let want = brute_force_metric(&preds, &labels, c, metric);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
    let mut t = randn(rng, &[n, c], 2.0);
    for row in t.data_mut().chunks_mut(c) {
        row.iter_mut().for_each(|x| *x = x.exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

#[derive(Clone, Debug)]
pub struct FusionLimits {
    /// Largest |fused - arithmetic mean| at tau_p = 0.
    pub mean_max_diff: f64,
    /// Whether argmax labels matched mean fusion in every instance.
    pub mean_labels_agree: bool,
    /// Smallest weight given to a class's best classifier at tau_p = 1e4.
    pub min_winner_weight: f64,
}

/// Random instances with per-class scores on a 0.05 grid and a unique
/// per-class maximum.
pub fn fusion_limits(instances: usize, seed: u64) -> FusionLimits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FusionLimits {
        mean_max_diff: 0.0,
        mean_labels_agree: true,
        min_winner_weight: 1.0,
    };
    for _ in 0..instances {
        let c = rng.random_range(1..=8);
        let n = rng.random_range(1..=20);
        let [pv, pvt, pt] = [0, 1, 2].map(|_| random_probs(&mut rng, n, c));
        let mut cols = [Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..c {
            let row = loop {
                let r: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0..=20) as f64 / 20.0);
                let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if r.iter().filter(|&&x| x == max).count() == 1 {
                    break r;
                }
            };
            for j in 0..3 {
                cols[j].push(row[j]);
            }
        }

        let uniform =
            preference_weights(&cols[0], &cols[1], &cols[2], 0.0, Metric::F1).expect("valid");
        let fused = fuse_predict(&pv, &pvt, &pt, &uniform).expect("shapes agree");
        let mean: Vec<f64> = (0..n * c)
            .map(|i| (pv.data()[i] + pvt.data()[i] + pt.data()[i]) / 3.0)
            .collect();
        for (a, b) in fused.scores.data().iter().zip(&mean) {
            out.mean_max_diff = out.mean_max_diff.max((a - b).abs());
        }
        let mean_t = Tensor::new([n, c], mean).expect("shape");
        if modref_core::classifiers::argmax_rows(&mean_t) != fused.labels {
            out.mean_labels_agree = false;
        }
        let mean_prefs = PreferenceWeights::uniform(c);
        let via_uniform = fuse_predict(&pv, &pvt, &pt, &mean_prefs).expect("shapes agree");
        if via_uniform.labels != fused.labels {
            out.mean_labels_agree = false;
        }

        let sharp =
            preference_weights(&cols[0], &cols[1], &cols[2], 1e4, Metric::F1).expect("valid");
        for k in 0..c {
            let alpha = sharp.alpha.row(k);
            let best = (0..3)
                .max_by(|&a, &b| alpha[a].total_cmp(&alpha[b]))
                .expect("three columns");
            out.min_winner_weight = out.min_winner_weight.min(sharp.alpha_hat.row(k)[best]);
        }
    }
    out
}

/// Largest change of the visual tokens under row permutation and under
/// duplicating every exemplar row, in evaluation mode.
pub fn voken_invariance(configs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..configs {
        let width = [8, 16, 32][rng.random_range(0..3)];
        let heads = if width % 2 == 0 && rng.random::<bool>() {
            2
        } else {
            1
        };
        let tokens = rng.random_range(1..=3);
        let generator = GeneratorParams::<f64>::init(
            GeneratorConfig {
                width,
                tokens,
                heads,
                init_std: rng.random_range(0.02..0.3),
                exemplar_mass: rng.random_range(0.5..32.0),
                ..Default::default()
            },
            seed.wrapping_add(i as u64),
        )?;
        let m = rng.random_range(2..=8);
        let mut e = randn(&mut rng, &[m, width], 1.0);
        modref_core::dataio::normalize_rows(&mut e)?;
        let base = generator.generate_visual_tokens(&e, Mode::Eval)?;

        let mut order: Vec<usize> = (0..m).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let rows =
            |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&r| e.row(r).to_vec()).collect() };
        let permuted = Tensor::from_rows(&rows(&order), width)?;
        let doubled_idx: Vec<usize> = (0..m).chain(0..m).collect();
        let doubled = Tensor::from_rows(&rows(&doubled_idx), width)?;

        for variant in [permuted, doubled] {
            let v = generator.generate_visual_tokens(&variant, Mode::Eval)?;
            worst = worst.max(v.tokens().max_abs_diff(base.tokens()));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct SamplerStats {
    pub episodes: usize,
    pub disjoint_always: bool,
    pub m_in_range_always: bool,
    pub counts: Vec<u64>,
    pub chi2: f64,
    pub p_value: f64,
}

/// Draws `episodes` episodes with K = 8 and tallies every per-class M.
pub fn sampler_stats(episodes: usize, seed: u64) -> Result<SamplerStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 24;
    let pool = TrainingPool {
        ids: (0..classes).map(|i| format!("s{i}")).collect(),
        samples: (0..classes)
            .map(|_| randn(&mut rng, &[12, 2], 1.0))
            .collect(),
        texts: (0..classes)
            .map(|_| randn(&mut rng, &[1, 2], 1.0))
            .collect(),
    };
    let spec = EpisodeSpec::default();
    let (lo, hi) = (2usize, 6usize);
    let mut counts = vec![0u64; hi - lo + 1];
    let mut disjoint_always = true;
    let mut m_in_range_always = true;
    for _ in 0..episodes {
        let ep = sample_episode(&pool, &spec, &mut rng)?;
        for c in &ep.classes {
            let m = c.exemplar_rows.len();
            let mut all: Vec<usize> = c
                .exemplar_rows
                .iter()
                .chain(&c.target_rows)
                .copied()
                .collect();
            all.sort_unstable();
            all.dedup();
            if all.len() != spec.k || c.exemplar_rows.iter().any(|r| c.target_rows.contains(r)) {
                disjoint_always = false;
            }
            if (lo..=hi).contains(&m) {
                counts[m - lo] += 1;
            } else {
                m_in_range_always = false;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive dof");
    Ok(SamplerStats {
        episodes,
        disjoint_always,
        m_in_range_always,
        counts,
        chi2,
        p_value: dist.sf(chi2),
    })
}

/// Softmax preference example and the two-class fused hand case.
pub struct WorkedExample {
    pub softmax: [f64; 3],
    pub fused_scores: [f64; 2],
    pub fused_label: usize,
}

pub fn worked_example() -> Result<WorkedExample> {
    // alpha = [0.5, 0.8, 0.5] at tau_p = 10 gives logits [5, 8, 5].
    let prefs = preference_weights(&[0.5], &[0.8], &[0.5], 10.0, Metric::F1)?;
    let s = prefs.alpha_hat.row(0);
    let pt = Tensor::<f64>::from_f64([1, 2], &[0.9, 0.1])?;
    let pv = Tensor::<f64>::from_f64([1, 2], &[0.2, 0.8])?;
    let pvt = Tensor::<f64>::from_f64([1, 2], &[0.6, 0.4])?;
    let hand = PreferenceWeights {
        alpha: Tensor::full([2, 3], 0.5),
        // Columns follow PREFERENCE_ORDER = (V, VT, T).
        alpha_hat: Tensor::from_f64([2, 3], &[0.2, 0.3, 0.5, 0.5, 0.3, 0.2])?,
        tau_p: 10.0,
        metric: Metric::F1,
    };
    debug_assert_eq!(
        modref_core::fusion::PREFERENCE_ORDER,
        [
            ClassifierKind::Vision,
            ClassifierKind::MultiModal,
            ClassifierKind::Text
        ]
    );
    let fused = fuse_predict(&pv, &pvt, &pt, &hand)?;
    Ok(WorkedExample {
        softmax: [s[0], s[1], s[2]],
        fused_scores: [fused.scores.data()[0], fused.scores.data()[1]],
        fused_label: fused.labels[0],
    })
}
