//! Command-line flags. Every subcommand also accepts `--config FILE`, a JSON
//! object whose keys are the long flag names; flags given on the command line
//! take precedence over the file.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use modref_core::fusion::Metric;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "modref",
    version,
    about = "Multi-modal reference classifiers: fixtures, training, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest + archive).
    Fixtures(FixturesArgs),
    /// Train the visual token generator on episodes.
    Train(TrainArgs),
    /// Build the classifiers, fuse them and report accuracy.
    Eval(EvalArgs),
    /// Write the classifier bank of a dataset to an archive.
    ExportBank(ExportBankArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    #[default]
    All,
    Base,
    Novel,
}

impl SplitArg {
    pub fn name(self) -> &'static str {
        match self {
            SplitArg::All => "all",
            SplitArg::Base => "base",
            SplitArg::Novel => "novel",
        }
    }
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: modref_core::Error| e.to_string())
}

#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FixturesArgs {
    /// JSON file supplying defaults for the flags below.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Feature width d.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Exemplar rows per class (the same number of target rows is drawn).
    #[arg(long)]
    pub shots: Option<usize>,
    /// Fraction of classes whose text describes another class.
    #[arg(long)]
    pub ambiguity: Option<f64>,
    /// Standard deviation of per-sample noise around the class prototype.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Output prefix; writes PREFIX.manifest.json and PREFIX.ovma.
    #[arg(long, value_name = "PREFIX")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, value_name = "MANIFEST")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Defaults to ceil(classes / class-batch).
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    /// Samples per class and episode.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub class_batch: Option<usize>,
    /// Base learning rate of the cosine schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau_t: Option<f64>,
    /// Visual tokens per class.
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Output prefix; writes PREFIX.ovma and PREFIX.log.csv.
    #[arg(long, value_name = "PREFIX")]
    pub out: Option<PathBuf>,
    /// Rewrite PREFIX.ovma every N steps.
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<usize>,
    /// Fail on classes with fewer than K samples instead of skipping them.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "MANIFEST")]
    pub data: Option<PathBuf>,
    /// Trained generator archive.
    #[arg(long, value_name = "ARCHIVE")]
    pub generator: Option<PathBuf>,
    /// Prebuilt classifier bank (from export-bank) used instead of --generator.
    #[arg(long, value_name = "ARCHIVE")]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub tau_p: Option<f64>,
    #[arg(long)]
    pub tau_t: Option<f64>,
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<Metric>,
    /// Exemplar rows per class used to build classifiers and preferences.
    #[arg(long)]
    pub shots_exemplar: Option<usize>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Write the JSON report here.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Evaluate the text classifier alone; no generator needed.
    #[arg(long)]
    pub text_only: bool,
}

#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExportBankArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "MANIFEST")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "ARCHIVE")]
    pub generator: Option<PathBuf>,
    #[arg(long, value_name = "ARCHIVE")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub shots_exemplar: Option<usize>,
    #[arg(long)]
    pub tau_t: Option<f64>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

/// Overlay of command-line values on top of config-file values.
pub trait Merge: Sized + DeserializeOwned {
    fn config_path(&self) -> Option<&Path>;
    fn merge(self, file: Self) -> Self;

    fn resolve(self) -> Result<Self, Failure> {
        let Some(path) = self.config_path() else {
            return Ok(self);
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Io(format!("--config {}: {e}", path.display())))?;
        let file: Self = serde_json::from_str(&text)
            .map_err(|e| Failure::Validation(format!("--config {}: {e}", path.display())))?;
        Ok(self.merge(file))
    }
}

macro_rules! merge_impl {
    ($ty:ty; opts: $($o:ident),*; flags: $($f:ident),*) => {
        impl Merge for $ty {
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }

            fn merge(self, file: Self) -> Self {
                Self {
                    config: self.config,
                    $($o: self.$o.or(file.$o),)*
                    $($f: self.$f || file.$f,)*
                }
            }
        }
    };
}

merge_impl!(FixturesArgs; opts: seed, classes, dim, shots, ambiguity, sigma, out; flags: );
merge_impl!(TrainArgs;
    opts: data, epochs, episodes_per_epoch, k, class_batch, lr, tau_t, tokens, seed, split, out, checkpoint_every;
    flags: strict);
merge_impl!(EvalArgs;
    opts: data, generator, bank, tau_p, tau_t, metric, shots_exemplar, split, report;
    flags: text_only);
merge_impl!(ExportBankArgs; opts: data, generator, out, shots_exemplar, tau_t, split; flags: );
