//! Evaluation report: a versioned JSON document plus plain-text tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use modref_core::fusion::Metric;
use serde::{Deserialize, Serialize};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    #[serde(rename = "T")]
    pub text: f64,
    #[serde(rename = "V")]
    pub vision: Option<f64>,
    #[serde(rename = "VT")]
    pub multimodal: Option<f64>,
    pub fused: Option<f64>,
}

/// Comparison of `metric = mean` fusion against a direct average of the
/// three probability matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFusionCheck {
    pub max_abs_diff: f64,
    pub labels_agree: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRow {
    pub class: String,
    /// Metric scores in `preference_columns` order.
    pub alpha: [f64; 3],
    pub alpha_hat: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub data: String,
    pub split: String,
    pub classes: usize,
    pub targets: usize,
    pub shots_exemplar: usize,
    pub tau_t: f64,
    pub tau_p: f64,
    pub metric: Metric,
    pub accuracy: Accuracy,
    /// Fused accuracy under every preference metric.
    pub fused_by_metric: BTreeMap<String, f64>,
    pub mean_fusion_check: Option<MeanFusionCheck>,
    pub preference_columns: [String; 3],
    pub preferences: Vec<PreferenceRow>,
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn render_tables(&self) -> String {
        let mut s = String::new();
        let a = &self.accuracy;
        let _ = writeln!(
            s,
            "accuracy (%) on {} targets, {} classes, {} exemplars/class",
            self.targets, self.classes, self.shots_exemplar
        );
        let _ = writeln!(s, "  {:<8}{:>8}", "T", pct(Some(a.text)));
        let _ = writeln!(s, "  {:<8}{:>8}", "V", pct(a.vision));
        let _ = writeln!(s, "  {:<8}{:>8}", "VT", pct(a.multimodal));
        let _ = writeln!(
            s,
            "  {:<8}{:>8}   metric={} tau_p={}",
            "fused",
            pct(a.fused),
            self.metric,
            self.tau_p
        );
        if !self.fused_by_metric.is_empty() {
            let _ = writeln!(s, "fused accuracy (%) by preference metric");
            for (m, v) in &self.fused_by_metric {
                let _ = writeln!(s, "  {:<10}{:>8}", m, pct(Some(*v)));
            }
        }
        if let Some(c) = &self.mean_fusion_check {
            let _ = writeln!(
                s,
                "mean-fusion cross-check: max |diff| {:.2e}, labels agree {} -> {}",
                c.max_abs_diff,
                c.labels_agree,
                if c.passed { "ok" } else { "MISMATCH" }
            );
        }
        if !self.preferences.is_empty() {
            let [c0, c1, c2] = &self.preference_columns;
            let _ = writeln!(s, "per-class preferences ({}): score | weight", self.metric);
            let _ = writeln!(
                s,
                "  {:<12}{:>7}{:>7}{:>7} |{:>7}{:>7}{:>7}",
                "class", c0, c1, c2, c0, c1, c2
            );
            for r in &self.preferences {
                let _ = writeln!(
                    s,
                    "  {:<12}{:>7.3}{:>7.3}{:>7.3} |{:>7.3}{:>7.3}{:>7.3}",
                    r.class,
                    r.alpha[0],
                    r.alpha[1],
                    r.alpha[2],
                    r.alpha_hat[0],
                    r.alpha_hat[1],
                    r.alpha_hat[2]
                );
            }
        }
        s
    }
}
