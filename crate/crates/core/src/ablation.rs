//! Ablation table: one metrics row per pipeline mode over a test set.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{MetricsReport, OperatingPoint};
use crate::fusion::{Combine, ImageInference, PipelineMode, PipelineModels, PipelineOptions};
use crate::prob_map::ProbabilityMap;
use crate::raster::FundusImage;

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: PipelineMode,
    pub result: std::result::Result<MetricsReport, String>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub fixed_threshold: f64,
    pub rows: Vec<AblationRow>,
}

#[derive(Serialize)]
struct RowJson<'a> {
    mode: String,
    name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    auc_pr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fixed: Option<&'a OperatingPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_f1: Option<&'a OperatingPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

impl AblationReport {
    pub fn row(&self, mode: PipelineMode) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.mode == mode).and_then(|r| r.result.as_ref().ok())
    }

    pub fn auc(&self, mode: PipelineMode) -> Option<f64> {
        self.row(mode).map(|r| r.auc_pr)
    }

    /// Relative PR-AUC gain of `mode` over `baseline`, when both rows exist.
    pub fn improvement(&self, baseline: PipelineMode, mode: PipelineMode) -> Option<f64> {
        Some(relative_improvement(self.auc(baseline)?, self.auc(mode)?))
    }

    pub fn to_table(&self) -> String {
        let t = self.fixed_threshold;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>8} | {:>7} {:>7} {:>7} @{t:<5} | {:>7} {:>7} {:>7} {:>9}",
            "mode", "AUC PR", "F1", "P", "R", "F1*", "P*", "R*", "t*"
        );
        let _ = writeln!(s, "{}", "-".repeat(96));
        for row in &self.rows {
            match &row.result {
                Ok(r) => {
                    let _ = writeln!(
                        s,
                        "{:<16} {:>8.4} | {:>7.4} {:>7.4} {:>7.4} {:6} | {:>7.4} {:>7.4} {:>7.4} {:>9.4}",
                        row.mode.row_name(),
                        r.auc_pr,
                        r.fixed.f1,
                        r.fixed.precision,
                        r.fixed.recall,
                        "",
                        r.best.f1,
                        r.best.precision,
                        r.best.recall,
                        r.best.threshold
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{:<16} error: {e}", row.mode.row_name());
                }
            }
        }
        let _ = writeln!(s, "* operating point maximizing F1 over the precision-recall curve");
        let best = PipelineMode::Prn(Combine::Geometric);
        if let Some(g) = self.improvement(PipelineMode::Hgn1x, best) {
            let _ = writeln!(s, "{} vs {}: {:+.2}% relative AUC PR", best.row_name(), PipelineMode::Hgn1x.row_name(), 100.0 * g);
        }
        s
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<RowJson> = self
            .rows
            .iter()
            .map(|r| RowJson {
                mode: r.mode.to_string(),
                name: r.mode.row_name(),
                auc_pr: r.result.as_ref().ok().map(|m| m.auc_pr),
                fixed: r.result.as_ref().ok().map(|m| &m.fixed),
                best_f1: r.result.as_ref().ok().map(|m| &m.best),
                error: r.result.as_ref().err().map(String::as_str),
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "fixed_threshold": self.fixed_threshold,
            "rows": rows,
        }))
        .expect("report serializes")
    }
}

/// `(value − baseline) / baseline`.
pub fn relative_improvement(baseline: f64, value: f64) -> f64 {
    (value - baseline) / baseline
}

/// Runs every requested mode on raw test images with masks. A failing mode
/// yields an error row; the other rows are still computed. `on_map` sees
/// every produced map.
pub fn ablation_report(
    images: &[FundusImage],
    models: &PipelineModels,
    modes: &[PipelineMode],
    opts: &PipelineOptions,
    fixed_threshold: f64,
    on_map: &mut dyn FnMut(PipelineMode, &ProbabilityMap) -> Result<()>,
) -> Result<AblationReport> {
    let mut unique: Vec<PipelineMode> = Vec::new();
    for &m in modes {
        if !unique.contains(&m) {
            unique.push(m);
        }
    }
    if images.is_empty() {
        return Err(Error::Usage("ablation needs at least one test image".into()));
    }
    let mut scores: Vec<Vec<(f64, bool)>> = vec![Vec::new(); unique.len()];
    let mut errors: Vec<Option<String>> = vec![None; unique.len()];
    for image in images {
        let mask = image
            .mask
            .as_ref()
            .ok_or_else(|| Error::Input(format!("test image `{}` has no mask", image.id)))?;
        let mut inference = ImageInference::new(image, models, opts)?;
        for (k, &mode) in unique.iter().enumerate() {
            if errors[k].is_some() {
                continue;
            }
            match inference.output(mode).and_then(|m| on_map(mode, &m).map(|_| m)) {
                Ok(map) => scores[k].extend(map.values.iter().zip(mask.data()).map(|(&p, &t)| (p, t == 1))),
                Err(e) => errors[k] = Some(e.to_string()),
            }
        }
    }
    let rows = unique
        .into_iter()
        .zip(scores.into_iter().zip(errors))
        .map(|(mode, (s, err))| AblationRow {
            mode,
            result: match err {
                Some(e) => Err(e),
                None => MetricsReport::from_scores(s, fixed_threshold).map_err(|e| e.to_string()),
            },
        })
        .collect();
    Ok(AblationReport { fixed_threshold, rows })
}
