//! AUC report over a scores file.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use vadet_core::scoring::{clip_fusion, Auc, ScoreSeries, Source};

use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip_id: String,
    pub frames: usize,
    pub auc_fp: f64,
    pub auc_fr: f64,
    pub auc_fused: f64,
    /// "FP" or "FR": the stream the fused series was taken from.
    pub selection: String,
    /// The clip holds a single class; its AUCs are 0.5 by convention.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipReport>,
    /// `None` when the pooled labels hold a single class.
    pub overall_fused: Option<f64>,
    /// Prediction stream alone ("without FR").
    pub overall_fp: Option<f64>,
    /// Reconstruction stream alone ("without FP").
    pub overall_fr: Option<f64>,
    pub degenerate: bool,
}

fn defined(a: Auc) -> Option<f64> {
    (!a.degenerate).then_some(a.value)
}

/// Fuse `series` (overwriting any stored fused column) and collect the AUCs.
pub fn evaluate(series: &mut [ScoreSeries]) -> CliResult<EvalReport> {
    let fusion = clip_fusion(series)?;
    let clips = series
        .iter()
        .zip(&fusion.clips)
        .map(|(s, c)| ClipReport {
            clip_id: s.clip_id.clone(),
            frames: s.labels.len(),
            auc_fp: c.auc_p.value,
            auc_fr: c.auc_r.value,
            auc_fused: c.auc_fused.value,
            selection: match c.source {
                Source::Prediction => "FP",
                Source::Reconstruction => "FR",
            }
            .to_string(),
            degenerate: c.auc_p.degenerate,
        })
        .collect();
    Ok(EvalReport {
        clips,
        overall_fused: defined(fusion.overall),
        overall_fp: defined(fusion.overall_p),
        overall_fr: defined(fusion.overall_r),
        degenerate: fusion.overall.degenerate,
    })
}

impl EvalReport {
    /// Mean of the per-clip AUCs of (prediction, fused), skipping single-class clips.
    pub fn mean_clip_aucs(&self) -> Option<(f64, f64)> {
        let kept: Vec<&ClipReport> = self.clips.iter().filter(|c| !c.degenerate).collect();
        if kept.is_empty() {
            return None;
        }
        let n = kept.len() as f64;
        Some((
            kept.iter().map(|c| c.auc_fp).sum::<f64>() / n,
            kept.iter().map(|c| c.auc_fused).sum::<f64>() / n,
        ))
    }

    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>6} {:>8} {:>8} {:>8}  sel", "clip", "frames", "auc_fp", "auc_fr", "fused");
        for c in &self.clips {
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>8.4} {:>8.4} {:>8.4}  {}{}",
                c.clip_id,
                c.frames,
                c.auc_fp,
                c.auc_fr,
                c.auc_fused,
                c.selection,
                if c.degenerate { "  (single class)" } else { "" }
            );
        }
        let _ = writeln!(s, "overall fused AUC: {}", fmt(self.overall_fused));
        let _ = writeln!(s, "overall AUC w/o FR (prediction only): {}", fmt(self.overall_fp));
        let _ = writeln!(s, "overall AUC w/o FP (reconstruction only): {}", fmt(self.overall_fr));
        if self.degenerate {
            let _ = writeln!(s, "degenerate: labels contain a single class");
        }
        s
    }
}
