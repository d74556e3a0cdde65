//! Detection quality as a function of the predictor input length.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vadet_core::scoring::write_scores_csv;
use vadet_core::synthvid::Dataset;
use vadet_core::trainer::{score_checkpoints, train_fp, train_fr, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::eval::{evaluate, EvalReport};
use crate::ScoreConfig;

pub const DEFAULT_TS: [usize; 4] = [4, 8, 12, 16];
pub const TABLE_FILE: &str = "table.csv";
pub const POOLED_FILE: &str = "table_pooled.csv";

/// Rows FP and MIX, one column per input length. Cells are per-clip AUCs
/// averaged over the test clips; the pooled variant scores the concatenation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub ts: Vec<usize>,
    pub fp: Vec<f64>,
    pub mix: Vec<f64>,
    pub pooled_fp: Vec<Option<f64>>,
    pub pooled_mix: Vec<Option<f64>>,
    pub reports: Vec<EvalReport>,
}

impl ExperimentTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<6}", "method");
        for t in &self.ts {
            let _ = write!(s, " {:>8}", format!("t={t}"));
        }
        s.push('\n');
        for (name, row) in [("FP", &self.fp), ("MIX", &self.mix)] {
            let _ = write!(s, "{name:<6}");
            for v in row {
                let _ = write!(s, " {v:>8.4}");
            }
            s.push('\n');
        }
        s
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        let header: Vec<String> = std::iter::once("method".to_string())
            .chain(self.ts.iter().map(|t| format!("t={t}")))
            .collect();
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for (file, rows) in [
            (
                TABLE_FILE,
                [
                    ("FP", self.fp.iter().map(|&v| Some(v)).collect::<Vec<_>>()),
                    ("MIX", self.mix.iter().map(|&v| Some(v)).collect()),
                ],
            ),
            (POOLED_FILE, [("FP", self.pooled_fp.clone()), ("MIX", self.pooled_mix.clone())]),
        ] {
            let mut w = csv::Writer::from_path(dir.join(file))?;
            w.write_record(&header)?;
            for (name, values) in rows {
                let mut rec = vec![name.to_string()];
                rec.extend(values.into_iter().map(cell));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Train both stages and score the test split at every `t`.
pub fn run(
    data: &Dataset,
    ts: &[usize],
    fp_cfg: &TrainConfig,
    fr_cfg: &TrainConfig,
    score: &ScoreConfig,
    out: &Path,
) -> CliResult<ExperimentTable> {
    if ts.is_empty() || ts.contains(&0) {
        return Err(CliError::Config("input lengths must be ≥ 1".into()));
    }
    fs::create_dir_all(out)?;
    let mut table = ExperimentTable {
        ts: ts.to_vec(),
        fp: vec![],
        mix: vec![],
        pooled_fp: vec![],
        pooled_mix: vec![],
        reports: vec![],
    };
    for &t in ts {
        let dir = out.join(format!("t{t}"));
        let fp = train_fp::<f32>(
            &data.train,
            &TrainConfig {
                t,
                checkpoint_dir: dir.clone(),
                ..fp_cfg.clone()
            },
        )?;
        let fr = train_fr::<f32>(
            &data.train,
            &fp.best,
            &TrainConfig {
                t,
                checkpoint_dir: dir.clone(),
                ..fr_cfg.clone()
            },
        )?;
        let mut run = score_checkpoints::<f32>(&fp.best, &fr.best, &data.test, t, score.scope, score.sigma())?;
        let report = evaluate(&mut run.series)?;
        write_scores_csv(&dir.join("scores.csv"), &run.series)?;
        let (fp_auc, mix_auc) = report
            .mean_clip_aucs()
            .ok_or_else(|| CliError::Data("every test clip holds a single class".into()))?;
        eprintln!("t = {t}: FP {fp_auc:.4}, MIX {mix_auc:.4}");
        table.fp.push(fp_auc);
        table.mix.push(mix_auc);
        table.pooled_fp.push(report.overall_fp);
        table.pooled_mix.push(report.overall_fused);
        table.reports.push(report);
    }
    table.write(out)?;
    Ok(table)
}
