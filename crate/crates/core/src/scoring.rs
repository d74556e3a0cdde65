//! Per-frame anomaly scores, clip-level fusion and frame-level AUC.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PSNR of an identical pair.
pub const PSNR_CAP: f64 = 100.0;
/// Peak-to-peak range of frames stored in `[-1, 1]`.
pub const FRAME_PEAK: f64 = 2.0;
pub const DEFAULT_SIGMA: f64 = 3.0;

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Copy + Into<f64>>(a: &[T], b: &[T], peak: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Min–max normalization to `[0, 1]`; a constant series maps to 0.5.
pub fn normalize_scores(series: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = min_max(series)?;
    Ok(normalize_with(series, lo, hi))
}

fn min_max(series: &[f64]) -> Result<(f64, f64)> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

fn normalize_with(series: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    if hi > lo {
        series.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; series.len()]
    }
}

/// Index into `[0, n)` under half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSigma(sigma));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

/// 1-D Gaussian filter with reflect padding; output length equals input length.
pub fn gaussian_smooth(series: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let kernel = gaussian_kernel(sigma)?;
    let n = series.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let radius = (kernel.len() / 2) as isize;
    Ok((0..n as isize)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| w * series[reflect(i + k as isize - radius, n)])
                .sum::<f64>()
        })
        .collect())
}

/// Outcome of an AUC computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Auc {
    pub value: f64,
    /// Labels contained a single class; `value` is then 0.5 by convention.
    pub degenerate: bool,
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn frame_auc(scores: &[f64], labels: &[u8]) -> Result<Auc> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(Auc {
            value: 0.5,
            degenerate: true,
        });
    }
    // Mann–Whitney U with mid-ranks for ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += mid_rank * order[i..j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j;
    }
    let (p, q) = (positives as f64, negatives as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(Auc {
        value: u / (p * q),
        degenerate: false,
    })
}

/// Which score stream a clip's fused series was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Prediction,
    Reconstruction,
}

/// Scores of one test clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub clip_id: String,
    /// First frame index the series refers to.
    pub first_frame: usize,
    pub s_p: Vec<f64>,
    pub s_r: Vec<f64>,
    pub fused: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoreSeries {
    fn check(&self) -> Result<()> {
        let n = self.labels.len();
        for (what, len) in [("s_p", self.s_p.len()), ("s_r", self.s_r.len())] {
            if len != n {
                return Err(Error::Misalignment {
                    clip: self.clip_id.clone(),
                    detail: format!("{what} has {len} frames, labels have {n}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipFusion {
    pub source: Source,
    pub auc_p: Auc,
    pub auc_r: Auc,
    pub auc_fused: Auc,
}

#[derive(Clone, Debug)]
pub struct FusionResult {
    pub clips: Vec<ClipFusion>,
    pub overall: Auc,
    pub overall_p: Auc,
    pub overall_r: Auc,
}

/// Per clip, keep whichever stream has the higher clip AUC (prediction on
/// ties), then score the concatenation of the kept streams.
pub fn clip_fusion(series: &mut [ScoreSeries]) -> Result<FusionResult> {
    let mut clips = Vec::with_capacity(series.len());
    let (mut all_f, mut all_p, mut all_r, mut all_l) = (vec![], vec![], vec![], vec![]);
    for s in series.iter_mut() {
        s.check()?;
        let auc_p = frame_auc(&s.s_p, &s.labels)?;
        let auc_r = frame_auc(&s.s_r, &s.labels)?;
        let source = if auc_p.value >= auc_r.value {
            Source::Prediction
        } else {
            Source::Reconstruction
        };
        s.fused = match source {
            Source::Prediction => s.s_p.clone(),
            Source::Reconstruction => s.s_r.clone(),
        };
        let auc_fused = frame_auc(&s.fused, &s.labels)?;
        clips.push(ClipFusion {
            source,
            auc_p,
            auc_r,
            auc_fused,
        });
        all_f.extend_from_slice(&s.fused);
        all_p.extend_from_slice(&s.s_p);
        all_r.extend_from_slice(&s.s_r);
        all_l.extend_from_slice(&s.labels);
    }
    Ok(FusionResult {
        clips,
        overall: frame_auc(&all_f, &all_l)?,
        overall_p: frame_auc(&all_p, &all_l)?,
        overall_r: frame_auc(&all_r, &all_l)?,
    })
}

/// Range used for the min–max normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    #[default]
    PerClip,
    Global,
}

/// Turn per-clip PSNR series into anomaly scores: normalize, smooth, then
/// flip so that 1 means anomalous.
pub fn anomaly_scores(psnr_by_clip: &[Vec<f64>], scope: NormScope, sigma: f64) -> Result<Vec<Vec<f64>>> {
    let global = match scope {
        NormScope::Global => Some(min_max(&psnr_by_clip.concat())?),
        NormScope::PerClip => None,
    };
    psnr_by_clip
        .iter()
        .map(|series| {
            let (lo, hi) = match global {
                Some(r) => r,
                None => min_max(series)?,
            };
            let smooth = gaussian_smooth(&normalize_with(series, lo, hi), sigma)?;
            // a convex combination of [0, 1] values; clamp only guards rounding
            Ok(smooth.into_iter().map(|v| (1.0 - v).clamp(0.0, 1.0)).collect())
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    clip_id: String,
    frame_index: usize,
    s_p: f64,
    s_r: f64,
    fused: f64,
    label: u8,
}

pub fn write_scores_csv(path: &Path, series: &[ScoreSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for s in series {
        s.check()?;
        for i in 0..s.labels.len() {
            w.serialize(Row {
                clip_id: s.clip_id.clone(),
                frame_index: s.first_frame + i,
                s_p: s.s_p[i],
                s_r: s.s_r[i],
                fused: s.fused.get(i).copied().unwrap_or(f64::NAN),
                label: s.labels[i],
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read `scores.csv`, grouping consecutive rows by clip.
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreSeries>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out: Vec<ScoreSeries> = Vec::new();
    for row in r.deserialize() {
        let row: Row = row.map_err(csv_err)?;
        match out.last_mut() {
            Some(s) if s.clip_id == row.clip_id => {
                if row.frame_index != s.first_frame + s.labels.len() {
                    return Err(Error::Misalignment {
                        clip: row.clip_id,
                        detail: format!("frame {} out of sequence", row.frame_index),
                    });
                }
                s.s_p.push(row.s_p);
                s.s_r.push(row.s_r);
                s.fused.push(row.fused);
                s.labels.push(row.label);
            }
            _ => out.push(ScoreSeries {
                clip_id: row.clip_id,
                first_frame: row.frame_index,
                s_p: vec![row.s_p],
                s_r: vec![row.s_r],
                fused: vec![row.fused],
                labels: vec![row.label],
            }),
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::MalformedCsv(e.to_string())
}
