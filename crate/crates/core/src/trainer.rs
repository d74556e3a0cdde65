//! Two-stage training (frame prediction first, then flow reconstruction on
//! top of the frozen best predictor) and the scoring pipeline.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vadet_tensor::{checkpoint, AdamW, ParamStore, Scalar, Tape, Tensor};

use crate::error::{Error, Result};
use crate::losses::{
    composite_fp_weighted, composite_fr, gradient_loss, motion_diff_loss_masked, prediction_loss, recon_loss, ssim_loss,
    LossReport,
};
use crate::net::{VqMau, VqMauConfig};
use crate::nn::{apply_updates, Ctx};
use crate::scoring::{anomaly_scores, psnr, NormScope, ScoreSeries, FRAME_PEAK};
use crate::synthvid::SynClip;

/// Peak-to-peak range used for flow PSNR and flow SSIM: normal and sped-up
/// displacements stay within ±4 px/frame.
pub const FLOW_PEAK: f64 = 8.0;
const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Frames fed to the predictor.
    pub t: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Linear ramp from `lr / warmup_steps` to `lr`.
    pub warmup_steps: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    /// How the summed intensity-gradient term enters the predictor objective.
    pub gradient_reduction: GradientReduction,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Validate (and checkpoint) every this many steps, and at the end.
    pub eval_every: usize,
    /// Trailing training clips held out for validation; with a single clip it
    /// doubles as its own validation clip.
    pub val_clips: usize,
    pub checkpoint_dir: PathBuf,
    /// Continue from the last checkpoint in `checkpoint_dir` if one exists.
    pub resume: bool,
    /// Network shape; channel counts and resolution are filled in per stage.
    pub model: VqMauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t: 16,
            epochs: 4,
            max_steps: None,
            batch_size: 4,
            lr: 5e-3,
            warmup_steps: 20,
            schedule: LrSchedule::Cosine,
            weight_decay: 0.01,
            gradient_reduction: GradientReduction::Mean,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 100,
            val_clips: 1,
            checkpoint_dir: PathBuf::from("runs"),
            resume: false,
            model: VqMauConfig {
                base_channels: 16,
                ..VqMauConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("t must be ≥ 1".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("lr must be positive; weight_decay and grad_clip non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate of the 0-based `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        };
        self.lr * warm * decay
    }

    fn model_for(&self, clips: &[SynClip], in_channels: usize, out_channels: usize) -> VqMauConfig {
        VqMauConfig {
            in_channels,
            out_channels,
            height: clips[0].height,
            width: clips[0].width,
            ..self.model.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay to zero over the run.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientReduction {
    /// Plain sum over pixels.
    Sum,
    /// Sum divided by the pixel count, putting it on the scale of a per-pixel error.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Fp,
    Fr,
}

impl Stage {
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Fp => "fp",
            Stage::Fr => "fr",
        }
    }
}

/// Checkpoint file names of one stage inside a run directory.
pub struct RunFiles {
    pub best: PathBuf,
    pub last: PathBuf,
    pub optimizer: PathBuf,
    pub state: PathBuf,
    pub loss_csv: PathBuf,
    pub val_csv: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path, stage: Stage) -> Self {
        let p = stage.prefix();
        Self {
            best: dir.join(format!("{p}_best.vadet")),
            last: dir.join(format!("{p}_last.vadet")),
            optimizer: dir.join(format!("{p}_last.opt.vadet")),
            state: dir.join(format!("{p}_state.json")),
            loss_csv: dir.join(format!("{p}_loss.csv")),
            val_csv: dir.join(format!("{p}_val.csv")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResumeState {
    step: usize,
    best_val_psnr: f64,
}

/// One optimizer step.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub report: LossReport,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// `(clip id, target frame)` of every sample in the batch.
    pub samples: Vec<(String, usize)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: PathBuf,
    pub best_val_psnr: f64,
    pub steps: usize,
    /// Steps run by this call (a resumed run omits earlier ones).
    pub log: Vec<StepLog>,
    /// `(step, validation PSNR)` at every evaluation of this call.
    pub validations: Vec<(usize, f64)>,
}

impl TrainOutcome {
    /// Clip ids that contributed a gradient.
    pub fn clips_seen(&self) -> BTreeSet<String> {
        self.log
            .iter()
            .flat_map(|s| s.samples.iter().map(|(c, _)| c.clone()))
            .collect()
    }
}

/// `(clip index, target frame)` for every target with `t` frames before it.
pub fn windows(clips: &[SynClip], t: usize) -> Vec<(usize, usize)> {
    clips
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (t..c.len()).map(move |k| (i, k)))
        .collect()
}

/// Training clips and validation clips.
pub fn split_validation(train: &[SynClip], val_clips: usize) -> (&[SynClip], &[SynClip]) {
    if train.len() > val_clips && val_clips > 0 {
        train.split_at(train.len() - val_clips)
    } else {
        (train, train)
    }
}

fn to_tensor<T: Scalar>(shape: &[usize], values: impl Iterator<Item = f32>) -> Result<Tensor<T>> {
    Ok(Tensor::new(shape.to_vec(), values.map(|v| T::lit(v as f64)).collect())?)
}

fn check_data(clips: &[SynClip], t: usize) -> Result<()> {
    let Some(first) = clips.first() else {
        return Err(Error::EmptyDataset);
    };
    for c in clips {
        if (c.height, c.width) != (first.height, first.width) {
            return Err(Error::Config(format!("clip {} has a different resolution", c.id)));
        }
        if c.len() < t + 1 {
            return Err(Error::TooShort { length: c.len(), input: t });
        }
        if c.labels.iter().any(|&l| l != 0) {
            return Err(Error::Config(format!("training clip {} contains anomalous frames", c.id)));
        }
    }
    Ok(())
}

/// Run `model` in evaluation mode over `inputs` (each `per_sample` values),
/// returning one output vector per input.
pub fn infer_batched<T: Scalar>(
    model: &VqMau,
    store: &ParamStore<T>,
    inputs: &[Vec<f32>],
) -> Result<Vec<Vec<f32>>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        let x = to_tensor::<T>(
            &[chunk.len(), cfg.in_channels, cfg.height, cfg.width],
            chunk.iter().flat_map(|v| v.iter().copied()),
        )?;
        let y = crate::net::infer(model, store, x)?;
        let per = y.numel() / chunk.len();
        out.extend(
            y.data()
                .chunks(per)
                .map(|s| s.iter().map(|v| v.as_f64() as f32).collect()),
        );
    }
    Ok(out)
}

/// Shared optimisation loop over a list of samples.
struct Loop<'a, T: Scalar> {
    cfg: &'a TrainConfig,
    stage: Stage,
    files: RunFiles,
    model: VqMau,
    store: ParamStore<T>,
    opt: AdamW,
    start: usize,
    best: f64,
    samples: usize,
}

impl<'a, T: Scalar> Loop<'a, T> {
    fn new(cfg: &'a TrainConfig, stage: Stage, model_cfg: VqMauConfig, samples: usize) -> Result<Self> {
        fs::create_dir_all(&cfg.checkpoint_dir)?;
        let files = RunFiles::new(&cfg.checkpoint_dir, stage);
        let mut store = ParamStore::new();
        let model = VqMau::new(model_cfg, &mut store, cfg.seed)?;
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
        let (mut start, mut best) = (0, f64::NEG_INFINITY);
        if cfg.resume && files.state.exists() {
            let state: ResumeState = serde_json::from_str(&fs::read_to_string(&files.state)?)?;
            model.load_weights(&mut store, &files.last)?;
            let opt_state = checkpoint::decode::<f64>(&fs::read(&files.optimizer)?)?;
            opt.load_state(&store, opt_state)
                .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
            start = state.step;
            best = state.best_val_psnr;
            truncate_csv(&files.loss_csv, start)?;
            truncate_csv(&files.val_csv, start)?;
        } else {
            for f in [&files.loss_csv, &files.val_csv] {
                if f.exists() {
                    fs::remove_file(f)?;
                }
            }
        }
        Ok(Self {
            cfg,
            stage,
            files,
            model,
            store,
            opt,
            start,
            best,
            samples,
        })
    }

    fn steps_per_epoch(&self) -> usize {
        self.samples.div_ceil(self.cfg.batch_size)
    }

    fn total_steps(&self) -> usize {
        self.cfg
            .max_steps
            .unwrap_or(self.cfg.epochs * self.steps_per_epoch())
    }

    /// Sample indices of `step`, from a per-epoch shuffle so that resuming
    /// reproduces the order.
    fn batch(&self, step: usize, order: &mut Option<(usize, Vec<usize>)>) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..self.samples).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            idx.shuffle(&mut rng);
            *order = Some((epoch, idx));
        }
        let idx = &order.as_ref().expect("set above").1;
        let pos = (step % spe) * self.cfg.batch_size;
        (epoch, idx[pos..(pos + self.cfg.batch_size).min(self.samples)].to_vec())
    }

    /// Drive the loop. `step_fn` builds the objective for a batch of sample
    /// indices; `validate` returns the validation PSNR of the current weights.
    fn run<S, V>(mut self, mut step_fn: S, mut validate: V) -> Result<TrainOutcome>
    where
        S: FnMut(&Tape<T>, &Ctx<T>, &VqMau, &[usize]) -> Result<(vadet_tensor::Var, LossReport, Vec<(String, usize)>)>,
        V: FnMut(&VqMau, &ParamStore<T>) -> Result<f64>,
    {
        let total = self.total_steps();
        let mut order = None;
        let mut log = Vec::new();
        let mut validations = Vec::new();
        let mut loss_w = csv_appender(&self.files.loss_csv)?;
        let mut val_w = csv_appender(&self.files.val_csv)?;
        for step in self.start..total {
            let (epoch, batch) = self.batch(step, &mut order);
            let tape = Tape::new();
            let (grads, report, samples, updates) = {
                let cx = Ctx::new(&tape, &self.store, true);
                let (loss, report, samples) = step_fn(&tape, &cx, &self.model, &batch)?;
                if !report.total.is_finite() {
                    return Err(Error::NonFiniteLoss(step));
                }
                let grads = tape.backward(loss)?;
                (grads, report, samples, cx.take_updates())
            };
            self.store.zero_grad();
            self.store.accumulate(&grads);
            let grad_norm = if self.cfg.grad_clip > 0.0 {
                self.store.clip_grad_norm(self.cfg.grad_clip)
            } else {
                self.store.grad_norm()
            };
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            self.opt.lr = self.cfg.lr_at(step, total);
            self.opt.step(&mut self.store)?;
            apply_updates(&mut self.store, updates);

            if loss_w.header_needed {
                let mut header = vec!["step".to_string(), "epoch".into()];
                header.extend(report.terms.iter().map(|t| t.0.to_string()));
                header.extend(["total".into(), "grad_norm".into(), "samples".into()]);
                loss_w.write(&header)?;
            }
            let mut row = vec![step.to_string(), epoch.to_string()];
            // the motion term may be absent for a batch; keep columns aligned
            for name in term_names(self.stage) {
                row.push(report.get(name).map(|v| v.to_string()).unwrap_or_default());
            }
            row.push(report.total.to_string());
            row.push(grad_norm.to_string());
            row.push(
                samples
                    .iter()
                    .map(|(c, k)| format!("{c}:{k}"))
                    .collect::<Vec<_>>()
                    .join(";"),
            );
            loss_w.write(&row)?;
            log.push(StepLog {
                step,
                epoch,
                report,
                grad_norm,
                samples,
            });

            let done = step + 1;
            if done % self.cfg.eval_every == 0 || done == total {
                let v = validate(&self.model, &self.store)?;
                validations.push((done, v));
                if val_w.header_needed {
                    val_w.write(&["step".into(), "val_psnr".into(), "best".into()])?;
                }
                let improved = v > self.best;
                if improved {
                    self.best = v;
                    self.model.save(&self.store, &self.files.best)?;
                }
                val_w.write(&[done.to_string(), v.to_string(), improved.to_string()])?;
                self.checkpoint(done)?;
            }
        }
        loss_w.flush()?;
        val_w.flush()?;
        if !self.files.best.exists() {
            // zero steps requested: the initial weights are the best we have
            self.best = validate(&self.model, &self.store)?;
            self.model.save(&self.store, &self.files.best)?;
            self.checkpoint(self.start)?;
        }
        Ok(TrainOutcome {
            best: self.files.best.clone(),
            best_val_psnr: self.best,
            steps: total.max(self.start),
            log,
            validations,
        })
    }

    fn checkpoint(&self, step: usize) -> Result<()> {
        self.model.save(&self.store, &self.files.last)?;
        checkpoint::save(&self.opt.state(&self.store), &self.files.optimizer)?;
        let state = ResumeState {
            step,
            best_val_psnr: self.best,
        };
        fs::write(&self.files.state, serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }
}

fn term_names(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Fp => &["l_p", "l_vq", "l_gd"],
        Stage::Fr => &["l_r", "l_vq", "l_sim", "l_md"],
    }
}

struct CsvAppender {
    writer: csv::Writer<fs::File>,
    header_needed: bool,
}

impl CsvAppender {
    fn write(&mut self, record: &[String]) -> Result<()> {
        self.writer
            .write_record(record)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        self.header_needed = false;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        Ok(self.writer.flush()?)
    }
}

fn csv_appender(path: &Path) -> Result<CsvAppender> {
    let header_needed = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    Ok(CsvAppender {
        writer: csv::WriterBuilder::new().flexible(true).from_writer(file),
        header_needed,
    })
}

/// Drop rows logged at or after `step` (a run interrupted after its last checkpoint).
fn truncate_csv(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let mut kept = String::new();
    if let Some(header) = lines.next() {
        kept.push_str(header);
        kept.push('\n');
    }
    let is_val = path.to_string_lossy().ends_with("_val.csv");
    for line in lines {
        let first: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        // loss rows carry the 0-based step; validation rows the number of steps done
        let keep = if is_val { first <= step } else { first < step };
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Train the frame predictor on normal clips; returns the best checkpoint by
/// validation prediction PSNR.
pub fn train_fp<T: Scalar>(train: &[SynClip], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(train, cfg.t)?;
    let (fit, val) = split_validation(train, cfg.val_clips);
    let samples = windows(fit, cfg.t);
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let val_windows = windows(val, cfg.t);
    let (h, w, t) = (train[0].height, train[0].width, cfg.t);
    let lp = Loop::<T>::new(cfg, Stage::Fp, cfg.model_for(train, t, 1), samples.len())?;

    let step = |tape: &Tape<T>, cx: &Ctx<T>, model: &VqMau, batch: &[usize]| {
        let n = batch.len();
        let x = to_tensor::<T>(
            &[n, t, h, w],
            batch.iter().flat_map(|&i| {
                let (c, k) = samples[i];
                fit[c].window(k, t).iter().copied()
            }),
        )?;
        let y = to_tensor::<T>(
            &[n, 1, h, w],
            batch.iter().flat_map(|&i| {
                let (c, k) = samples[i];
                fit[c].frame(k).iter().copied()
            }),
        )?;
        let out = model.forward(cx, tape.constant(x))?;
        let target = tape.constant(y);
        let lp = prediction_loss(tape, target, out.y)?;
        let gd = gradient_loss(tape, target, out.y)?;
        let gd_weight = match cfg.gradient_reduction {
            GradientReduction::Sum => 1.0,
            GradientReduction::Mean => 1.0 / (h * w) as f64,
        };
        let (loss, report) = composite_fp_weighted(tape, lp, out.vq_loss, gd, gd_weight)?;
        let ids = batch
            .iter()
            .map(|&i| (fit[samples[i].0].id.clone(), samples[i].1))
            .collect();
        Ok((loss, report, ids))
    };
    let validate = |model: &VqMau, store: &ParamStore<T>| -> Result<f64> {
        let inputs: Vec<Vec<f32>> = val_windows.iter().map(|&(c, k)| val[c].window(k, t).to_vec()).collect();
        let preds = infer_batched(model, store, &inputs)?;
        let scores = preds
            .iter()
            .zip(&val_windows)
            .map(|(p, &(c, k))| psnr(p, val[c].frame(k), FRAME_PEAK))
            .collect::<Result<Vec<f64>>>()?;
        Ok(mean(&scores))
    };
    lp.run(step, validate)
}

/// Predicted frames of every window of `clips`, from a frozen predictor.
pub fn predict_frames<T: Scalar>(
    fp: &VqMau,
    fp_store: &ParamStore<T>,
    clips: &[SynClip],
    t: usize,
) -> Result<Vec<Vec<Vec<f32>>>> {
    clips
        .iter()
        .map(|c| {
            let inputs: Vec<Vec<f32>> = (t..c.len()).map(|k| c.window(k, t).to_vec()).collect();
            infer_batched(fp, fp_store, &inputs)
        })
        .collect()
}

/// Load a predictor checkpoint and confirm it fits the data and `t`.
pub fn load_predictor<T: Scalar>(path: &Path, clips: &[SynClip], t: usize) -> Result<(VqMau, ParamStore<T>)> {
    let (model, store) = VqMau::load::<T>(path)?;
    let c = &model.config;
    let first = clips.first().ok_or(Error::EmptyDataset)?;
    if c.in_channels != t || c.out_channels != 1 || (c.height, c.width) != (first.height, first.width) {
        return Err(Error::CheckpointMismatch(format!(
            "predictor expects {} frames of {}×{} → {} channel(s); data is {}×{} with t = {t}",
            c.in_channels, c.height, c.width, c.out_channels, first.height, first.width
        )));
    }
    Ok((model, store))
}

/// Train the flow reconstructor on predictions of the frozen predictor at
/// `fp_path`; returns the best checkpoint by validation flow PSNR.
pub fn train_fr<T: Scalar>(train: &[SynClip], fp_path: &Path, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(train, cfg.t)?;
    let t = cfg.t;
    let (fp, fp_store) = load_predictor::<T>(fp_path, train, t)?;
    let (fit, val) = split_validation(train, cfg.val_clips);
    let samples = windows(fit, t);
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // the predictor is frozen, so its outputs can be computed once
    let fit_pred = predict_frames(&fp, &fp_store, fit, t)?;
    let val_pred = predict_frames(&fp, &fp_store, val, t)?;
    drop(fp_store);
    let (h, w) = (train[0].height, train[0].width);
    let lp = Loop::<T>::new(cfg, Stage::Fr, cfg.model_for(train, 1, 2), samples.len())?;

    let step = |tape: &Tape<T>, cx: &Ctx<T>, model: &VqMau, batch: &[usize]| {
        let n = batch.len();
        let x = to_tensor::<T>(
            &[n, 1, h, w],
            batch.iter().flat_map(|&i| {
                let (c, k) = samples[i];
                fit_pred[c][k - t].iter().copied()
            }),
        )?;
        let flow = to_tensor::<T>(
            &[n, 2, h, w],
            batch.iter().flat_map(|&i| {
                let (c, k) = samples[i];
                fit[c].flow_planar(k - 1)
            }),
        )?;
        // the first window of a clip has no preceding flow sample
        let valid: Vec<bool> = batch.iter().map(|&i| samples[i].1 > t && samples[i].1 >= 2).collect();
        let prev = to_tensor::<T>(
            &[n, 2, h, w],
            batch.iter().zip(&valid).flat_map(|(&i, &ok)| {
                let (c, k) = samples[i];
                if ok {
                    fit[c].flow_planar(k - 2)
                } else {
                    vec![0.0; 2 * h * w]
                }
            }),
        )?;
        let out = model.forward(cx, tape.constant(x))?;
        let target = tape.constant(flow);
        let r = recon_loss(tape, target, out.y)?;
        let sim = ssim_loss(tape, target, out.y, FLOW_PEAK)?;
        let md = motion_diff_loss_masked(tape, target, out.y, tape.constant(prev), &valid)?;
        let (loss, report) = composite_fr(tape, r, out.vq_loss, sim, md)?;
        let ids = batch
            .iter()
            .map(|&i| (fit[samples[i].0].id.clone(), samples[i].1))
            .collect();
        Ok((loss, report, ids))
    };
    let validate = |model: &VqMau, store: &ParamStore<T>| -> Result<f64> {
        let mut scores = Vec::new();
        for (c, preds) in val.iter().zip(&val_pred) {
            let flows = infer_batched(model, store, preds)?;
            for (i, f) in flows.iter().enumerate() {
                scores.push(psnr(f, &c.flow_planar(t + i - 1), FLOW_PEAK)?);
            }
        }
        Ok(mean(&scores))
    };
    lp.run(step, validate)
}

/// Per-clip PSNR series of both tasks.
#[derive(Clone, Debug)]
pub struct ClipPsnr {
    pub prediction: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

/// Run both models over every window of every clip.
pub fn clip_psnrs<T: Scalar>(
    fp: (&VqMau, &ParamStore<T>),
    fr: (&VqMau, &ParamStore<T>),
    clips: &[SynClip],
    t: usize,
) -> Result<Vec<ClipPsnr>> {
    let cfg = &fr.0.config;
    let first = clips.first().ok_or(Error::EmptyDataset)?;
    if cfg.in_channels != 1 || cfg.out_channels != 2 || (cfg.height, cfg.width) != (first.height, first.width) {
        return Err(Error::CheckpointMismatch("flow model does not fit the data".into()));
    }
    let preds = predict_frames(fp.0, fp.1, clips, t)?;
    clips
        .iter()
        .zip(&preds)
        .map(|(c, p)| {
            let flows = infer_batched(fr.0, fr.1, p)?;
            let mut out = ClipPsnr {
                prediction: Vec::with_capacity(p.len()),
                reconstruction: Vec::with_capacity(p.len()),
            };
            for (i, (frame, flow)) in p.iter().zip(&flows).enumerate() {
                let k = t + i;
                out.prediction.push(psnr(frame, c.frame(k), FRAME_PEAK)?);
                out.reconstruction.push(psnr(flow, &c.flow_planar(k - 1), FLOW_PEAK)?);
            }
            Ok(out)
        })
        .collect()
}

/// Scores of every test clip plus the throughput of the whole pipeline.
pub struct ScoreRun {
    pub series: Vec<ScoreSeries>,
    pub psnrs: Vec<ClipPsnr>,
    pub frames: usize,
    pub seconds: f64,
}

impl ScoreRun {
    pub fn fps(&self) -> f64 {
        self.frames as f64 / self.seconds.max(1e-9)
    }
}

/// Load both checkpoints, score `clips` and time it end to end.
pub fn score_checkpoints<T: Scalar>(
    fp_path: &Path,
    fr_path: &Path,
    clips: &[SynClip],
    t: usize,
    scope: NormScope,
    sigma: f64,
) -> Result<ScoreRun> {
    let start = Instant::now();
    let (fp, fp_store) = load_predictor::<T>(fp_path, clips, t)?;
    let (fr, fr_store) = VqMau::load::<T>(fr_path)?;
    let psnrs = clip_psnrs((&fp, &fp_store), (&fr, &fr_store), clips, t)?;
    let series = series_from_psnrs(clips, &psnrs, t, scope, sigma)?;
    let frames = series.iter().map(|s| s.labels.len()).sum();
    Ok(ScoreRun {
        series,
        psnrs,
        frames,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Turn PSNR series into anomaly-score series aligned with the clip labels.
pub fn series_from_psnrs(
    clips: &[SynClip],
    psnrs: &[ClipPsnr],
    t: usize,
    scope: NormScope,
    sigma: f64,
) -> Result<Vec<ScoreSeries>> {
    let p: Vec<Vec<f64>> = psnrs.iter().map(|c| c.prediction.clone()).collect();
    let r: Vec<Vec<f64>> = psnrs.iter().map(|c| c.reconstruction.clone()).collect();
    let s_p = anomaly_scores(&p, scope, sigma)?;
    let s_r = anomaly_scores(&r, scope, sigma)?;
    Ok(clips
        .iter()
        .zip(s_p.into_iter().zip(s_r))
        .map(|(c, (s_p, s_r))| ScoreSeries {
            clip_id: c.id.clone(),
            first_frame: t,
            s_p,
            s_r,
            fused: Vec::new(),
            labels: c.labels[t..].to_vec(),
        })
        .collect())
}
