//! `vadet`: synthetic data, two-stage training, scoring, evaluation and benchmarks.

pub mod bench;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use vadet_core::net::{config_path, VqMauConfig};
use vadet_core::scoring::{clip_fusion, write_scores_csv, NormScope, ScoreSeries, DEFAULT_SIGMA};
use vadet_core::synthvid::{generate_dataset, load_dataset, save_dataset, Dataset, SynthConfig};
use vadet_core::trainer::{score_checkpoints, train_fp, train_fr, TrainConfig, TrainOutcome};

pub use error::{CliError, CliResult};
pub use manifest::RunManifest;

#[derive(Parser, Debug, Clone)]
#[command(name = "vadet", version, about = "Video anomaly detection with a VQ selective-scan U-Net")]
pub struct Cli {
    /// JSON run config (sections `data`, `train`, `score`); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true, env = "VADET_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Dataset root written by `generate-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, loss logs and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Input length of the predictor.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Continue from the last checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Render the synthetic train/test clips with labels and flows.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_clips: Option<usize>,
        #[arg(long)]
        test_clips: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train the frame predictor.
    TrainFp(TrainArgs),
    /// Train the flow reconstructor on a frozen predictor.
    TrainFr {
        #[command(flatten)]
        train: TrainArgs,
        /// Predictor checkpoint (`fp_best.vadet`).
        #[arg(long)]
        fp: PathBuf,
    },
    /// Score every test clip and write `scores.csv`.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fp: PathBuf,
        #[arg(long)]
        fr: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-clip and overall AUCs of a scores file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Directory for `report.json`; defaults to the directory of `--scores`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the sequential and chunked scans.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_LENGTHS)]
        lengths: Vec<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// Train and score at several predictor input lengths.
    ExperimentT {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = experiment::DEFAULT_TS)]
        ts: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::TrainFp(_) => "train-fp",
            Command::TrainFr { .. } => "train-fr",
            Command::Score { .. } => "score",
            Command::Eval { .. } => "eval",
            Command::BenchScan { .. } => "bench-scan",
            Command::ExperimentT { .. } => "experiment-t",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub scope: NormScope,
    pub sigma: Option<f64>,
}

impl ScoreConfig {
    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(DEFAULT_SIGMA)
    }
}

/// Everything a run can be configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub train: TrainConfig,
    /// Overrides of `train` for the flow reconstructor; unset fields inherit.
    pub fr: Option<serde_json::Value>,
    pub score: ScoreConfig,
    pub bench: bench::BenchConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// `train` with the `fr` overrides applied.
    pub fn fr_train(&self) -> CliResult<TrainConfig> {
        let Some(over) = &self.fr else {
            return Ok(self.train.clone());
        };
        let mut base = serde_json::to_value(&self.train)?;
        if let (Some(b), Some(o)) = (base.as_object_mut(), over.as_object()) {
            for (k, v) in o {
                b.insert(k.clone(), v.clone());
            }
        } else {
            return Err(CliError::Config("`fr` must be an object".into()));
        }
        serde_json::from_value(base).map_err(|e| CliError::Config(format!("fr: {e}")))
    }
}

fn apply_train_args(cfg: &mut TrainConfig, args: &TrainArgs, seed: Option<u64>) {
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(t) = args.t {
        cfg.t = t;
    }
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resume = args.resume;
    cfg.checkpoint_dir = args.out.clone();
}

pub fn load_data(root: &Path) -> CliResult<Dataset> {
    load_dataset(root).map_err(|e| CliError::Data(format!("{}: {e}", root.display())))
}

/// Input length a predictor checkpoint was built for.
pub fn checkpoint_t(fp: &Path) -> CliResult<usize> {
    let sidecar = config_path(fp);
    let text = fs::read_to_string(&sidecar).map_err(|e| CliError::Data(format!("{}: {e}", sidecar.display())))?;
    let cfg: VqMauConfig = serde_json::from_str(&text)?;
    Ok(cfg.in_channels)
}

/// Gnuplot-readable score curves, one file per clip.
pub fn write_curves(dir: &Path, series: &[ScoreSeries]) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    for s in series {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("{}.dat", s.clip_id.replace('/', "_"))))?);
        writeln!(f, "# frame s_p s_r fused label")?;
        for i in 0..s.labels.len() {
            writeln!(
                f,
                "{} {} {} {} {}",
                s.first_frame + i,
                s.s_p[i],
                s.s_r[i],
                s.fused[i],
                s.labels[i]
            )?;
        }
    }
    Ok(())
}

fn summarize(stage: &str, o: &TrainOutcome) {
    eprintln!(
        "{stage}: {} steps, best validation PSNR {:.2} dB → {}",
        o.steps,
        o.best_val_psnr,
        o.best.display()
    );
}

/// Run one subcommand; returns the manifest it wrote.
pub fn run(cli: &Cli, argv: &[String]) -> CliResult<RunManifest> {
    let start = Instant::now();
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let mut inputs = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    let mut fps = None;
    if let Some(p) = &cli.config {
        inputs.insert("config".to_string(), p.clone());
    }
    let (seed, resolved, manifest_dir) = match &cli.command {
        Command::GenerateData {
            out,
            train_clips,
            test_clips,
            length,
        } => {
            let d = &mut cfg.data;
            if let Some(n) = train_clips {
                d.train_clips = *n;
            }
            if let Some(n) = test_clips {
                d.test_clips = *n;
            }
            if let Some(n) = length {
                d.length = *n;
            }
            let seed = cli.seed.unwrap_or(0);
            let data = generate_dataset(d, seed)?;
            save_dataset(out, &data)?;
            eprintln!("wrote {} train and {} test clips to {}", data.train.len(), data.test.len(), out.display());
            outputs.insert("data".into(), out.clone());
            (seed, serde_json::to_value(&cfg.data)?, out.clone())
        }
        Command::TrainFp(args) => {
            apply_train_args(&mut cfg.train, args, cli.seed);
            let data = load_data(&args.data)?;
            let o = train_fp::<f32>(&data.train, &cfg.train)?;
            summarize("train-fp", &o);
            inputs.insert("data".into(), args.data.clone());
            outputs.insert("checkpoint".into(), o.best.clone());
            (cfg.train.seed, serde_json::to_value(&cfg.train)?, args.out.clone())
        }
        Command::TrainFr { train: args, fp } => {
            let mut tc = cfg.fr_train()?;
            apply_train_args(&mut tc, args, cli.seed);
            if args.t.is_none() {
                tc.t = checkpoint_t(fp)?;
            }
            let data = load_data(&args.data)?;
            let o = train_fr::<f32>(&data.train, fp, &tc)?;
            summarize("train-fr", &o);
            inputs.insert("data".into(), args.data.clone());
            inputs.insert("fp".into(), fp.clone());
            outputs.insert("checkpoint".into(), o.best.clone());
            (tc.seed, serde_json::to_value(&tc)?, args.out.clone())
        }
        Command::Score { data, fp, fr, out } => {
            let t = checkpoint_t(fp)?;
            let began = Instant::now();
            let clips = load_data(data)?.test;
            let mut run = score_checkpoints::<f32>(fp, fr, &clips, t, cfg.score.scope, cfg.score.sigma())?;
            clip_fusion(&mut run.series)?;
            fs::create_dir_all(out)?;
            let scores = out.join("scores.csv");
            write_scores_csv(&scores, &run.series)?;
            write_curves(&out.join("curves"), &run.series)?;
            // the clock covers loading, both networks, scoring and writing
            let frames: usize = run.series.iter().map(|s| s.labels.len()).sum();
            fps = Some(frames as f64 / began.elapsed().as_secs_f64().max(1e-9));
            eprintln!("scored {frames} frames at {:.1} FPS → {}", fps.unwrap_or(0.0), scores.display());
            inputs.insert("data".into(), data.clone());
            inputs.insert("fp".into(), fp.clone());
            inputs.insert("fr".into(), fr.clone());
            outputs.insert("scores".into(), scores);
            outputs.insert("curves".into(), out.join("curves"));
            (cli.seed.unwrap_or(0), serde_json::to_value(&cfg.score)?, out.clone())
        }
        Command::Eval { scores, out } => {
            let mut series = vadet_core::scoring::read_scores_csv(scores)?;
            let report = eval::evaluate(&mut series)?;
            print!("{}", report.render());
            let dir = out
                .clone()
                .unwrap_or_else(|| scores.parent().map(Path::to_path_buf).unwrap_or_default());
            fs::create_dir_all(&dir)?;
            let path = dir.join("report.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            inputs.insert("scores".into(), scores.clone());
            outputs.insert("report".into(), path);
            (cli.seed.unwrap_or(0), serde_json::Value::Null, dir)
        }
        Command::BenchScan { lengths, reps, out } => {
            if let Some(r) = reps {
                cfg.bench.reps = *r;
            }
            if let Some(s) = cli.seed {
                cfg.bench.seed = s;
            }
            let rows = bench::bench_scan(lengths, &cfg.bench)?;
            println!("{:>6} {:>14} {:>14}", "L", "naive ns/elem", "fast ns/elem");
            for r in &rows {
                println!("{:>6} {:>14.3} {:>14.3}", r.len, r.naive_ns_per_elem, r.fast_ns_per_elem);
            }
            for (w, ratio) in rows.windows(2).zip(bench::fast_ratios(&rows)) {
                println!("fast time ratio L={}→{}: {ratio:.2}", w[0].len, w[1].len);
            }
            fs::create_dir_all(out)?;
            let path = out.join("bench_scan.csv");
            bench::write_csv(&path, &rows)?;
            outputs.insert("bench".into(), path);
            (cfg.bench.seed, serde_json::to_value(&cfg.bench)?, out.clone())
        }
        Command::ExperimentT {
            data,
            out,
            ts,
            epochs,
            max_steps,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = *max_steps;
            }
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let fr = cfg.fr_train()?;
            let dataset = load_data(data)?;
            let table = experiment::run(&dataset, ts, &cfg.train, &fr, &cfg.score, out)?;
            print!("{}", table.render());
            inputs.insert("data".into(), data.clone());
            outputs.insert("table".into(), out.join(experiment::TABLE_FILE));
            (cfg.train.seed, serde_json::to_value(&cfg)?, out.clone())
        }
    };
    let manifest = RunManifest {
        subcommand: cli.command.name().to_string(),
        argv: argv.to_vec(),
        config: resolved,
        seed,
        build: manifest::build_id(),
        inputs,
        outputs,
        wall_seconds: start.elapsed().as_secs_f64(),
        fps,
    };
    manifest.write(&manifest_dir.join(format!("manifest_{}.json", cli.command.name())))?;
    Ok(manifest)
}
