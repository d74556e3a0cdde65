//! Synthetic grayscale clips of rigid shapes on a torus, with exact optical
//! flow and frame-level anomaly labels.
//!
//! Normal objects move one pixel per frame in a direction fixed by their
//! appearance (shape and tone), so a single frame determines its flow. Test
//! clips contain one anomalous segment: a speed-up, a reversal, or a
//! textured shape never seen in training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::PATCH;

pub const BACKGROUND: f32 = -0.8;
pub const BRIGHT: f32 = 0.9;
pub const DARK: f32 = 0.1;
/// Largest displacement of normal motion, in pixels per frame.
pub const NORMAL_SPEED: i32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per clip.
    pub length: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Anomalies start after this many frames so that every anomalous frame
    /// can be a prediction target.
    pub context: usize,
    pub anomaly_len: (usize, usize),
    /// Speed multiplier of the speed-up anomaly.
    pub speedup: i32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            length: 48,
            train_clips: 8,
            test_clips: 6,
            objects: 3,
            min_size: 7,
            max_size: 11,
            context: 16,
            anomaly_len: (8, 14),
            speedup: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        // the network needs divisibility by 4·2³
        let unit = PATCH * 8;
        if self.height == 0 || self.width == 0 || self.height % unit != 0 || self.width % unit != 0 {
            return Err(Error::BadResolution(self.height, self.width));
        }
        if self.length < self.context + 2 {
            return Err(Error::TooShort {
                length: self.length,
                input: self.context,
            });
        }
        let (lo, hi) = self.anomaly_len;
        if self.test_clips > 0 && (lo == 0 || hi < lo || self.context + hi + 2 > self.length) {
            return Err(Error::Config(format!(
                "anomaly length {lo}..={hi} does not fit after {} context frames in {}-frame clips",
                self.context, self.length
            )));
        }
        if self.min_size == 0 || self.max_size < self.min_size || self.max_size > self.height.min(self.width) {
            return Err(Error::Config(format!("object size range {}..={} invalid", self.min_size, self.max_size)));
        }
        if self.speedup < 3 {
            return Err(Error::Config("speed-up factor must be ≥ 3".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Disc,
    /// Checkered plus sign; only appears as an anomaly.
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tone {
    Bright,
    Dark,
}

impl Tone {
    pub fn value(self) -> f32 {
        match self {
            Tone::Bright => BRIGHT,
            Tone::Dark => DARK,
        }
    }
}

/// Direction of normal motion for an appearance, as `(drow, dcol)`.
pub fn canonical_velocity(shape: Shape, tone: Tone) -> Option<(i32, i32)> {
    let s = NORMAL_SPEED;
    match (shape, tone) {
        (Shape::Square, Tone::Bright) => Some((0, s)),
        (Shape::Square, Tone::Dark) => Some((0, -s)),
        (Shape::Disc, Tone::Bright) => Some((s, 0)),
        (Shape::Disc, Tone::Dark) => Some((-s, 0)),
        (Shape::Cross, _) => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    SpeedUp,
    Reversal,
    NovelShape,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::SpeedUp, AnomalyKind::Reversal, AnomalyKind::NovelShape];
}

/// Motions `start..end` (motion `k` moves frame `k` to `k + 1`) are abnormal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub tone: Tone,
    pub size: usize,
    /// Top-left corner at frame 0, `(row, col)`.
    pub origin: (i64, i64),
    /// Per-motion displacement `(drow, dcol)`; one entry per frame pair.
    pub velocities: Vec<(i32, i32)>,
    /// Frames `[from, to)` in which the object is drawn.
    pub visible: (usize, usize),
}

impl ObjectSpec {
    pub fn position(&self, frame: usize) -> (i64, i64) {
        self.velocities[..frame]
            .iter()
            .fold(self.origin, |(r, c), &(dr, dc)| (r + dr as i64, c + dc as i64))
    }

    pub fn is_visible(&self, frame: usize) -> bool {
        (self.visible.0..self.visible.1).contains(&frame)
    }

    /// Offsets `(dr, dc)` covered by the shape and the intensity at each.
    fn footprint(&self) -> Vec<(i64, i64, f32)> {
        let n = self.size as i64;
        let mut out = Vec::new();
        for dr in 0..n {
            for dc in 0..n {
                // doubled coordinates keep the disc test in integers
                let (y, x) = (2 * dr + 1 - n, 2 * dc + 1 - n);
                let inside = match self.shape {
                    Shape::Square => true,
                    Shape::Disc => y * y + x * x <= n * n,
                    Shape::Cross => {
                        let arm = (n / 3).max(1);
                        (dr >= arm && dr < n - arm) || (dc >= arm && dc < n - arm)
                    }
                };
                if inside {
                    let v = match self.shape {
                        Shape::Cross if (dr / 2 + dc / 2) % 2 == 0 => BRIGHT,
                        Shape::Cross => DARK,
                        _ => self.tone.value(),
                    };
                    out.push((dr, dc, v));
                }
            }
        }
        out
    }

    /// Whether motion `k` (frame `k` → `k + 1`) or mere presence at frame `k + 1`
    /// departs from normal behaviour.
    fn violates(&self, k: usize) -> bool {
        if !self.is_visible(k + 1) {
            return false;
        }
        match canonical_velocity(self.shape, self.tone) {
            None => true,
            Some(v) => self.velocities[k] != v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    /// Later objects are drawn on top of earlier ones.
    pub objects: Vec<ObjectSpec>,
    pub anomaly: Option<AnomalySpec>,
}

impl SceneSpec {
    fn wrap(&self, r: i64, c: i64) -> usize {
        let (h, w) = (self.height as i64, self.width as i64);
        (r.rem_euclid(h) * w + c.rem_euclid(w)) as usize
    }

    /// `[H·W]` frame in `[-1, 1]`.
    pub fn render(&self, frame: usize) -> Vec<f32> {
        let mut img = vec![BACKGROUND; self.height * self.width];
        for o in self.objects.iter().filter(|o| o.is_visible(frame)) {
            let (r0, c0) = o.position(frame);
            for (dr, dc, v) in o.footprint() {
                img[self.wrap(r0 + dr, c0 + dc)] = v;
            }
        }
        img
    }

    /// `[H·W·2]` displacement `(dx, dy)` of every pixel of frame `k` into frame `k + 1`;
    /// the topmost object decides, background is static.
    pub fn analytic_flow(&self, k: usize) -> Vec<f32> {
        let mut flow = vec![0.0; self.height * self.width * 2];
        for o in self.objects.iter().filter(|o| o.is_visible(k)) {
            let (r0, c0) = o.position(k);
            let (dr, dc) = o.velocities[k];
            for (r, c, _) in o.footprint() {
                let p = self.wrap(r0 + r, c0 + c);
                flow[2 * p] = dc as f32;
                flow[2 * p + 1] = dr as f32;
            }
        }
        flow
    }

    /// Frame `k` is anomalous iff some object arrives at it by abnormal motion
    /// or with an abnormal appearance.
    pub fn labels(&self) -> Vec<u8> {
        (0..self.length)
            .map(|k| {
                let bad = k > 0 && self.objects.iter().any(|o| o.violates(k - 1));
                let novel_first = k == 0 && self.objects.iter().any(|o| o.is_visible(0) && o.shape == Shape::Cross);
                u8::from(bad || novel_first)
            })
            .collect()
    }

    /// The same scene played backwards.
    pub fn reversed(&self) -> Self {
        let last = self.length - 1;
        let objects = self
            .objects
            .iter()
            .map(|o| ObjectSpec {
                origin: o.position(last),
                velocities: o.velocities.iter().rev().map(|&(r, c)| (-r, -c)).collect(),
                visible: (self.length - o.visible.1, self.length - o.visible.0),
                ..o.clone()
            })
            .collect();
        Self {
            objects,
            anomaly: None,
            ..self.clone()
        }
    }
}

/// One generated clip: frames `[T, H, W]`, flows `[T−1, H, W, 2]`, labels `[T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynClip {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f32>,
    pub flows: Vec<f32>,
    pub labels: Vec<u8>,
    pub spec: SceneSpec,
}

impl SynClip {
    pub fn from_spec(id: impl Into<String>, spec: SceneSpec) -> Self {
        let frames = (0..spec.length).flat_map(|k| quantize_frame(&spec.render(k))).collect();
        let flows = (0..spec.length - 1).flat_map(|k| spec.analytic_flow(k)).collect();
        Self {
            id: id.into(),
            height: spec.height,
            width: spec.width,
            frames,
            flows,
            labels: spec.labels(),
            spec,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.frames[k * n..(k + 1) * n]
    }

    /// Flow `k` interleaved as `[H, W, 2]`.
    pub fn flow(&self, k: usize) -> &[f32] {
        let n = self.height * self.width * 2;
        &self.flows[k * n..(k + 1) * n]
    }

    /// Flow `k` as planar `[2, H, W]` (dx plane then dy plane).
    pub fn flow_planar(&self, k: usize) -> Vec<f32> {
        let f = self.flow(k);
        let n = self.height * self.width;
        let mut out = vec![0.0; 2 * n];
        for p in 0..n {
            out[p] = f[2 * p];
            out[n + p] = f[2 * p + 1];
        }
        out
    }

    /// `input` consecutive frames ending right before `target`, stacked `[input, H, W]`.
    pub fn window(&self, target: usize, input: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.frames[(target - input) * n..target * n]
    }
}

/// Round to the 16-bit grid used on disk so that saving is lossless.
fn quantize_frame(img: &[f32]) -> Vec<f32> {
    img.iter().map(|&v| from_u16(to_u16(v))).collect()
}

fn to_u16(v: f32) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 32767.5).round()) as u16
}

fn from_u16(q: u16) -> f32 {
    q as f32 / 32767.5 - 1.0
}

/// Train clips (all normal) and test clips (one anomalous segment each).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SynClip>,
    pub test: Vec<SynClip>,
}

pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let make = |split: u64, count: usize, anomalous: bool| -> Vec<SynClip> {
        let prefix = if anomalous { "test" } else { "train" };
        (0..count)
            .into_par_iter()
            .map(|i| {
                let clip_seed = seed ^ (split << 32 | i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let kind = anomalous.then(|| AnomalyKind::ALL[i % AnomalyKind::ALL.len()]);
                let spec = scene(cfg, clip_seed, kind);
                SynClip::from_spec(format!("{prefix}/clip_{i:03}"), spec)
            })
            .collect()
    };
    Ok(Dataset {
        train: make(1, cfg.train_clips, false),
        test: make(2, cfg.test_clips, true),
    })
}

fn scene(cfg: &SynthConfig, seed: u64, kind: Option<AnomalyKind>) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motions = cfg.length - 1;
    let mut objects: Vec<ObjectSpec> = (0..cfg.objects.max(1))
        .map(|_| {
            let shape = if rng.random_bool(0.5) { Shape::Square } else { Shape::Disc };
            let tone = if rng.random_bool(0.5) { Tone::Bright } else { Tone::Dark };
            let v = canonical_velocity(shape, tone).expect("normal shape");
            ObjectSpec {
                shape,
                tone,
                size: rng.random_range(cfg.min_size..=cfg.max_size),
                origin: (
                    rng.random_range(0..cfg.height) as i64,
                    rng.random_range(0..cfg.width) as i64,
                ),
                velocities: vec![v; motions],
                visible: (0, cfg.length),
            }
        })
        .collect();
    let anomaly = kind.map(|kind| {
        let len = rng.random_range(cfg.anomaly_len.0..=cfg.anomaly_len.1);
        // motion k lands on frame k + 1, which must be a prediction target
        let start = rng.random_range(cfg.context..=motions - len - 1);
        let end = start + len;
        match kind {
            AnomalyKind::SpeedUp => {
                let o = &mut objects[0];
                for v in &mut o.velocities[start..end] {
                    *v = (v.0 * cfg.speedup, v.1 * cfg.speedup);
                }
            }
            AnomalyKind::Reversal => {
                let o = &mut objects[0];
                for v in &mut o.velocities[start..end] {
                    *v = (-v.0, -v.1);
                }
            }
            AnomalyKind::NovelShape => {
                let size = cfg.max_size;
                let dir = if rng.random_bool(0.5) { (0, NORMAL_SPEED) } else { (NORMAL_SPEED, 0) };
                objects.push(ObjectSpec {
                    shape: Shape::Cross,
                    tone: Tone::Bright,
                    size,
                    origin: (
                        rng.random_range(0..cfg.height) as i64,
                        rng.random_range(0..cfg.width) as i64,
                    ),
                    velocities: vec![dir; motions],
                    visible: (start + 1, end + 1),
                });
            }
        }
        AnomalySpec { kind, start, end }
    });
    SceneSpec {
        seed,
        height: cfg.height,
        width: cfg.width,
        length: cfg.length,
        objects,
        anomaly,
    }
}

// ---- file IO ----

const FLOW_MAGIC: &[u8; 4] = b"FLO2";

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn write_pgm16(path: &Path, height: usize, width: usize, pixels: &[f32]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in pixels {
        buf.extend_from_slice(&to_u16(v).to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Returns `(height, width, pixels)`.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    // header: magic, width, height, maxval separated by single whitespace runs
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(corrupt(path, format!("unsupported header {fields:?}")));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| corrupt(path, format!("bad dimension `{s}`")));
    let (width, height) = (dim(&fields[1])?, dim(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 2 * width * height {
        return Err(corrupt(
            path,
            format!("expected {} pixel bytes, found {}", 2 * width * height, body.len()),
        ));
    }
    let pixels = body
        .chunks_exact(2)
        .map(|b| from_u16(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    Ok((height, width, pixels))
}

pub fn write_flow(path: &Path, height: usize, width: usize, flow: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * flow.len());
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for v in flow {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(corrupt(path, "missing FLO2 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (height, width) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != 8 * height * width {
        return Err(corrupt(
            path,
            format!("expected {} flow bytes, found {}", 8 * height * width, body.len()),
        ));
    }
    let flow = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((height, width, flow))
}

pub fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("frames").join(format!("frame_{k:06}.pgm"))
}

pub fn flow_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("flows").join(format!("flow_{k:06}.flo2"))
}

pub fn save_clip(dir: &Path, clip: &SynClip) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("flows"))?;
    for k in 0..clip.len() {
        write_pgm16(&frame_path(dir, k), clip.height, clip.width, clip.frame(k))?;
    }
    for k in 0..clip.len().saturating_sub(1) {
        write_flow(&flow_path(dir, k), clip.height, clip.width, clip.flow(k))?;
    }
    let mut labels = fs::File::create(dir.join("labels.txt"))?;
    for l in &clip.labels {
        writeln!(labels, "{l}")?;
    }
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&clip.spec)?)?;
    Ok(())
}

/// Sorted file names in `dir` with the given extension.
fn listing(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingComponent(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_clip(dir: &Path) -> Result<SynClip> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for part in ["labels.txt", "spec.json"] {
        if !dir.join(part).exists() {
            return Err(Error::MissingComponent(dir.join(part)));
        }
    }
    let spec_path = dir.join("spec.json");
    let spec: SceneSpec = serde_json::from_str(&fs::read_to_string(&spec_path)?)
        .map_err(|e| corrupt(&spec_path, e.to_string()))?;
    let (height, width) = (spec.height, spec.width);

    let mut frames = Vec::new();
    let frame_files = listing(&dir.join("frames"), "pgm")?;
    for path in &frame_files {
        let (h, w, px) = read_pgm16(path)?;
        if (h, w) != (height, width) {
            return Err(corrupt(path, format!("{h}×{w} frame in a {height}×{width} clip")));
        }
        frames.extend(px);
    }
    let mut flows = Vec::new();
    let flow_files = listing(&dir.join("flows"), "flo2")?;
    for path in &flow_files {
        let (h, w, f) = read_flow(path)?;
        if (h, w) != (height, width) {
            return Err(corrupt(path, format!("{h}×{w} flow in a {height}×{width} clip")));
        }
        flows.extend(f);
    }
    let labels_path = dir.join("labels.txt");
    let labels = fs::read_to_string(&labels_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(corrupt(&labels_path, format!("label `{other}`"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    let t = frame_files.len();
    if labels.len() != t || flow_files.len() + 1 != t || t != spec.length {
        return Err(corrupt(
            dir,
            format!(
                "{t} frames, {} flows, {} labels, spec length {}",
                flow_files.len(),
                labels.len(),
                spec.length
            ),
        ));
    }
    Ok(SynClip {
        id,
        height,
        width,
        frames,
        flows,
        labels,
        spec,
    })
}

/// Directory name of a clip: its id without the split prefix.
pub fn clip_dir_name(id: &str) -> &str {
    id.rsplit('/').next().unwrap_or(id)
}

/// Clips are stored as `root/{train,test}/<name>` and read back with ids
/// `"{split}/<name>"`, so ids stay unique across splits.
pub fn save_dataset(root: &Path, data: &Dataset) -> Result<()> {
    for (split, clips) in [("train", &data.train), ("test", &data.test)] {
        clips
            .par_iter()
            .try_for_each(|c| save_clip(&root.join(split).join(clip_dir_name(&c.id)), c))?;
    }
    Ok(())
}

fn load_split(root: &Path, split: &str) -> Result<Vec<SynClip>> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::MissingComponent(dir.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.par_iter()
        .map(|d| {
            let mut c = load_clip(d)?;
            c.id = format!("{split}/{}", c.id);
            Ok(c)
        })
        .collect()
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: load_split(root, "train")?,
        test: load_split(root, "test")?,
    })
}

/// Fraction of pixels of frame `k + 1` not reproduced by forward-warping frame
/// `k` along flow `k` (holes count as mismatches).
pub fn warp_mismatch(clip: &SynClip, k: usize) -> f64 {
    let (h, w) = (clip.height as i64, clip.width as i64);
    let src = clip.frame(k);
    let flow = clip.flow(k);
    let mut warped = vec![f32::NAN; src.len()];
    // static pixels first so that moving objects land on top
    for moving in [false, true] {
        for r in 0..h {
            for c in 0..w {
                let p = (r * w + c) as usize;
                let (dx, dy) = (flow[2 * p], flow[2 * p + 1]);
                if (dx != 0.0 || dy != 0.0) != moving {
                    continue;
                }
                let q = ((r + dy as i64).rem_euclid(h) * w + (c + dx as i64).rem_euclid(w)) as usize;
                warped[q] = src[p];
            }
        }
    }
    let next = clip.frame(k + 1);
    let bad = warped.iter().zip(next).filter(|(a, b)| *a != *b).count();
    bad as f64 / next.len() as f64
}
