//! U-shaped encoder/decoder of NVSS blocks around a vector-quantized bottleneck.
//!
//! Images enter and leave as NCHW; token maps inside the network are NHWC.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vadet_tensor::{checkpoint, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{to_nchw, to_nhwc, BatchNorm, Conv2d, Ctx, DepthwiseConv, LayerNorm, Linear};
use crate::ssm::{ss2d, ScanConfig, ScanParams};
use crate::vq::{quantize, Codebook, COMMITMENT, DEFAULT_CODES};

pub const PATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqMauConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels after patch embedding; doubled by every merge.
    pub base_channels: usize,
    /// Blocks per encoder stage (mirrored in the decoder); its length is the depth.
    pub blocks: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub codes: usize,
    pub commitment: f64,
    pub ssm_state: usize,
    /// Inner width of the scan branch relative to the stage width.
    pub ssm_expand: usize,
}

impl Default for VqMauConfig {
    fn default() -> Self {
        Self {
            in_channels: 16,
            out_channels: 1,
            base_channels: 64,
            blocks: vec![1, 1, 1, 1],
            height: 64,
            width: 64,
            codes: DEFAULT_CODES,
            commitment: COMMITMENT,
            ssm_state: crate::ssm::DEFAULT_STATE,
            ssm_expand: 1,
        }
    }
}

impl VqMauConfig {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Spatial reduction from input to bottleneck.
    pub fn reduction(&self) -> usize {
        PATCH << self.depth().saturating_sub(1)
    }

    /// Width of the bottleneck, which is also the code dimension.
    pub fn code_dim(&self) -> usize {
        self.base_channels << self.depth().saturating_sub(1)
    }

    /// `(channels, height, width)` of every encoder stage.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..self.depth())
            .map(|i| {
                let f = PATCH << i;
                (self.base_channels << i, self.height / f, self.width / f)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return bad(format!("blocks per stage must be ≥ 1, got {:?}", self.blocks));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.codes == 0 || self.ssm_state == 0 {
            return bad("channel counts, codes and state size must be positive".into());
        }
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return bad(format!("base_channels must be a positive multiple of 4, got {}", self.base_channels));
        }
        if self.ssm_expand == 0 {
            return bad("ssm_expand must be ≥ 1".into());
        }
        let r = self.reduction();
        for extent in [self.height, self.width] {
            if extent == 0 || extent % r != 0 {
                return Err(Error::Indivisible { extent, divisor: r });
            }
        }
        Ok(())
    }

    fn scan(&self) -> ScanConfig {
        ScanConfig {
            state: self.ssm_state,
            ..ScanConfig::default()
        }
    }
}

/// Non-overlapping `4×4` patches mapped linearly to `channels` features.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
}

impl PatchEmbed {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Conv2d::new(store, name, in_ch, channels, PATCH, PATCH, 0, true, rng),
        }
    }

    /// `[N, C, H, W]` → `[N, H/4, W/4, channels]`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x);
        for &extent in &s[2..] {
            if extent % PATCH != 0 {
                return Err(Error::Indivisible {
                    extent,
                    divisor: PATCH,
                });
            }
        }
        to_nhwc(cx.tape, self.proj.forward(cx, x)?)
    }
}

/// `2×2` neighbourhood concatenation, layer norm, and a linear map `4c → 2c`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * c),
            reduce: Linear::new(store, &format!("{name}.reduce"), 4 * c, 2 * c, false, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let (n, h, w, c) = dims4(&t.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddExtent(h, w));
        }
        // channel groups ordered (col parity, row parity): (0,0) (1,0) (0,1) (1,1) by row offset first
        let g = t.reshape(x, &[n, h / 2, 2, w / 2, 2, c])?;
        let g = t.permute(g, &[0, 1, 3, 4, 2, 5])?;
        let g = t.reshape(g, &[n, h / 2, w / 2, 4 * c])?;
        self.reduce.forward(cx, self.norm.forward(cx, g)?)
    }
}

/// Linear map `c → 2c`, then the channel groups are laid out as a `2×2`
/// spatial block of `c/2` channels, followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
}

impl PatchExpand {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            expand: Linear::new(store, &format!("{name}.expand"), c, 2 * c, false, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c / 2),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let (n, h, w, c) = dims4(&t.shape(x))?;
        if c % 2 != 0 {
            return Err(Error::OddChannels(c));
        }
        let y = self.expand.forward(cx, x)?;
        let y = t.reshape(y, &[n, h, w, 2, 2, c / 2])?;
        let y = t.permute(y, &[0, 1, 3, 2, 4, 5])?;
        let y = t.reshape(y, &[n, 2 * h, 2 * w, c / 2])?;
        self.norm.forward(cx, y)
    }
}

fn dims4(s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::Tensor(vadet_tensor::TensorError::ShapeMismatch {
            op: "token map",
            detail: format!("expected [N, H, W, C], got {s:?}"),
        })),
    }
}

/// Gated scan sub-block with a residual connection.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub norm: LayerNorm,
    pub in_scan: Linear,
    pub in_gate: Linear,
    pub dwconv: DepthwiseConv,
    pub scans: [ScanParams; 4],
    pub out_norm: LayerNorm,
    pub out: Linear,
}

impl VssBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: &VqMauConfig,
        rng: &mut R,
    ) -> Self {
        let inner = c * cfg.ssm_expand;
        let scan_cfg = cfg.scan();
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            in_scan: Linear::new(store, &format!("{name}.in_scan"), c, inner, false, rng),
            in_gate: Linear::new(store, &format!("{name}.in_gate"), c, inner, false, rng),
            dwconv: DepthwiseConv::new(store, &format!("{name}.dwconv"), inner, 3, rng),
            scans: std::array::from_fn(|k| ScanParams::new(store, &format!("{name}.scan{k}"), inner, &scan_cfg, rng)),
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), inner),
            out: Linear::new(store, &format!("{name}.out"), inner, c, false, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let h = self.norm.forward(cx, x)?;
        let a = self.in_scan.forward(cx, h)?;
        let a = to_nhwc(t, self.dwconv.forward(cx, to_nchw(t, a)?)?)?;
        let a = ss2d(t, cx.store, t.silu(a), &self.scans, cx.chunk)?;
        let a = self.out_norm.forward(cx, a)?;
        let gate = t.silu(self.in_gate.forward(cx, h)?);
        let y = self.out.forward(cx, t.mul(a, gate)?)?;
        Ok(t.add(x, y)?)
    }
}

/// ReLU → 3×3 conv → batch norm after a normalized linear map.
#[derive(Clone, Debug)]
pub struct NeBlock {
    pub norm: LayerNorm,
    pub linear: Linear,
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl NeBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            linear: Linear::new(store, &format!("{name}.linear"), c, c, true, rng),
            conv: Conv2d::new(store, &format!("{name}.conv"), c, c, 3, 1, 1, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let h = t.relu(self.linear.forward(cx, self.norm.forward(cx, x)?)?);
        let h = self.conv.forward(cx, to_nchw(t, h)?)?;
        to_nhwc(t, self.bn.forward(cx, h)?)
    }
}

/// Two passes of scan sub-block then enhancement sub-block, each pass with its
/// own weights; only the second pass adds its input to its output.
#[derive(Clone, Debug)]
pub struct NvssBlock {
    pub passes: [(VssBlock, NeBlock); 2],
}

impl NvssBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: &VqMauConfig,
        rng: &mut R,
    ) -> Self {
        let mut pass = |k: usize| {
            (
                VssBlock::new(store, &format!("{name}.pass{k}.vss"), c, cfg, rng),
                NeBlock::new(store, &format!("{name}.pass{k}.ne"), c, rng),
            )
        };
        let first = pass(0);
        let second = pass(1);
        Self { passes: [first, second] }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let [(vss1, ne1), (vss2, ne2)] = &self.passes;
        let first = ne1.forward(cx, vss1.forward(cx, x)?)?;
        let second = ne2.forward(cx, vss2.forward(cx, first)?)?;
        Ok(cx.tape.add(first, second)?)
    }
}

/// Output of a forward pass.
pub struct Output {
    /// `[N, out_channels, H, W]`.
    pub y: Var,
    pub vq_loss: Var,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct VqMau {
    pub config: VqMauConfig,
    pub embed: PatchEmbed,
    pub encoder: Vec<Vec<NvssBlock>>,
    pub merges: Vec<PatchMerge>,
    pub codebook: Codebook,
    pub expands: Vec<PatchExpand>,
    pub decoder: Vec<Vec<NvssBlock>>,
    pub head_expand: [PatchExpand; 2],
    pub head: Linear,
}

impl VqMau {
    pub fn new<T: Scalar>(config: VqMauConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let cfg = &config;
        let depth = cfg.depth();
        let ch = |i: usize| cfg.base_channels << i;
        let embed = PatchEmbed::new(store, "embed", cfg.in_channels, cfg.base_channels, rng);
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for (i, &count) in cfg.blocks.iter().enumerate() {
            encoder.push(
                (0..count)
                    .map(|b| NvssBlock::new(store, &format!("enc{i}.block{b}"), ch(i), cfg, rng))
                    .collect(),
            );
            if i + 1 < depth {
                merges.push(PatchMerge::new(store, &format!("enc{i}.merge"), ch(i), rng));
            }
        }
        let codebook = Codebook::new(store, "codebook", cfg.codes, cfg.code_dim(), rng);
        let mut expands = Vec::new();
        let mut decoder = Vec::new();
        for j in 0..depth {
            let stage = depth - 1 - j;
            if j > 0 {
                expands.push(PatchExpand::new(store, &format!("dec{stage}.expand"), ch(stage + 1), rng));
            }
            decoder.push(
                (0..cfg.blocks[stage])
                    .map(|b| NvssBlock::new(store, &format!("dec{stage}.block{b}"), ch(stage), cfg, rng))
                    .collect(),
            );
        }
        let c = cfg.base_channels;
        let head_expand = [
            PatchExpand::new(store, "head.expand0", c, rng),
            PatchExpand::new(store, "head.expand1", c / 2, rng),
        ];
        // Only c/4 features feed the output; the usual 0.02 init would leave
        // the first predictions ~20× too small and spend many steps growing them.
        let head = Linear::with_std(
            store,
            "head.proj",
            c / 4,
            cfg.out_channels,
            true,
            ((c / 4) as f64).powf(-0.5),
            rng,
        );
        Ok(Self {
            config,
            embed,
            encoder,
            merges,
            codebook,
            expands,
            decoder,
            head_expand,
            head,
        })
    }

    /// `x: [N, in_channels, H, W]` → prediction `[N, out_channels, H, W]`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Output> {
        let t = cx.tape;
        let cfg = &self.config;
        let s = t.shape(x);
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.height || s[3] != cfg.width {
            return Err(Error::ConfigMismatch(format!(
                "input {s:?}, expected [N, {}, {}, {}]",
                cfg.in_channels, cfg.height, cfg.width
            )));
        }
        let mut h = self.embed.forward(cx, x)?;
        let mut skips = Vec::with_capacity(cfg.depth());
        for (i, blocks) in self.encoder.iter().enumerate() {
            for b in blocks {
                h = b.forward(cx, h)?;
            }
            if let Some(m) = self.merges.get(i) {
                skips.push(h);
                h = m.forward(cx, h)?;
            }
        }
        let q = quantize(t, h, cx.param(self.codebook.table), cfg.commitment)?;
        h = q.z_q;
        for (j, blocks) in self.decoder.iter().enumerate() {
            if j > 0 {
                h = self.expands[j - 1].forward(cx, h)?;
                let skip = skips.pop().expect("one skip per merge");
                h = t.add(h, skip)?;
            }
            for b in blocks {
                h = b.forward(cx, h)?;
            }
        }
        for e in &self.head_expand {
            h = e.forward(cx, h)?;
        }
        let y = to_nchw(t, self.head.forward(cx, h)?)?;
        Ok(Output {
            y,
            vq_loss: q.loss,
            indices: q.indices,
        })
    }

    /// Write the weights to `path` and the config to the JSON sidecar.
    pub fn save<T: Scalar>(&self, store: &ParamStore<T>, path: &Path) -> Result<()> {
        checkpoint::save(store, path)?;
        fs::write(config_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint and its config sidecar.
    pub fn load<T: Scalar>(path: &Path) -> Result<(Self, ParamStore<T>)> {
        let sidecar = config_path(path);
        if !sidecar.exists() {
            return Err(Error::MissingComponent(sidecar));
        }
        let config: VqMauConfig = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, 0)?;
        model.load_weights(&mut store, path)?;
        Ok((model, store))
    }

    /// Load weights saved by a model of identical configuration.
    pub fn load_weights<T: Scalar>(&self, store: &mut ParamStore<T>, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let entries = checkpoint::decode::<T>(&bytes)?;
        store
            .load_named(entries)
            .map_err(|e| Error::CheckpointMismatch(e.to_string()))
    }

    pub fn num_params<T: Scalar>(store: &ParamStore<T>) -> usize {
        store
            .iter()
            .filter(|(_, p)| !p.buffer)
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}

/// `weights.vadet` → `weights.json`.
pub fn config_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Convenience: run a model in evaluation mode on a batch and return its output values.
pub fn infer<T: Scalar>(model: &VqMau, store: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    let tape = vadet_tensor::Tape::new();
    let cx = Ctx::new(&tape, store, false);
    let out = model.forward(&cx, tape.constant(x))?;
    Ok(tape.value(out.y))
}
