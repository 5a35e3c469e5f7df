//! 4-stage residual backbone with optional pose attention at stage ends.
//!
//! The trunk is a plain pre-activation residual stack; its only contract is
//! the stage count, stage-end channel widths, and the embedding dimension.
//! Checkpoints are a little-endian binary container of named parameter and
//! buffer arrays; round trips are bit-exact.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    pam_forward, soft_gates, CamParams, CamVariant, DrmConv, DrmParams, GateConfig, PamParams,
};
use crate::error::{Error, Result};
use crate::tensor::{
    add, affine, batch_norm, conv2d, global_pool, prelu, BatchNormState, ConvSpec, Mode, PoolKind,
    Tensor,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub embedding_dim: usize,
    /// Bottleneck reduction of every inserted CAM.
    pub cam_reduction: usize,
}

impl BackboneConfig {
    /// The accounting profile: 112x112 input, stage widths {64,128,256,512}.
    pub fn reference() -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            input_size: 112,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            embedding_dim: 512,
            cam_reduction: 16,
        }
    }

    /// Small profile for the training harness: 32x32 single-channel input.
    pub fn toy() -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            input_size: 32,
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: [1, 1, 1, 1],
            embedding_dim: 64,
            cam_reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.input_size == 0
            || self.embedding_dim == 0
            || self.cam_reduction == 0
        {
            return Err(Error::Config("backbone extents must be positive".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0)
            || self.blocks_per_stage.iter().any(|&b| b == 0)
        {
            return Err(Error::Config("stage widths and depths must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "stage channels must be nondecreasing, got {:?}",
                self.stage_channels
            )));
        }
        // stages 2..4 halve the spatial extent
        if self.input_size % 8 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be divisible by 8",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial extent seen at the end of each stage.
    pub fn stage_extents(&self) -> [usize; 4] {
        let s = self.input_size;
        [s, s / 2, s / 4, s / 8]
    }
}

/// Subset of stages {1,2,3,4} whose ends receive a PAM.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlacementPlan {
    stages: BTreeSet<usize>,
}

impl PlacementPlan {
    pub fn baseline() -> PlacementPlan {
        PlacementPlan::default()
    }

    pub fn from_stages(stages: &[usize]) -> Result<PlacementPlan> {
        let mut set = BTreeSet::new();
        for &s in stages {
            if !(1..=4).contains(&s) {
                return Err(Error::Invalid(format!("stage {s} outside 1..=4")));
            }
            if !set.insert(s) {
                return Err(Error::Invalid(format!("duplicate stage {s}")));
            }
        }
        Ok(PlacementPlan { stages: set })
    }

    /// Parses "baseline" or "PAM" followed by distinct ascending stage digits.
    pub fn parse(text: &str) -> Result<PlacementPlan> {
        if text == "baseline" {
            return Ok(PlacementPlan::baseline());
        }
        let digits = text.strip_prefix("PAM").ok_or_else(|| {
            Error::Invalid(format!("placement '{text}' must be 'baseline' or start with 'PAM'"))
        })?;
        if digits.is_empty() {
            return Err(Error::Invalid("placement 'PAM' names no stages".into()));
        }
        let mut stages = Vec::new();
        let mut last = 0usize;
        for ch in digits.chars() {
            let d = ch
                .to_digit(10)
                .ok_or_else(|| Error::Invalid(format!("placement digit '{ch}' is not 1-4")))?
                as usize;
            if !(1..=4).contains(&d) {
                return Err(Error::Invalid(format!("placement stage {d} outside 1..=4")));
            }
            if d <= last {
                return Err(Error::Invalid(format!(
                    "placement digits must be distinct and ascending in '{text}'"
                )));
            }
            last = d;
            stages.push(d);
        }
        PlacementPlan::from_stages(&stages)
    }

    pub fn render(&self) -> String {
        if self.stages.is_empty() {
            "baseline".to_string()
        } else {
            let mut s = "PAM".to_string();
            for d in &self.stages {
                s.push_str(&d.to_string());
            }
            s
        }
    }

    pub fn contains(&self, stage: usize) -> bool {
        self.stages.contains(&stage)
    }

    pub fn stages(&self) -> Vec<usize> {
        self.stages.iter().copied().collect()
    }

    pub fn is_baseline(&self) -> bool {
        self.stages.is_empty()
    }
}

/// How the per-sample gate coefficient is produced at stage ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Soft gate from yaw metadata (the adopted design).
    Yaw,
    /// S(y) = 1 for every sample, the "without soft gate" ablation.
    FixedOne,
}

struct ResBlock {
    bn1: BatchNormState,
    conv1_w: Tensor,
    spec1: ConvSpec,
    prelu_slopes: Tensor,
    conv2_w: Tensor,
    spec2: ConvSpec,
    bn2: BatchNormState,
    shortcut: Option<(Tensor, ConvSpec)>,
}

impl ResBlock {
    fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> ResBlock {
        let spec1 = ConvSpec::new(in_c, out_c, 3).stride(stride).padding(1);
        let spec2 = ConvSpec::new(out_c, out_c, 3).padding(1);
        let shortcut = if in_c != out_c || stride != 1 {
            let spec = ConvSpec::new(in_c, out_c, 1).stride(stride);
            Some((crate::blocks::uniform_fan_in(rng, &[out_c, in_c, 1, 1], in_c), spec))
        } else {
            None
        };
        ResBlock {
            bn1: BatchNormState::new(in_c),
            conv1_w: crate::blocks::uniform_fan_in(rng, &[out_c, in_c, 3, 3], 9 * in_c),
            spec1,
            prelu_slopes: Tensor::full(&[out_c], 0.25).requires_grad(),
            conv2_w: crate::blocks::uniform_fan_in(rng, &[out_c, out_c, 3, 3], 9 * out_c),
            spec2,
            bn2: BatchNormState::new(out_c),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = batch_norm(x, &self.bn1, mode)?;
        let h = conv2d(&h, &self.conv1_w, None, &self.spec1)?;
        let h = prelu(&h, &self.prelu_slopes)?;
        let h = conv2d(&h, &self.conv2_w, None, &self.spec2)?;
        let h = batch_norm(&h, &self.bn2, mode)?;
        let identity = match &self.shortcut {
            Some((w, spec)) => conv2d(x, w, None, spec)?,
            None => x.clone(),
        };
        add(&identity, &h)
    }

    fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}.bn1.gamma"), self.bn1.gamma.clone()),
            (format!("{prefix}.bn1.beta"), self.bn1.beta.clone()),
            (format!("{prefix}.conv1.weight"), self.conv1_w.clone()),
            (format!("{prefix}.prelu.slopes"), self.prelu_slopes.clone()),
            (format!("{prefix}.conv2.weight"), self.conv2_w.clone()),
            (format!("{prefix}.bn2.gamma"), self.bn2.gamma.clone()),
            (format!("{prefix}.bn2.beta"), self.bn2.beta.clone()),
        ];
        if let Some((w, _)) = &self.shortcut {
            out.push((format!("{prefix}.shortcut.weight"), w.clone()));
        }
        out
    }

}

pub struct Model {
    pub cfg: BackboneConfig,
    pub plan: PlacementPlan,
    pub gate_cfg: GateConfig,
    pub gate_mode: GateMode,
    stem_w: Tensor,
    stem_spec: ConvSpec,
    stem_bn: BatchNormState,
    stem_prelu: Tensor,
    stages: Vec<Vec<ResBlock>>,
    pams: Vec<Option<PamParams>>,
    head_w: Tensor,
    head_b: Tensor,
}

/// Deterministic model construction from a seed.
pub fn build_model(cfg: &BackboneConfig, plan: &PlacementPlan, seed: u64) -> Result<Model> {
    cfg.validate()?;
    for s in plan.stages() {
        let c = cfg.stage_channels[s - 1];
        if c % cfg.cam_reduction != 0 {
            return Err(Error::Config(format!(
                "CAM reduction {} does not divide stage {s} channels {c}",
                cfg.cam_reduction
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = cfg.stage_channels[0];
    let stem_spec = ConvSpec::new(cfg.in_channels, c1, 3).padding(1);
    let stem_w =
        crate::blocks::uniform_fan_in(&mut rng, &[c1, cfg.in_channels, 3, 3], 9 * cfg.in_channels);
    let stem_bn = BatchNormState::new(c1);
    let stem_prelu = Tensor::full(&[c1], 0.25).requires_grad();

    let mut stages = Vec::new();
    let mut pams = Vec::new();
    let mut in_c = c1;
    for s in 0..4 {
        let out_c = cfg.stage_channels[s];
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks_per_stage[s] {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            blocks.push(ResBlock::new(in_c, out_c, stride, &mut rng));
            in_c = out_c;
        }
        stages.push(blocks);
        if plan.contains(s + 1) {
            pams.push(Some(PamParams {
                drm: DrmParams::new(out_c, DrmConv::Depthwise, &mut rng),
                cam: CamParams::new(out_c, CamVariant::Cbam, false, cfg.cam_reduction, &mut rng)?,
            }));
        } else {
            pams.push(None);
        }
    }
    let c4 = cfg.stage_channels[3];
    let head_w = crate::blocks::uniform_fan_in(&mut rng, &[cfg.embedding_dim, c4], c4);
    let head_b = Tensor::zeros(&[cfg.embedding_dim]).requires_grad();
    Ok(Model {
        cfg: cfg.clone(),
        plan: plan.clone(),
        gate_cfg: GateConfig::default(),
        gate_mode: GateMode::Yaw,
        stem_w,
        stem_spec,
        stem_bn,
        stem_prelu,
        stages,
        pams,
        head_w,
        head_b,
    })
}

impl Model {
    /// Embeddings for a batch of images with per-sample yaw metadata.
    pub fn forward_extract(&self, images: &Tensor, yaws: &[f64], mode: Mode) -> Result<Tensor> {
        let shape = images.shape();
        let expect = vec![shape[0], self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size];
        if shape != expect {
            return Err(Error::Shape(format!(
                "forward_extract: image shape {shape:?}, expected {expect:?}"
            )));
        }
        let batch = shape[0];
        if yaws.len() != batch {
            return Err(Error::Shape(format!("{} yaws for batch of {batch}", yaws.len())));
        }
        let gates = match self.gate_mode {
            GateMode::Yaw => soft_gates(yaws, &self.gate_cfg)?,
            GateMode::FixedOne => {
                // still validate the yaw metadata range
                soft_gates(yaws, &self.gate_cfg)?;
                vec![1.0; batch]
            }
        };
        let mut h = conv2d(images, &self.stem_w, None, &self.stem_spec)?;
        h = batch_norm(&h, &self.stem_bn, mode)?;
        h = prelu(&h, &self.stem_prelu)?;
        for s in 0..4 {
            for block in &self.stages[s] {
                h = block.forward(&h, mode)?;
            }
            if let Some(pam) = &self.pams[s] {
                h = pam_forward(&h, pam, &gates, mode)?;
            }
        }
        let pooled = global_pool(&h, PoolKind::Avg)?;
        affine(&pooled, &self.head_w, Some(&self.head_b))
    }

    /// All trainable parameters in a stable order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("stem.conv.weight".to_string(), self.stem_w.clone()),
            ("stem.bn.gamma".to_string(), self.stem_bn.gamma.clone()),
            ("stem.bn.beta".to_string(), self.stem_bn.beta.clone()),
            ("stem.prelu.slopes".to_string(), self.stem_prelu.clone()),
        ];
        for s in 0..4 {
            for (b, block) in self.stages[s].iter().enumerate() {
                out.extend(block.params(&format!("stage{}.block{b}", s + 1)));
            }
            if let Some(pam) = &self.pams[s] {
                for (name, t) in pam.params() {
                    out.push((format!("stage{}.{name}", s + 1), t));
                }
            }
        }
        out.push(("head.weight".to_string(), self.head_w.clone()));
        out.push(("head.bias".to_string(), self.head_b.clone()));
        out
    }

    /// Parameters belonging to inserted PAM blocks only.
    pub fn pam_named_params(&self) -> Vec<(String, Tensor)> {
        self.named_params().into_iter().filter(|(n, _)| n.contains(".drm.") || n.contains(".cam.")).collect()
    }

    pub fn param_count(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.len() as u64).sum()
    }

    fn bn_entries(&self) -> Vec<(String, &BatchNormState)> {
        let mut out: Vec<(String, &BatchNormState)> = vec![("stem.bn".to_string(), &self.stem_bn)];
        for s in 0..4 {
            for (b, block) in self.stages[s].iter().enumerate() {
                out.push((format!("stage{}.block{b}.bn1", s + 1), &block.bn1));
                out.push((format!("stage{}.block{b}.bn2", s + 1), &block.bn2));
            }
            if let Some(pam) = &self.pams[s] {
                out.push((format!("stage{}.drm.bn1", s + 1), &pam.drm.bn1));
                out.push((format!("stage{}.drm.bn2", s + 1), &pam.drm.bn2));
            }
        }
        out
    }

    /// Non-trainable running statistics, named for checkpointing.
    pub fn named_buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, bn) in self.bn_entries() {
            out.push((format!("{name}.running_mean"), bn.running_mean.borrow().clone()));
            out.push((format!("{name}.running_var"), bn.running_var.borrow().clone()));
        }
        out
    }

    fn set_buffer(&self, name: &str, data: &[f64]) -> Result<()> {
        for (bn_name, bn) in self.bn_entries() {
            if name == format!("{bn_name}.running_mean") {
                if bn.running_mean.borrow().len() != data.len() {
                    return Err(Error::Checkpoint(format!("buffer {name} length mismatch")));
                }
                bn.running_mean.borrow_mut().copy_from_slice(data);
                return Ok(());
            }
            if name == format!("{bn_name}.running_var") {
                if bn.running_var.borrow().len() != data.len() {
                    return Err(Error::Checkpoint(format!("buffer {name} length mismatch")));
                }
                bn.running_var.borrow_mut().copy_from_slice(data);
                return Ok(());
            }
        }
        Err(Error::Checkpoint(format!("unknown buffer {name}")))
    }
}

const CKPT_MAGIC: &[u8; 8] = b"PAMCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointEcho {
    backbone: BackboneConfig,
    plan: String,
    gate_mode: GateMode,
    gate_k_slope: f64,
}

fn write_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn array(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 array name".into()))?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, shape, data))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let echo = CheckpointEcho {
        backbone: model.cfg.clone(),
        plan: model.plan.render(),
        gate_mode: model.gate_mode,
        gate_k_slope: model.gate_cfg.k_slope,
    };
    let echo_json =
        serde_json::to_vec(&echo).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let params = model.named_params();
    let buffers = model.named_buffers();

    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(0u8); // dtype tag: f64
    out.extend_from_slice(&(echo_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&echo_json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        write_array(&mut out, name, &t.shape(), &t.data());
    }
    out.extend_from_slice(&(buffers.len() as u32).to_le_bytes());
    for (name, data) in &buffers {
        write_array(&mut out, name, &[data.len()], data);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, expected {CKPT_VERSION}"
        )));
    }
    let dtype = r.u8()?;
    if dtype != 0 {
        return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
    }
    let echo_len = r.u32()? as usize;
    let echo: CheckpointEcho = serde_json::from_slice(r.take(echo_len)?)
        .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let plan = PlacementPlan::parse(&echo.plan)?;
    let mut model = build_model(&echo.backbone, &plan, 0)?;
    model.gate_mode = echo.gate_mode;
    model.gate_cfg.k_slope = echo.gate_k_slope;

    let params = model.named_params();
    let n_params = r.u32()? as usize;
    if n_params != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n_params} parameter arrays, model has {}",
            params.len()
        )));
    }
    for (name, t) in &params {
        let (got_name, shape, data) = r.array()?;
        if &got_name != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: expected {name}, found {got_name}"
            )));
        }
        if shape != t.shape() {
            return Err(Error::Checkpoint(format!("parameter {name} shape mismatch")));
        }
        t.set_data(&data);
    }
    let n_buffers = r.u32()? as usize;
    for _ in 0..n_buffers {
        let (name, _shape, data) = r.array()?;
        model.set_buffer(&name, &data)?;
    }
    Ok(model)
}
