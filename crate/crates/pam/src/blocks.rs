//! Block designs: the yaw soft gate, the depthwise residual module (DRM),
//! channel attention (CAM) in SE/CBAM flavors, their composition (PAM), and
//! the embedding-space gated residual baseline (DREAM).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    add, affine, batch_norm, conv2d, global_pool, prelu, relu, scale_per_sample, sigmoid,
    BatchNormState, ConvSpec, Mode, PoolKind, Tensor,
};

/// Soft gate parameters: sigmoid slope and the yaw normalization constant.
#[derive(Debug, Clone, Copy)]
pub struct GateConfig {
    pub k_slope: f64,
    pub yaw_half_range: f64,
}

impl Default for GateConfig {
    fn default() -> GateConfig {
        GateConfig { k_slope: 10.0, yaw_half_range: 45.0 }
    }
}

/// S(y) = 1 / (1 + exp(-k * (|y|/45 - 1))) over yaw degrees in [-90, 90].
/// The coefficient is metadata-driven and never receives gradient.
pub fn soft_gate(yaw_deg: f64, cfg: &GateConfig) -> Result<f64> {
    if !yaw_deg.is_finite() || yaw_deg.abs() > 90.0 {
        return Err(Error::Invalid(format!(
            "yaw degree {yaw_deg} outside the closed interval [-90, 90]"
        )));
    }
    let z = cfg.k_slope * (yaw_deg.abs() / cfg.yaw_half_range - 1.0);
    Ok(1.0 / (1.0 + (-z).exp()))
}

pub fn soft_gates(yaws: &[f64], cfg: &GateConfig) -> Result<Vec<f64>> {
    yaws.iter().map(|&y| soft_gate(y, cfg)).collect()
}

pub(crate) fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).unwrap().requires_grad()
}

/// Convolution flavor inside the DRM residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrmConv {
    /// One 3x3 filter per channel (the default design).
    Depthwise,
    /// Dense 3x3 convolution, the "-C" ablation variant.
    Dense,
}

/// BN - conv3x3 - PReLU - conv3x3 - BN residual branch, gated per sample.
pub struct DrmParams {
    pub channels: usize,
    pub conv: DrmConv,
    pub bn1: BatchNormState,
    pub bn2: BatchNormState,
    pub conv1_w: Tensor,
    pub conv2_w: Tensor,
    pub prelu_slopes: Tensor,
}

impl DrmParams {
    pub fn new(channels: usize, conv: DrmConv, rng: &mut ChaCha8Rng) -> DrmParams {
        let (shape, fan_in) = match conv {
            DrmConv::Depthwise => (vec![channels, 1, 3, 3], 9),
            DrmConv::Dense => (vec![channels, channels, 3, 3], 9 * channels),
        };
        DrmParams {
            channels,
            conv,
            bn1: BatchNormState::new(channels),
            bn2: BatchNormState::new(channels),
            conv1_w: uniform_fan_in(rng, &shape, fan_in),
            conv2_w: uniform_fan_in(rng, &shape, fan_in),
            prelu_slopes: Tensor::full(&[channels], 0.25).requires_grad(),
        }
    }

    fn conv_spec(&self) -> ConvSpec {
        match self.conv {
            DrmConv::Depthwise => ConvSpec::depthwise(self.channels, 3).padding(1),
            DrmConv::Dense => ConvSpec::new(self.channels, self.channels, 3).padding(1),
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("drm.bn1.gamma".into(), self.bn1.gamma.clone()),
            ("drm.bn1.beta".into(), self.bn1.beta.clone()),
            ("drm.conv1.weight".into(), self.conv1_w.clone()),
            ("drm.prelu.slopes".into(), self.prelu_slopes.clone()),
            ("drm.conv2.weight".into(), self.conv2_w.clone()),
            ("drm.bn2.gamma".into(), self.bn2.gamma.clone()),
            ("drm.bn2.beta".into(), self.bn2.beta.clone()),
        ]
    }
}

/// x + gate_b * F(x), where F = BN -> conv -> PReLU -> conv -> BN and gate_b
/// is the per-sample yaw coefficient.
pub fn drm_forward(x: &Tensor, p: &DrmParams, gate: &[f64], mode: Mode) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != p.channels {
        return Err(Error::Shape(format!(
            "drm_forward: input shape {shape:?} does not match {} channels",
            p.channels
        )));
    }
    let spec = p.conv_spec();
    let h = batch_norm(x, &p.bn1, mode)?;
    let h = conv2d(&h, &p.conv1_w, None, &spec)?;
    let h = prelu(&h, &p.prelu_slopes)?;
    let h = conv2d(&h, &p.conv2_w, None, &spec)?;
    let h = batch_norm(&h, &p.bn2, mode)?;
    let gated = scale_per_sample(&h, gate)?;
    add(x, &gated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamVariant {
    /// Average-pooling squeeze only.
    Se,
    /// Average- plus max-pooling squeeze through the shared MLP.
    Cbam,
}

/// Channel attention: pooled statistics through a shared bottleneck MLP and a
/// sigmoid, recalibrating channels of the input.
pub struct CamParams {
    pub channels: usize,
    pub variant: CamVariant,
    pub identity_mapping: bool,
    pub reduction: usize,
    pub mlp_w1: Tensor,
    pub mlp_w2: Tensor,
}

impl CamParams {
    pub fn new(
        channels: usize,
        variant: CamVariant,
        identity_mapping: bool,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<CamParams> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Invalid(format!(
                "reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(CamParams {
            channels,
            variant,
            identity_mapping,
            reduction,
            mlp_w1: uniform_fan_in(rng, &[hidden, channels], channels),
            mlp_w2: uniform_fan_in(rng, &[channels, hidden], hidden),
        })
    }

    /// CBAM flavor without identity mapping, the adopted design.
    pub fn default_design(channels: usize, rng: &mut ChaCha8Rng) -> Result<CamParams> {
        CamParams::new(channels, CamVariant::Cbam, false, 16, rng)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("cam.mlp.w1".into(), self.mlp_w1.clone()),
            ("cam.mlp.w2".into(), self.mlp_w2.clone()),
        ]
    }

    fn mlp(&self, pooled: &Tensor) -> Result<Tensor> {
        let h = affine(pooled, &self.mlp_w1, None)?;
        let h = relu(&h)?;
        affine(&h, &self.mlp_w2, None)
    }
}

/// Multiplies a rank-4 tensor by per-(sample, channel) attention weights.
fn mul_channel_broadcast(x: &Tensor, a: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let as_ = a.shape();
    if xs.len() != 4 || as_ != vec![xs[0], xs[1]] {
        return Err(Error::Shape(format!(
            "channel broadcast: input {xs:?} incompatible with weights {as_:?}"
        )));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let xd = x.to_vec();
    let ad = a.to_vec();
    let mut out = vec![0.0; xd.len()];
    for i in 0..b * c {
        for j in 0..hw {
            out[i * hw + j] = xd[i * hw + j] * ad[i];
        }
    }
    let (px, pa) = (x.clone(), a.clone());
    Tensor::from_op(xs, out, vec![x.clone(), a.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; xd.len()];
        let mut ga = vec![0.0; ad.len()];
        for i in 0..b * c {
            for j in 0..hw {
                gx[i * hw + j] = g[i * hw + j] * ad[i];
                ga[i] += g[i * hw + j] * xd[i * hw + j];
            }
        }
        px.accumulate_grad(&gx);
        pa.accumulate_grad(&ga);
    }))
}

/// Channel recalibration: a = sigmoid(MLP(avg) [+ MLP(max)]); output is
/// x * a, or x + x * a when identity mapping is on.
pub fn cam_forward(x: &Tensor, p: &CamParams) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != p.channels {
        return Err(Error::Shape(format!(
            "cam_forward: input shape {shape:?} does not match {} channels",
            p.channels
        )));
    }
    let avg = global_pool(x, PoolKind::Avg)?;
    let mut logits = p.mlp(&avg)?;
    if p.variant == CamVariant::Cbam {
        let mx = global_pool(x, PoolKind::Max)?;
        logits = add(&logits, &p.mlp(&mx)?)?;
    }
    let attention = sigmoid(&logits)?;
    let recalibrated = mul_channel_broadcast(x, &attention)?;
    if p.identity_mapping {
        add(x, &recalibrated)
    } else {
        Ok(recalibrated)
    }
}

/// Pose attention module: DRM first, then CAM on the aggregated features.
pub struct PamParams {
    pub drm: DrmParams,
    pub cam: CamParams,
}

impl PamParams {
    /// Adopted design: depthwise DRM + CBAM CAM without identity mapping.
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Result<PamParams> {
        Ok(PamParams {
            drm: DrmParams::new(channels, DrmConv::Depthwise, rng),
            cam: CamParams::default_design(channels, rng)?,
        })
    }

    pub fn with_conv(channels: usize, conv: DrmConv, rng: &mut ChaCha8Rng) -> Result<PamParams> {
        Ok(PamParams {
            drm: DrmParams::new(channels, conv, rng),
            cam: CamParams::default_design(channels, rng)?,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.drm.params();
        out.extend(self.cam.params());
        out
    }
}

pub fn pam_forward(x: &Tensor, p: &PamParams, gate: &[f64], mode: Mode) -> Result<Tensor> {
    let h = drm_forward(x, &p.drm, gate, mode)?;
    cam_forward(&h, &p.cam)
}

/// Gated two-layer residual on the final embedding, the DREAM baseline.
pub struct DreamParams {
    pub dim: usize,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl DreamParams {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> DreamParams {
        DreamParams {
            dim,
            fc1_w: uniform_fan_in(rng, &[dim, dim], dim),
            fc1_b: Tensor::zeros(&[dim]).requires_grad(),
            fc2_w: uniform_fan_in(rng, &[dim, dim], dim),
            fc2_b: Tensor::zeros(&[dim]).requires_grad(),
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("dream.fc1.weight".into(), self.fc1_w.clone()),
            ("dream.fc1.bias".into(), self.fc1_b.clone()),
            ("dream.fc2.weight".into(), self.fc2_w.clone()),
            ("dream.fc2.bias".into(), self.fc2_b.clone()),
        ]
    }
}

/// e + gate_b * R(e), R = affine -> ReLU -> affine on the embedding.
pub fn dream_forward(e: &Tensor, p: &DreamParams, gate: &[f64]) -> Result<Tensor> {
    let shape = e.shape();
    if shape.len() != 2 || shape[1] != p.dim {
        return Err(Error::Shape(format!(
            "dream_forward: embedding shape {shape:?} does not match dimension {}",
            p.dim
        )));
    }
    let h = affine(e, &p.fc1_w, Some(&p.fc1_b))?;
    let h = relu(&h)?;
    let h = affine(&h, &p.fc2_w, Some(&p.fc2_b))?;
    let gated = scale_per_sample(&h, gate)?;
    add(e, &gated)
}
