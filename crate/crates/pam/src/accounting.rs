//! Exact trainable-parameter and multiply-accumulate counting.
//!
//! Parameter counts walk constructed parameter arrays (BN running statistics
//! are not parameters and never appear in the lists being counted). MAC
//! counts follow H_out * W_out * C_out * (C_in/groups) * k^2, i.e.
//! multiplications only.

use crate::blocks::{DreamParams, DrmConv, PamParams};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tensor};

/// Number of trainable scalars across a named parameter list.
pub fn count_params(params: &[(String, Tensor)]) -> u64 {
    params.iter().map(|(_, t)| t.len() as u64).sum()
}

/// Closed form for the adopted PAM design at channel width `c` (reduction 16).
pub fn pam_closed_form(c: u64) -> u64 {
    23 * c + c * c / 8
}

/// Closed form for the dense-convolution ablation variant.
pub fn pam_dense_closed_form(c: u64) -> u64 {
    5 * c + 18 * c * c + c * c / 8
}

/// Multiplications performed by one convolution over an HxW input.
pub fn count_macs(spec: &ConvSpec, h: usize, w: usize) -> Result<u64> {
    spec.validate()?;
    let ho = spec.out_extent(h)? as u64;
    let wo = spec.out_extent(w)? as u64;
    let cig = (spec.in_channels / spec.groups) as u64;
    let k = spec.kernel_size as u64;
    Ok(ho * wo * spec.out_channels as u64 * cig * k * k)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCost {
    pub name: String,
    pub param_count: u64,
    pub mac_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub name: String,
    pub per_block: Vec<BlockCost>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.per_block.iter().map(|b| b.param_count).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.per_block.iter().map(|b| b.mac_count).sum()
    }

    /// One `key=value` record per block plus a totals line.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        for b in &self.per_block {
            out.push_str(&format!(
                "report={} block={} params={} macs={}\n",
                self.name, b.name, b.param_count, b.mac_count
            ));
        }
        out.push_str(&format!(
            "report={} block=TOTAL params={} macs={}\n",
            self.name,
            self.total_params(),
            self.total_macs()
        ));
        out
    }
}

/// Per-placement cost of the PAM blocks themselves, counted from constructed
/// parameter arrays. Spatial extents give each block its MAC figure.
pub fn placement_report(
    name: &str,
    stage_channels: &[usize; 4],
    stage_extents: &[usize; 4],
    stages_with_pam: &[usize],
    conv: DrmConv,
) -> Result<CostReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut per_block = Vec::new();
    for &s in stages_with_pam {
        if !(1..=4).contains(&s) {
            return Err(Error::Invalid(format!("stage {s} outside 1..=4")));
        }
        let c = stage_channels[s - 1];
        let ext = stage_extents[s - 1];
        let pam = PamParams::with_conv(c, conv, &mut rng)?;
        let params = count_params(&pam.params());
        let conv_spec = match conv {
            DrmConv::Depthwise => ConvSpec::depthwise(c, 3).padding(1),
            DrmConv::Dense => ConvSpec::new(c, c, 3).padding(1),
        };
        // two residual convs plus the two MLP matmuls of the CAM
        let macs = 2 * count_macs(&conv_spec, ext, ext)?
            + 2 * 2 * (c as u64 * (c / 16) as u64);
        per_block.push(BlockCost { name: format!("pam{s}(C={c})"), param_count: params, mac_count: macs });
    }
    Ok(CostReport { name: name.to_string(), per_block })
}

/// Cost of the DREAM baseline block on a `dim`-wide embedding.
pub fn dream_report(dim: usize) -> CostReport {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let p = DreamParams::new(dim, &mut rng);
    let params = count_params(&p.params());
    let macs = 2 * (dim as u64 * dim as u64);
    CostReport {
        name: format!("dream(d={dim})"),
        per_block: vec![BlockCost { name: "dream".into(), param_count: params, mac_count: macs }],
    }
}

/// Renders reports side by side with a delta column against the named
/// baseline report.
pub fn compare(reports: &[CostReport], baseline: &str) -> Result<String> {
    let base = reports
        .iter()
        .find(|r| r.name == baseline)
        .ok_or_else(|| Error::Invalid(format!("baseline report '{baseline}' not found")))?;
    let base_params = base.total_params() as i64;
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(8);
    let mut out = format!("{:width$}  {:>14}  {:>14}\n", "report", "params", "delta");
    for r in reports {
        let delta = r.total_params() as i64 - base_params;
        out.push_str(&format!(
            "{:width$}  {:>14}  {:>+14}\n",
            r.name,
            r.total_params(),
            delta
        ));
    }
    Ok(out)
}
