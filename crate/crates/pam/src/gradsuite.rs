//! Finite-difference verification suite covering every primitive, every
//! block design, and the margin loss. Shared by the CLI `gradcheck` command
//! and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    cam_forward, dream_forward, drm_forward, pam_forward, CamParams, CamVariant, DreamParams,
    DrmConv, DrmParams, PamParams,
};
use crate::error::{Error, Result};
use crate::harness::loss::margin_loss;
use crate::tensor::{
    add, affine, batch_norm, conv2d, global_pool, grad_check, l2_normalize, mul, prelu,
    scale_per_sample, sigmoid, sum, BatchNormState, ConvSpec, Mode, PoolKind, Tensor,
};

#[derive(Debug, Clone)]
pub struct GradResult {
    pub name: String,
    pub max_rel_error: f64,
    pub seeds: usize,
}

const STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn randomize_bn(state: &BatchNormState, rng: &mut ChaCha8Rng) {
    let c = state.channels();
    for i in 0..c {
        state.gamma.set_elem(i, rng.gen_range(0.5..1.5));
        state.beta.set_elem(i, rng.gen_range(-0.5..0.5));
        state.running_mean.borrow_mut()[i] = rng.gen_range(-0.3..0.3);
        state.running_var.borrow_mut()[i] = rng.gen_range(0.5..1.5);
    }
}

type Check = (&'static str, &'static str, fn(u64) -> Result<f64>);

fn check_conv_standard(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::new(3, 4, 3).padding(1).with_bias();
    let x = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0).requires_grad();
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5).requires_grad();
    let b = rand_tensor(&mut rng, &[4], -0.2, 0.2).requires_grad();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[2, 4, 5, 5], -1.0, 1.0);
    let inputs = [x.clone(), w.clone(), b.clone()];
    let report = grad_check(
        |_| sum(&mul(&conv2d(&x, &w, Some(&b), &spec)?, &probe)?),
        &inputs,
        STEP,
    )?;
    Ok(report.max_rel_error)
}

fn check_conv_strided_grouped(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec { groups: 2, ..ConvSpec::new(4, 6, 3) }.stride(2).padding(1);
    let x = rand_tensor(&mut rng, &[2, 4, 6, 6], -1.0, 1.0).requires_grad();
    let w = rand_tensor(&mut rng, &[6, 2, 3, 3], -0.5, 0.5).requires_grad();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[2, 6, 3, 3], -1.0, 1.0);
    let inputs = [x.clone(), w.clone()];
    let report =
        grad_check(|_| sum(&mul(&conv2d(&x, &w, None, &spec)?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn check_conv_depthwise(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::depthwise(4, 3).padding(1);
    let x = rand_tensor(&mut rng, &[2, 4, 5, 5], -1.0, 1.0).requires_grad();
    let w = rand_tensor(&mut rng, &[4, 1, 3, 3], -0.5, 0.5).requires_grad();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[2, 4, 5, 5], -1.0, 1.0);
    let inputs = [x.clone(), w.clone()];
    let report =
        grad_check(|_| sum(&mul(&conv2d(&x, &w, None, &spec)?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn check_batch_norm(seed: u64, mode: Mode) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = BatchNormState::new(3);
    randomize_bn(&state, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0).requires_grad();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[2, 3, 4, 4], -1.0, 1.0);
    let inputs = [x.clone(), state.gamma.clone(), state.beta.clone()];
    let report = grad_check(|_| sum(&mul(&batch_norm(&x, &state, mode)?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn check_batch_norm_train(seed: u64) -> Result<f64> {
    check_batch_norm(seed, Mode::Train)
}

fn check_batch_norm_eval(seed: u64) -> Result<f64> {
    check_batch_norm(seed, Mode::Eval)
}

fn check_prelu(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0).requires_grad();
    let slopes = rand_tensor(&mut rng, &[3], 0.05, 0.5).requires_grad();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[2, 3, 4, 4], -1.0, 1.0);
    let inputs = [x.clone(), slopes.clone()];
    let report = grad_check(|_| sum(&mul(&prelu(&x, &slopes)?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn check_pool(seed: u64, kind: PoolKind) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0).requires_grad();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[2, 3], -1.0, 1.0);
    let inputs = [x.clone()];
    let report = grad_check(|_| sum(&mul(&global_pool(&x, kind)?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn check_pool_avg(seed: u64) -> Result<f64> {
    check_pool(seed, PoolKind::Avg)
}

fn check_pool_max(seed: u64) -> Result<f64> {
    check_pool(seed, PoolKind::Max)
}

fn check_affine(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0).requires_grad();
    let w = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0).requires_grad();
    let b = rand_tensor(&mut rng, &[4], -0.5, 0.5).requires_grad();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[3, 4], -1.0, 1.0);
    let inputs = [x.clone(), w.clone(), b.clone()];
    let report = grad_check(|_| sum(&mul(&affine(&x, &w, Some(&b))?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn check_elementwise(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[2, 6], -2.0, 2.0).requires_grad();
    let y = rand_tensor(&mut rng, &[2, 6], -2.0, 2.0).requires_grad();
    let inputs = [x.clone(), y.clone()];
    let report = grad_check(
        |_| {
            let s = sigmoid(&x)?;
            let gated = scale_per_sample(&mul(&s, &y)?, &[0.7, 1.3])?;
            sum(&add(&gated, &x)?)
        },
        &inputs,
        STEP,
    )?;
    Ok(report.max_rel_error)
}

fn check_l2_normalize(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[3, 5], 0.2, 2.0).requires_grad();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[3, 5], -1.0, 1.0);
    let inputs = [x.clone()];
    let report = grad_check(|_| sum(&mul(&l2_normalize(&x)?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn drm_check(seed: u64, conv: DrmConv) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = DrmParams::new(8, conv, &mut rng);
    randomize_bn(&p.bn1, &mut rng);
    randomize_bn(&p.bn2, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 8, 5, 5], -1.0, 1.0).requires_grad();
    let gate: Vec<f64> = (0..2).map(|_| rng.gen_range(0.1..0.9)).collect();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[2, 8, 5, 5], -1.0, 1.0);
    let mut inputs = vec![x.clone()];
    inputs.extend(p.params().into_iter().map(|(_, t)| t));
    let report =
        grad_check(|_| sum(&mul(&drm_forward(&x, &p, &gate, Mode::Train)?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn check_drm_depthwise(seed: u64) -> Result<f64> {
    drm_check(seed, DrmConv::Depthwise)
}

fn check_drm_dense(seed: u64) -> Result<f64> {
    drm_check(seed, DrmConv::Dense)
}

fn cam_check(seed: u64, variant: CamVariant, identity: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = CamParams::new(16, variant, identity, 16, &mut rng)?;
    let x = rand_tensor(&mut rng, &[2, 16, 4, 4], -1.0, 1.0).requires_grad();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[2, 16, 4, 4], -1.0, 1.0);
    let mut inputs = vec![x.clone()];
    inputs.extend(p.params().into_iter().map(|(_, t)| t));
    let report = grad_check(|_| sum(&mul(&cam_forward(&x, &p)?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn check_cam_se(seed: u64) -> Result<f64> {
    cam_check(seed, CamVariant::Se, false)
}

fn check_cam_se_identity(seed: u64) -> Result<f64> {
    cam_check(seed, CamVariant::Se, true)
}

fn check_cam_cbam(seed: u64) -> Result<f64> {
    cam_check(seed, CamVariant::Cbam, false)
}

fn check_cam_cbam_identity(seed: u64) -> Result<f64> {
    cam_check(seed, CamVariant::Cbam, true)
}

fn check_pam(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = PamParams::new(16, &mut rng)?;
    randomize_bn(&p.drm.bn1, &mut rng);
    randomize_bn(&p.drm.bn2, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 16, 6, 6], -1.0, 1.0).requires_grad();
    let gate: Vec<f64> = (0..2).map(|_| rng.gen_range(0.1..0.9)).collect();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[2, 16, 6, 6], -1.0, 1.0);
    let mut inputs = vec![x.clone()];
    inputs.extend(p.params().into_iter().map(|(_, t)| t));
    let report = grad_check(
        |_| sum(&mul(&pam_forward(&x, &p, &gate, Mode::Train)?, &probe)?),
        &inputs,
        STEP,
    )?;
    Ok(report.max_rel_error)
}

fn check_dream(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = DreamParams::new(12, &mut rng);
    let e = rand_tensor(&mut rng, &[3, 12], -1.0, 1.0).requires_grad();
    let gate: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..0.9)).collect();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let probe = rand_tensor(&mut probe_rng, &[3, 12], -1.0, 1.0);
    let mut inputs = vec![e.clone()];
    inputs.extend(p.params().into_iter().map(|(_, t)| t));
    let report =
        grad_check(|_| sum(&mul(&dream_forward(&e, &p, &gate)?, &probe)?), &inputs, STEP)?;
    Ok(report.max_rel_error)
}

fn check_margin_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0).requires_grad();
    let w = rand_tensor(&mut rng, &[7, 6], -1.0, 1.0).requires_grad();
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
    let inputs = [e.clone(), w.clone()];
    let report = grad_check(
        |_| {
            let en = l2_normalize(&e)?;
            let wn = l2_normalize(&w)?;
            Ok(margin_loss(&en, &labels, &wn, 8.0, 0.5)?.loss)
        },
        &inputs,
        1e-6,
    )?;
    Ok(report.max_rel_error)
}

const CHECKS: &[Check] = &[
    ("conv2d_standard", "primitive", check_conv_standard),
    ("conv2d_strided_grouped", "primitive", check_conv_strided_grouped),
    ("conv2d_depthwise", "primitive", check_conv_depthwise),
    ("batch_norm_train", "primitive", check_batch_norm_train),
    ("batch_norm_eval", "primitive", check_batch_norm_eval),
    ("prelu", "primitive", check_prelu),
    ("global_pool_avg", "primitive", check_pool_avg),
    ("global_pool_max", "primitive", check_pool_max),
    ("affine", "primitive", check_affine),
    ("elementwise_sigmoid_scale", "primitive", check_elementwise),
    ("l2_normalize", "primitive", check_l2_normalize),
    ("drm_depthwise", "drm", check_drm_depthwise),
    ("drm_dense", "drm", check_drm_dense),
    ("cam_se", "cam", check_cam_se),
    ("cam_se_identity", "cam", check_cam_se_identity),
    ("cam_cbam", "cam", check_cam_cbam),
    ("cam_cbam_identity", "cam", check_cam_cbam_identity),
    ("pam_full", "pam", check_pam),
    ("dream", "dream", check_dream),
    ("margin_loss", "loss", check_margin_loss),
];

pub fn target_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = CHECKS.iter().map(|(_, group, _)| *group).collect();
    v.dedup();
    v
}

/// Runs each selected check over `n_seeds` consecutive seeds starting at
/// `seed` and reports the per-check maximum relative error.
pub fn run(target: &str, seed: u64, n_seeds: usize) -> Result<Vec<GradResult>> {
    let selected: Vec<&Check> = CHECKS
        .iter()
        .filter(|(_, group, _)| target == "all" || target == *group)
        .collect();
    if selected.is_empty() {
        return Err(Error::Invalid(format!("no gradient checks match target '{target}'")));
    }
    let mut out = Vec::with_capacity(selected.len());
    for (name, _, f) in selected {
        let mut worst: f64 = 0.0;
        for s in 0..n_seeds {
            worst = worst.max(f(seed + s as u64)?);
        }
        out.push(GradResult { name: (*name).to_string(), max_rel_error: worst, seeds: n_seeds });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_three_seeds() {
        for r in run("all", 0, 3).unwrap() {
            assert!(r.max_rel_error <= 1e-5, "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn unknown_target_rejected() {
        assert!(run("bogus", 0, 1).is_err());
    }
}
