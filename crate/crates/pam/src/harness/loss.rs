//! Additive angular-margin classification loss.
//!
//! Logits are cosines between L2-normalized embeddings and class weight rows.
//! The target-class cosine cos(theta) is replaced by cos(theta + m) via the
//! algebraic form c*cos(m) - sqrt(1-c^2)*sin(m), then all logits are scaled
//! by s and fed to softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{affine, cross_entropy_mean, Tensor};

pub struct MarginLossOutput {
    pub loss: Tensor,
    /// Samples whose target angle hit theta + m >= pi and were clamped.
    pub clamped: usize,
}

fn check_rows_normalized(t: &Tensor, what: &str) -> Result<()> {
    let shape = t.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let d = t.data();
    for i in 0..rows {
        let norm: f64 = d[i * cols..(i + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "{what} row {i} has norm {norm}, expected L2-normalized input"
            )));
        }
    }
    Ok(())
}

/// Replaces the target-class entry of each logit row by cos(theta + m).
/// Rows whose target satisfies theta + m >= pi are clamped to cos(pi) with a
/// zero local derivative; the caller receives the clamp count.
fn margin_adjust(logits: &Tensor, labels: &[usize], margin: f64) -> Result<(Tensor, usize)> {
    let shape = logits.shape();
    let (b, c) = (shape[0], shape[1]);
    let ld = logits.to_vec();
    let (cos_m, sin_m) = (margin.cos(), margin.sin());
    let clamp_cos = -cos_m; // cos(pi - m)
    let mut out = ld.clone();
    let mut deriv = vec![0.0; b]; // d(adjusted)/d(cos theta) at the target
    let mut clamped = 0usize;
    for i in 0..b {
        let c0 = ld[i * c + labels[i]].clamp(-1.0, 1.0);
        if c0 <= clamp_cos {
            out[i * c + labels[i]] = -1.0;
            deriv[i] = 0.0;
            clamped += 1;
        } else {
            let sin_t = (1.0 - c0 * c0).max(1e-24).sqrt();
            out[i * c + labels[i]] = c0 * cos_m - sin_t * sin_m;
            deriv[i] = cos_m + sin_m * c0 / sin_t;
        }
    }
    let labels_owned = labels.to_vec();
    let px = logits.clone();
    let t = Tensor::from_op(shape, out, vec![logits.clone()], Box::new(move |g| {
        let mut gx = g.to_vec();
        for i in 0..b {
            let j = i * c + labels_owned[i];
            gx[j] = g[j] * deriv[i];
        }
        px.accumulate_grad(&gx);
    }))?;
    Ok((t, clamped))
}

/// Mean margin-softmax loss over a batch. `embeddings` (b, d) and
/// `class_weights` (n_classes, d) must both arrive row-normalized.
pub fn margin_loss(
    embeddings: &Tensor,
    labels: &[usize],
    class_weights: &Tensor,
    scale: f64,
    margin: f64,
) -> Result<MarginLossOutput> {
    if scale <= 0.0 {
        return Err(Error::Invalid("loss scale must be positive".into()));
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
        return Err(Error::Invalid(format!("margin {margin} outside [0, pi/2)")));
    }
    check_rows_normalized(embeddings, "embedding")?;
    check_rows_normalized(class_weights, "class weight")?;
    let cosines = affine(embeddings, class_weights, None)?;
    let (adjusted, clamped) = margin_adjust(&cosines, labels, margin)?;
    let scaled = crate::tensor::scale_per_sample(
        &adjusted,
        &vec![scale; embeddings.shape()[0]],
    )?;
    let loss = cross_entropy_mean(&scaled, labels)?;
    Ok(MarginLossOutput { loss, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, l2_normalize, sum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }

    #[test]
    fn unnormalized_inputs_rejected() {
        let e = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(margin_loss(&e, &[0], &w, 64.0, 0.5).is_err());
    }

    #[test]
    fn zero_margin_is_cosine_softmax() {
        let e = l2_normalize(&random_rows(3, 4, 1)).unwrap();
        let w = l2_normalize(&random_rows(5, 4, 2)).unwrap();
        let labels = [0usize, 3, 2];
        let out = margin_loss(&e, &labels, &w, 64.0, 0.0).unwrap();
        // reference: plain scaled cosine softmax
        let cosines = affine(&e, &w, None).unwrap();
        let scaled = crate::tensor::scale_per_sample(&cosines, &[64.0; 3]).unwrap();
        let reference = cross_entropy_mean(&scaled, &labels).unwrap();
        assert!((out.loss.value() - reference.value()).abs() < 1e-12);
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn aligned_embedding_hand_value() {
        // one sample, two classes, embedding == target weight row (theta = 0)
        let c2 = 0.2;
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, c2, (1.0f64 - c2 * c2).sqrt()]).unwrap();
        let e = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let (s, m) = (64.0, 0.5);
        let out = margin_loss(&e, &[0], &w, s, m).unwrap();
        let target = (s * m.cos()).exp();
        let other = (s * c2).exp();
        let expect = -(target / (target + other)).ln();
        assert!((out.loss.value() - expect).abs() < 1e-9, "{} vs {expect}", out.loss.value());
    }

    #[test]
    fn clamped_targets_are_counted() {
        // embedding opposite to its target weight row: theta = pi
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = Tensor::from_vec(&[1, 2], vec![-1.0, 0.0]).unwrap();
        let out = margin_loss(&e, &[0], &w, 64.0, 0.5).unwrap();
        assert_eq!(out.clamped, 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let e_raw = random_rows(4, 6, 100 + seed).requires_grad();
            let w_raw = random_rows(7, 6, 200 + seed).requires_grad();
            let labels = [0usize, 2, 5, 6];
            let report = grad_check(
                |ins| {
                    let e = l2_normalize(&ins[0])?;
                    let w = l2_normalize(&ins[1])?;
                    // modest scale keeps finite differences well conditioned
                    Ok(margin_loss(&e, &labels, &w, 8.0, 0.5)?.loss)
                },
                &[e_raw, w_raw],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "seed {seed}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn loss_is_scalar_and_backward_runs() {
        let e = l2_normalize(&random_rows(2, 4, 9).requires_grad()).unwrap();
        let w = l2_normalize(&random_rows(3, 4, 10).requires_grad()).unwrap();
        let out = margin_loss(&e, &[1, 2], &w, 64.0, 0.5).unwrap();
        sum(&out.loss).unwrap().backward().unwrap();
    }
}
