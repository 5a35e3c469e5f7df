use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep over every coordinate of every
/// trainable input.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of a scalar-valued tensor program against
/// central finite differences. The relative error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(Error::Invalid("grad_check step must be positive".into()));
    }
    for t in inputs {
        t.zero_grad();
    }
    let out = f(inputs)?;
    if out.len() != 1 {
        return Err(Error::Invalid("grad_check requires a scalar-valued program".into()));
    }
    out.backward()?;
    let analytic: Vec<Option<Vec<f64>>> = inputs
        .iter()
        .map(|t| {
            if t.is_requires_grad() {
                Some(t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            } else {
                None
            }
        })
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0 };
    for (ti, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        let input = &inputs[ti];
        for ci in 0..input.len() {
            let orig = input.data()[ci];
            input.set_elem(ci, orig + step);
            let plus = f(inputs).map_err(|e| annotate(e, ti, ci))?.value();
            input.set_elem(ci, orig - step);
            let minus = f(inputs).map_err(|e| annotate(e, ti, ci))?.value();
            input.set_elem(ci, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite-difference evaluation at input {ti}, coordinate {ci}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[ci];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, ci));
            }
        }
    }
    Ok(report)
}

fn annotate(e: Error, input: usize, coord: usize) -> Error {
    match e {
        Error::NonFinite(m) => {
            Error::NonFinite(format!("{m} (while perturbing input {input}, coordinate {coord})"))
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{affine, mul, sum};

    #[test]
    fn linear_program_is_exact() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap().requires_grad();
        let w = Tensor::from_vec(&[2, 3], vec![0.3, 0.1, -0.4, 1.0, 0.2, 0.7]).unwrap();
        let report =
            grad_check(|ins| sum(&affine(&ins[0], &w, None)?), std::slice::from_ref(&x), 1e-5)
                .unwrap();
        assert!(report.max_rel_error <= 1e-10, "err {}", report.max_rel_error);
    }

    #[test]
    fn quadratic_program_within_tolerance() {
        let x = Tensor::from_vec(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap().requires_grad();
        let report =
            grad_check(|ins| sum(&mul(&ins[0], &ins[0])?), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-9);
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn corrupted_rule_is_detected() {
        // Sign-flipped "gradient" of sum(x*x) disagrees with finite differences.
        let x = Tensor::from_vec(&[1, 2], vec![1.5, -0.5]).unwrap().requires_grad();
        let broken = |ins: &[Tensor]| -> Result<Tensor> {
            let x = &ins[0];
            let d: Vec<f64> = x.data().to_vec();
            let val: f64 = d.iter().map(|v| v * v).sum();
            let px = x.clone();
            Tensor::from_op(vec![1, 1], vec![val], vec![x.clone()], Box::new(move |g| {
                let gx: Vec<f64> = px.data().iter().map(|v| -2.0 * v * g[0]).collect();
                px.accumulate_grad(&gx);
            }))
        };
        let report = grad_check(broken, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(report.max_rel_error > 1e-2);
    }
}
