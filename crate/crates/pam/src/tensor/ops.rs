use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: operand shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "add")?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(a.shape(), out, vec![a.clone(), b.clone()], Box::new(move |g| {
        pa.accumulate_grad(g);
        pb.accumulate_grad(g);
    }))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "mul")?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    let (da, db) = (a.to_vec(), b.to_vec());
    Tensor::from_op(a.shape(), out, vec![a.clone(), b.clone()], Box::new(move |g| {
        let ga: Vec<f64> = g.iter().zip(&db).map(|(g, y)| g * y).collect();
        let gb: Vec<f64> = g.iter().zip(&da).map(|(g, x)| g * x).collect();
        pa.accumulate_grad(&ga);
        pb.accumulate_grad(&gb);
    }))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let out: Vec<f64> = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let px = x.clone();
    let saved = out.clone();
    Tensor::from_op(x.shape(), out, vec![x.clone()], Box::new(move |g| {
        let gx: Vec<f64> = g.iter().zip(&saved).map(|(g, s)| g * s * (1.0 - s)).collect();
        px.accumulate_grad(&gx);
    }))
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    let out: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
    let px = x.clone();
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    Tensor::from_op(x.shape(), out, vec![x.clone()], Box::new(move |g| {
        let gx: Vec<f64> = g.iter().zip(&mask).map(|(g, &m)| if m { *g } else { 0.0 }).collect();
        px.accumulate_grad(&gx);
    }))
}

/// Sum of all elements, as a 1x1 scalar tensor.
pub fn sum(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().sum();
    let px = x.clone();
    let n = x.len();
    Tensor::from_op(vec![1, 1], vec![s], vec![x.clone()], Box::new(move |g| {
        px.accumulate_grad(&vec![g[0]; n]);
    }))
}

/// Global spatial pooling: rank-4 `(b, c, h, w)` to rank-2 `(b, c)`. Max
/// backward routes the gradient to the first argmax in row-major order.
pub fn global_pool(x: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("global_pool expects rank-4 input, got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let data = x.data();
    let mut out = vec![0.0; b * c];
    let mut argmax = vec![0usize; b * c];
    for i in 0..b * c {
        let plane = &data[i * hw..(i + 1) * hw];
        match kind {
            PoolKind::Avg => out[i] = plane.iter().sum::<f64>() / hw as f64,
            PoolKind::Max => {
                let (mut best_j, mut best) = (0usize, plane[0]);
                for (j, &v) in plane.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[i] = best;
                argmax[i] = best_j;
            }
        }
    }
    drop(data);
    let px = x.clone();
    Tensor::from_op(vec![b, c], out, vec![x.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; b * c * hw];
        for i in 0..b * c {
            match kind {
                PoolKind::Avg => {
                    let share = g[i] / hw as f64;
                    for v in &mut gx[i * hw..(i + 1) * hw] {
                        *v += share;
                    }
                }
                PoolKind::Max => gx[i * hw + argmax[i]] += g[i],
            }
        }
        px.accumulate_grad(&gx);
    }))
}

/// Fully connected layer: `x (b, n) * w (m, n)^T + bias (m)` -> `(b, m)`.
pub fn affine(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 {
        return Err(Error::Shape(format!("affine expects rank-2 operands, got {xs:?} and {ws:?}")));
    }
    let (b, n) = (xs[0], xs[1]);
    let (m, wn) = (ws[0], ws[1]);
    if n != wn {
        return Err(Error::Shape(format!(
            "affine inner dimensions disagree: input feature {n} vs weight column {wn}"
        )));
    }
    if let Some(bt) = bias {
        if bt.len() != m {
            return Err(Error::Shape(format!(
                "affine bias length {} does not match output features {m}",
                bt.len()
            )));
        }
    }
    let xd = x.to_vec();
    let wd = w.to_vec();
    let bd = bias.map(|t| t.to_vec());
    let mut out = vec![0.0; b * m];
    for i in 0..b {
        for j in 0..m {
            let mut acc = bd.as_ref().map_or(0.0, |v| v[j]);
            for k in 0..n {
                acc += xd[i * n + k] * wd[j * n + k];
            }
            out[i * m + j] = acc;
        }
    }
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let (px, pw) = (x.clone(), w.clone());
    let pb = bias.cloned();
    Tensor::from_op(vec![b, m], out, parents, Box::new(move |g| {
        let mut gx = vec![0.0; b * n];
        let mut gw = vec![0.0; m * n];
        for i in 0..b {
            for j in 0..m {
                let go = g[i * m + j];
                for k in 0..n {
                    gx[i * n + k] += go * wd[j * n + k];
                    gw[j * n + k] += go * xd[i * n + k];
                }
            }
        }
        px.accumulate_grad(&gx);
        pw.accumulate_grad(&gw);
        if let Some(bt) = &pb {
            let mut gb = vec![0.0; m];
            for i in 0..b {
                for j in 0..m {
                    gb[j] += g[i * m + j];
                }
            }
            bt.accumulate_grad(&gb);
        }
    }))
}

/// Multiplies each sample in the batch by a fixed scalar. The scale vector is
/// plain data, not a graph node: no gradient flows to it.
pub fn scale_per_sample(x: &Tensor, scales: &[f64]) -> Result<Tensor> {
    let shape = x.shape();
    let batch = shape[0];
    if scales.len() != batch {
        return Err(Error::Shape(format!(
            "scale_per_sample: {} scales for batch of {batch}",
            scales.len()
        )));
    }
    let per = x.len() / batch;
    let data = x.data();
    let mut out = vec![0.0; data.len()];
    for i in 0..batch {
        for j in 0..per {
            out[i * per + j] = data[i * per + j] * scales[i];
        }
    }
    drop(data);
    let px = x.clone();
    let s = scales.to_vec();
    Tensor::from_op(shape, out, vec![x.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; g.len()];
        for i in 0..batch {
            for j in 0..per {
                gx[i * per + j] = g[i * per + j] * s[i];
            }
        }
        px.accumulate_grad(&gx);
    }))
}

/// Row-wise L2 normalization of a rank-2 tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("l2_normalize expects rank-2 input, got {shape:?}")));
    }
    let (b, n) = (shape[0], shape[1]);
    let xd = x.to_vec();
    let mut norms = vec![0.0; b];
    for i in 0..b {
        let sq: f64 = xd[i * n..(i + 1) * n].iter().map(|v| v * v).sum();
        if sq == 0.0 {
            return Err(Error::Invalid(format!("l2_normalize: row {i} has zero norm")));
        }
        norms[i] = sq.sqrt();
    }
    let mut out = vec![0.0; b * n];
    for i in 0..b {
        for j in 0..n {
            out[i * n + j] = xd[i * n + j] / norms[i];
        }
    }
    let px = x.clone();
    let yd = out.clone();
    Tensor::from_op(shape, out, vec![x.clone()], Box::new(move |g| {
        // dL/dx = (g - y * <g, y>) / ||x||, per row.
        let mut gx = vec![0.0; b * n];
        for i in 0..b {
            let row = i * n..(i + 1) * n;
            let dot: f64 = g[row.clone()].iter().zip(&yd[row.clone()]).map(|(a, b)| a * b).sum();
            for j in 0..n {
                gx[i * n + j] = (g[i * n + j] - yd[i * n + j] * dot) / norms[i];
            }
        }
        px.accumulate_grad(&gx);
    }))
}

/// Mean cross-entropy over rows of `logits` against integer labels, with a
/// numerically stable log-sum-exp.
pub fn cross_entropy_mean(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("cross_entropy expects rank-2 logits, got {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
    }
    let ld = logits.to_vec();
    let mut loss = 0.0;
    let mut probs = vec![0.0; b * c];
    for i in 0..b {
        let row = &ld[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            probs[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            probs[i * c + j] /= denom;
        }
        loss += denom.ln() + mx - row[labels[i]];
    }
    loss /= b as f64;
    let px = logits.clone();
    let labels = labels.to_vec();
    Tensor::from_op(vec![1, 1], vec![loss], vec![logits.clone()], Box::new(move |g| {
        let scale = g[0] / b as f64;
        let mut gx = vec![0.0; b * c];
        for i in 0..b {
            for j in 0..c {
                let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                gx[i * c + j] = scale * (probs[i * c + j] - indicator);
            }
        }
        px.accumulate_grad(&gx);
    }))
}
