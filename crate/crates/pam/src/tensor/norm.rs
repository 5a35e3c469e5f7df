use std::cell::RefCell;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization state. `gamma`/`beta` are trainable
/// leaves; the running statistics are plain buffers updated in train mode.
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormState {
    /// gamma = 1, beta = 0, running stats at the standard normal.
    pub fn new(channels: usize) -> BatchNormState {
        BatchNormState {
            gamma: Tensor::full(&[channels], 1.0).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Batch normalization over `(b, c, h, w)`. Train mode normalizes with batch
/// statistics (biased variance) and updates the running stats by exponential
/// moving average; eval mode uses the running stats only.
pub fn batch_norm(x: &Tensor, state: &BatchNormState, mode: Mode) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("batch_norm expects rank-4 input, got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != state.channels() {
        return Err(Error::Shape(format!(
            "batch_norm: input channel extent {c} does not match state channels {}",
            state.channels()
        )));
    }
    let m = b * h * w; // elements per channel
    let xd = x.to_vec();
    let gd = state.gamma.to_vec();
    let bd = state.beta.to_vec();
    let eps = state.epsilon;

    let idx = move |n: usize, ch: usize, y: usize, xx: usize| ((n * c + ch) * h + y) * w + xx;

    let (mean, var) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::Invalid(
                    "batch_norm train mode needs at least 2 elements per channel".into(),
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for n in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            s += xd[idx(n, ch, y, xx)];
                        }
                    }
                }
                mean[ch] = s / m as f64;
                let mut v = 0.0;
                for n in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let d = xd[idx(n, ch, y, xx)] - mean[ch];
                            v += d * d;
                        }
                    }
                }
                var[ch] = v / m as f64;
            }
            // EMA update of running stats happens on the forward pass.
            let mom = state.momentum;
            let mut rm = state.running_mean.borrow_mut();
            let mut rv = state.running_var.borrow_mut();
            for ch in 0..c {
                rm[ch] = (1.0 - mom) * rm[ch] + mom * mean[ch];
                rv[ch] = (1.0 - mom) * rv[ch] + mom * var[ch];
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean.borrow().clone(), state.running_var.borrow().clone()),
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = idx(n, ch, y, xx);
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
    }

    let px = x.clone();
    let (pg, pb) = (state.gamma.clone(), state.beta.clone());
    let parents = vec![x.clone(), state.gamma.clone(), state.beta.clone()];
    Tensor::from_op(shape.clone(), out, parents, Box::new(move |g| {
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for n in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let i = idx(n, ch, y, xx);
                        ggamma[ch] += g[i] * xhat[i];
                        gbeta[ch] += g[i];
                    }
                }
            }
        }
        let mut gx = vec![0.0; b * c * h * w];
        match mode {
            Mode::Eval => {
                for n in 0..b {
                    for ch in 0..c {
                        let scale = gd[ch] * inv_std[ch];
                        for y in 0..h {
                            for xx in 0..w {
                                let i = idx(n, ch, y, xx);
                                gx[i] = g[i] * scale;
                            }
                        }
                    }
                }
            }
            Mode::Train => {
                // dL/dx = gamma*inv_std * (g - mean(g) - xhat*mean(g*xhat))
                for ch in 0..c {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for n in 0..b {
                        for y in 0..h {
                            for xx in 0..w {
                                let i = idx(n, ch, y, xx);
                                mean_g += g[i];
                                mean_gx += g[i] * xhat[i];
                            }
                        }
                    }
                    mean_g /= m as f64;
                    mean_gx /= m as f64;
                    let scale = gd[ch] * inv_std[ch];
                    for n in 0..b {
                        for y in 0..h {
                            for xx in 0..w {
                                let i = idx(n, ch, y, xx);
                                gx[i] = scale * (g[i] - mean_g - xhat[i] * mean_gx);
                            }
                        }
                    }
                }
            }
        }
        px.accumulate_grad(&gx);
        pg.accumulate_grad(&ggamma);
        pb.accumulate_grad(&gbeta);
    }))
}

/// Channelwise PReLU over rank-4 input: x if x >= 0 else slope[c] * x.
pub fn prelu(x: &Tensor, slopes: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("prelu expects rank-4 input, got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if slopes.len() != c {
        return Err(Error::Shape(format!(
            "prelu: {} slopes for channel extent {c}",
            slopes.len()
        )));
    }
    let xd = x.to_vec();
    let sd = slopes.to_vec();
    let hw = h * w;
    let mut out = vec![0.0; xd.len()];
    for n in 0..b {
        for ch in 0..c {
            for j in 0..hw {
                let i = (n * c + ch) * hw + j;
                out[i] = if xd[i] >= 0.0 { xd[i] } else { sd[ch] * xd[i] };
            }
        }
    }
    let px = x.clone();
    let ps = slopes.clone();
    let parents = vec![x.clone(), slopes.clone()];
    Tensor::from_op(shape, out, parents, Box::new(move |g| {
        let mut gx = vec![0.0; xd.len()];
        let mut gs = vec![0.0; c];
        for n in 0..b {
            for ch in 0..c {
                for j in 0..hw {
                    let i = (n * c + ch) * hw + j;
                    if xd[i] >= 0.0 {
                        gx[i] = g[i];
                    } else {
                        gx[i] = g[i] * sd[ch];
                        gs[ch] += g[i] * xd[i];
                    }
                }
            }
        }
        px.accumulate_grad(&gx);
        ps.accumulate_grad(&gs);
    }))
}
