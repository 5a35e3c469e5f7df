use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution. Square kernels, cross-correlation semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: 0,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn depthwise(channels: usize, kernel_size: usize) -> ConvSpec {
        ConvSpec { groups: channels, ..ConvSpec::new(channels, channels, kernel_size) }
    }

    pub fn stride(mut self, s: usize) -> ConvSpec {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> ConvSpec {
        self.padding = p;
        self
    }

    pub fn with_bias(mut self) -> ConvSpec {
        self.has_bias = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_size == 0
            || self.stride == 0
            || self.groups == 0
        {
            return Err(Error::Invalid("conv spec extents must be positive".into()));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Invalid(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// floor((extent + 2*padding - k)/stride) + 1, rejected when < 1.
    pub fn out_extent(&self, extent: usize) -> Result<usize> {
        let padded = extent + 2 * self.padding;
        if padded < self.kernel_size {
            return Err(Error::Shape(format!(
                "kernel {} does not fit padded spatial extent {padded}",
                self.kernel_size
            )));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }
}

/// Grouped 2-D cross-correlation. `x` is `(b, c_in, h, w)`, `weights` is
/// `(c_out, c_in/groups, k, k)`. Differentiable w.r.t. `x`, `weights`, `bias`.
pub fn conv2d(x: &Tensor, weights: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Shape(format!("conv2d expects rank-4 input, got {xs:?}")));
    }
    let (b, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if ci != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv2d: input channel extent {ci} does not match spec in_channels {}",
            spec.in_channels
        )));
    }
    let k = spec.kernel_size;
    let cig = spec.in_channels / spec.groups;
    let expected_w = vec![spec.out_channels, cig, k, k];
    if weights.shape() != expected_w {
        return Err(Error::Shape(format!(
            "conv2d: weight shape {:?} does not match expected {expected_w:?}",
            weights.shape()
        )));
    }
    match (bias, spec.has_bias) {
        (Some(bt), true) => {
            if bt.len() != spec.out_channels {
                return Err(Error::Shape(format!(
                    "conv2d: bias length {} does not match out_channels {}",
                    bt.len(),
                    spec.out_channels
                )));
            }
        }
        (None, false) => {}
        _ => {
            return Err(Error::Invalid(
                "conv2d: bias presence must match spec.has_bias".into(),
            ))
        }
    }
    let co = spec.out_channels;
    let ho = spec.out_extent(h)?;
    let wo = spec.out_extent(w)?;
    let cog = co / spec.groups;
    let (stride, pad) = (spec.stride, spec.padding);

    let xd = x.to_vec();
    let wd = weights.to_vec();
    let bd = bias.map(|t| t.to_vec());

    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for oc in 0..co {
            let g = oc / cog;
            let base_bias = bd.as_ref().map_or(0.0, |v| v[oc]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = base_bias;
                    for icg in 0..cig {
                        let ic = g * cig + icg;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[((n * ci + ic) * h + iy as usize) * w + ix as usize]
                                    * wd[((oc * cig + icg) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((n * co + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }

    let mut parents = vec![x.clone(), weights.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let (px, pw) = (x.clone(), weights.clone());
    let pb = bias.cloned();
    Tensor::from_op(vec![b, co, ho, wo], out, parents, Box::new(move |gout| {
        let mut gx = vec![0.0; b * ci * h * w];
        let mut gw = vec![0.0; co * cig * k * k];
        let mut gb = pb.as_ref().map(|_| vec![0.0; co]);
        for n in 0..b {
            for oc in 0..co {
                let g = oc / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = gout[((n * co + oc) * ho + oy) * wo + ox];
                        if let Some(gb) = gb.as_mut() {
                            gb[oc] += go;
                        }
                        for icg in 0..cig {
                            let ic = g * cig + icg;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((n * ci + ic) * h + iy as usize) * w + ix as usize;
                                    let wi = ((oc * cig + icg) * k + ky) * k + kx;
                                    gx[xi] += go * wd[wi];
                                    gw[wi] += go * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        px.accumulate_grad(&gx);
        pw.accumulate_grad(&gw);
        if let (Some(bt), Some(gb)) = (&pb, &gb) {
            bt.accumulate_grad(gb);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity_kernel() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = ConvSpec::new(1, 1, 1);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
    }

    #[test]
    fn ones_kernel_hand_convolution() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let spec = ConvSpec::new(1, 1, 3).padding(1);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = ConvSpec::new(1, 1, 1);
        let err = conv2d(&x, &w, None, &spec).unwrap_err();
        assert!(err.to_string().contains("channel"));
    }

    #[test]
    fn groups_must_divide_channels() {
        let spec = ConvSpec { groups: 3, ..ConvSpec::new(4, 4, 3) };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn output_extent_closed_form() {
        let spec = ConvSpec::new(1, 1, 3).stride(2).padding(1);
        assert_eq!(spec.out_extent(7).unwrap(), 4);
        assert_eq!(spec.out_extent(8).unwrap(), 4);
        let tight = ConvSpec::new(1, 1, 5);
        assert!(tight.out_extent(3).is_err());
    }

    #[test]
    fn bias_presence_must_match_spec() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = ConvSpec::new(1, 1, 1).with_bias();
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }
}
