use super::{gemm, FeatureMap, NumericsError};

/// Weights and bias of a stride-1 convolution with kernel 1 or 3.
///
/// Weights are laid out `[out][in][ky][kx]`. Kernel 3 uses zero padding 1,
/// so the output always has the input's spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, NumericsError> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel,
            weights,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn padding(&self) -> usize {
        if self.kernel == 3 {
            1
        } else {
            0
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.kernel != 1 && self.kernel != 3 {
            return Err(NumericsError::InvalidArgument(format!(
                "kernel must be 1 or 3, got {}",
                self.kernel
            )));
        }
        let expected = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.weights.len() != expected {
            return Err(NumericsError::LengthMismatch {
                what: "conv weights",
                expected,
                actual: self.weights.len(),
            });
        }
        if self.bias.len() != self.out_channels {
            return Err(NumericsError::LengthMismatch {
                what: "conv bias",
                expected: self.out_channels,
                actual: self.bias.len(),
            });
        }
        if self
            .weights
            .iter()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(NumericsError::NonFinite("conv parameters".into()));
        }
        Ok(())
    }
}

/// Reusable im2col buffers.
#[derive(Debug, Default)]
pub struct ConvWorkspace {
    cols: Vec<f64>,
    dcols: Vec<f64>,
}

/// `buf[..n]`, growing `buf` when needed; contents are unspecified.
fn scratch(buf: &mut Vec<f64>, n: usize) -> &mut [f64] {
    if buf.len() < n {
        buf.resize(n, 0.0);
    }
    &mut buf[..n]
}

fn im2col3(x: &[f64], channels: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[w - 1] = 0.0;
                            dst[..w - 1].copy_from_slice(&src[1..]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im3_add(cols: &[f64], channels: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Raw forward kernel: replaces `out` with the `out_channels * h * w` outputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_raw(
    x: &[f64],
    in_channels: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    out_channels: usize,
    kernel: usize,
    out: &mut Vec<f64>,
    ws: &mut ConvWorkspace,
) {
    let hw = h * w;
    out.clear();
    for &b in &bias[..out_channels] {
        out.extend(std::iter::repeat_n(b, hw));
    }
    let kk = in_channels * kernel * kernel;
    if kernel == 1 {
        gemm(
            out_channels,
            kk,
            hw,
            1.0,
            weights,
            false,
            x,
            false,
            1.0,
            out,
        );
    } else {
        let cols = scratch(&mut ws.cols, kk * hw);
        im2col3(x, in_channels, h, w, cols);
        gemm(
            out_channels,
            kk,
            hw,
            1.0,
            weights,
            false,
            cols,
            false,
            1.0,
            out,
        );
    }
}

/// Raw backward kernel. Accumulates into `dw`, `db` and (when given) `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_raw(
    x: &[f64],
    in_channels: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    out_channels: usize,
    kernel: usize,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
    ws: &mut ConvWorkspace,
) {
    let hw = h * w;
    let kk = in_channels * kernel * kernel;
    for oc in 0..out_channels {
        db[oc] += dout[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
    }
    if kernel == 1 {
        gemm(out_channels, hw, kk, 1.0, dout, false, x, true, 1.0, dw);
        if let Some(dx) = dx {
            gemm(
                kk,
                out_channels,
                hw,
                1.0,
                weights,
                true,
                dout,
                false,
                1.0,
                dx,
            );
        }
    } else {
        let cols = scratch(&mut ws.cols, kk * hw);
        im2col3(x, in_channels, h, w, cols);
        gemm(out_channels, hw, kk, 1.0, dout, false, cols, true, 1.0, dw);
        if let Some(dx) = dx {
            let dcols = scratch(&mut ws.dcols, kk * hw);
            gemm(
                kk,
                out_channels,
                hw,
                1.0,
                weights,
                true,
                dout,
                false,
                0.0,
                dcols,
            );
            col2im3_add(dcols, in_channels, h, w, dx);
        }
    }
}

/// Stride-1 "same" convolution.
pub fn conv2d(input: &FeatureMap, spec: &ConvSpec) -> Result<FeatureMap, NumericsError> {
    spec.validate()?;
    if input.channels() != spec.in_channels {
        return Err(NumericsError::ChannelMismatch {
            expected: spec.in_channels,
            actual: input.channels(),
        });
    }
    let (h, w) = (input.height(), input.width());
    let mut out = Vec::new();
    conv_forward_raw(
        input.data(),
        spec.in_channels,
        h,
        w,
        &spec.weights,
        &spec.bias,
        spec.out_channels,
        spec.kernel,
        &mut out,
        &mut ConvWorkspace::default(),
    );
    Ok(FeatureMap::from_raw(
        spec.out_channels,
        h,
        w,
        input.stride(),
        out,
    ))
}

/// Gradients of a convolution: `(d_input, d_weights, d_bias)`.
pub fn conv2d_backward(
    input: &FeatureMap,
    spec: &ConvSpec,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, Vec<f64>, Vec<f64>), NumericsError> {
    spec.validate()?;
    if input.channels() != spec.in_channels {
        return Err(NumericsError::ChannelMismatch {
            expected: spec.in_channels,
            actual: input.channels(),
        });
    }
    let (h, w) = (input.height(), input.width());
    if grad_out.channels() != spec.out_channels || grad_out.height() != h || grad_out.width() != w {
        return Err(NumericsError::ShapeMismatch(
            "conv2d_backward grad_out".into(),
        ));
    }
    let mut dx = vec![0.0; input.data().len()];
    let mut dw = vec![0.0; spec.weights.len()];
    let mut db = vec![0.0; spec.bias.len()];
    conv_backward_raw(
        input.data(),
        spec.in_channels,
        h,
        w,
        &spec.weights,
        spec.out_channels,
        spec.kernel,
        grad_out.data(),
        Some(&mut dx),
        &mut dw,
        &mut db,
        &mut ConvWorkspace::default(),
    );
    Ok((
        FeatureMap::from_raw(spec.in_channels, h, w, input.stride(), dx),
        dw,
        db,
    ))
}
