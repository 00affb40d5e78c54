use super::{FeatureMap, NumericsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    /// Softmax across channels at every pixel.
    SoftmaxChannelwise,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn pointwise(input: &FeatureMap, kind: Pointwise) -> FeatureMap {
    let mut out = input.clone();
    match kind {
        Pointwise::Relu => out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
        Pointwise::Sigmoid => out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        Pointwise::SoftmaxChannelwise => {
            let (c, n) = (input.channels(), input.plane_len());
            let src = input.data();
            let dst = out.data_mut();
            for p in 0..n {
                let max = (0..c)
                    .map(|k| src[k * n + p])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..c {
                    let e = (src[k * n + p] - max).exp();
                    dst[k * n + p] = e;
                    sum += e;
                }
                for k in 0..c {
                    dst[k * n + p] /= sum;
                }
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`pointwise`], given its input and output.
pub fn pointwise_backward(
    input: &FeatureMap,
    output: &FeatureMap,
    grad_out: &[f64],
    kind: Pointwise,
) -> Vec<f64> {
    let x = input.data();
    let y = output.data();
    match kind {
        Pointwise::Relu => x
            .iter()
            .zip(grad_out)
            .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
            .collect(),
        Pointwise::Sigmoid => y
            .iter()
            .zip(grad_out)
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
        Pointwise::SoftmaxChannelwise => {
            let (c, n) = (input.channels(), input.plane_len());
            let mut dx = vec![0.0; x.len()];
            for p in 0..n {
                let dot: f64 = (0..c).map(|k| y[k * n + p] * grad_out[k * n + p]).sum();
                for k in 0..c {
                    dx[k * n + p] = y[k * n + p] * (grad_out[k * n + p] - dot);
                }
            }
            dx
        }
    }
}

/// 2x2 average pooling; doubles the stride. Odd trailing rows/columns are dropped.
pub fn avg_pool2(input: &FeatureMap) -> Result<FeatureMap, NumericsError> {
    let (c, h, w) = (input.channels(), input.height(), input.width());
    if h < 2 || w < 2 {
        return Err(NumericsError::InvalidArgument(format!(
            "cannot pool a {h}x{w} map"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let src = input.data();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ch * h * w;
                let s = src[base + 2 * y * w + 2 * x]
                    + src[base + 2 * y * w + 2 * x + 1]
                    + src[base + (2 * y + 1) * w + 2 * x]
                    + src[base + (2 * y + 1) * w + 2 * x + 1];
                out[(ch * oh + y) * ow + x] = 0.25 * s;
            }
        }
    }
    Ok(FeatureMap::from_raw(c, oh, ow, input.stride() * 2, out))
}

/// Gradient of [`avg_pool2`] with respect to its `c x h x w` input.
pub fn avg_pool2_backward(c: usize, h: usize, w: usize, grad_out: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * grad_out[(ch * oh + y) * ow + x];
                let base = ch * h * w;
                dx[base + 2 * y * w + 2 * x] += g;
                dx[base + 2 * y * w + 2 * x + 1] += g;
                dx[base + (2 * y + 1) * w + 2 * x] += g;
                dx[base + (2 * y + 1) * w + 2 * x + 1] += g;
            }
        }
    }
    dx
}
