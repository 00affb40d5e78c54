use super::{FeatureMap, NumericsError};

/// Two-tap interpolation along one axis: `(lo, hi, weight_of_hi)`.
///
/// Half-pixel-center alignment: output sample `i` reads input coordinate
/// `(i + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
fn taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of every channel to `out_h x out_w`. The stride is kept.
pub fn resize_bilinear(
    input: &FeatureMap,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureMap, NumericsError> {
    let (c, h, w) = (input.channels(), input.height(), input.width());
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(NumericsError::InvalidArgument(
            "resize of an empty map".into(),
        ));
    }
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);
    let src = input.data();
    let mut out = vec![0.0; c * out_h * out_w];
    // rows first (x direction) into a c x h x out_w buffer
    let mut tmp = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let s = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let d = &mut tmp[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (x, &(lo, hi, a)) in tx.iter().enumerate() {
                d[x] = s[lo] * (1.0 - a) + s[hi] * a;
            }
        }
        for (y, &(lo, hi, a)) in ty.iter().enumerate() {
            let r0 = (ch * h + lo) * out_w;
            let r1 = (ch * h + hi) * out_w;
            let d = (ch * out_h + y) * out_w;
            for x in 0..out_w {
                out[d + x] = tmp[r0 + x] * (1.0 - a) + tmp[r1 + x] * a;
            }
        }
    }
    Ok(FeatureMap::from_raw(c, out_h, out_w, input.stride(), out))
}

/// Gradient of [`resize_bilinear`] with respect to its `c x h x w` input.
pub fn resize_bilinear_backward(
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    grad_out: &[f64],
) -> Vec<f64> {
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);
    let mut tmp = vec![0.0; c * h * out_w];
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for (y, &(lo, hi, a)) in ty.iter().enumerate() {
            let g = (ch * out_h + y) * out_w;
            let r0 = (ch * h + lo) * out_w;
            let r1 = (ch * h + hi) * out_w;
            for x in 0..out_w {
                tmp[r0 + x] += grad_out[g + x] * (1.0 - a);
                tmp[r1 + x] += grad_out[g + x] * a;
            }
        }
        for y in 0..h {
            let t = &tmp[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            let d = &mut dx[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (x, &(lo, hi, a)) in tx.iter().enumerate() {
                d[lo] += t[x] * (1.0 - a);
                d[hi] += t[x] * a;
            }
        }
    }
    dx
}

/// Bilinear upsampling by an integer factor; the stride is divided by the factor.
pub fn bilinear_upsample(input: &FeatureMap, factor: usize) -> Result<FeatureMap, NumericsError> {
    if factor == 0 {
        return Err(NumericsError::InvalidArgument(
            "upsample factor must be >= 1".into(),
        ));
    }
    let out = resize_bilinear(input, input.height() * factor, input.width() * factor)?;
    let stride = (input.stride() / factor).max(1);
    Ok(out.with_stride(stride))
}
