//! Dynamically generated mask heads.
//!
//! A controller emits, at every location, a flat vector `theta` holding all
//! weights and biases of a small stack of 1x1 convolutions. That stack runs
//! over the bottom features concatenated with a two-channel coordinate map.

use serde::{Deserialize, Serialize};

use super::{MaskHeadShape, ModelError};
use crate::numerics::tape::{GradContribution, NodeId, TapeOp};
use crate::numerics::{conv2d, gemm, pointwise, ConvSpec, FeatureMap, Pointwise};

/// Which positional channels are appended to the bottom features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordMode {
    /// Offsets from the generating location.
    Relative,
    /// Input-space position of each cell.
    Absolute,
    /// Two all-zero channels; the head width is unchanged.
    None,
}

/// Number of generated parameters for a head of this shape.
///
/// Input width is `c_bottom + 2`; hidden layers have `width` channels; the
/// last layer has one output channel.
pub fn num_filter_params(shape: &MaskHeadShape) -> usize {
    let cin = shape.c_bottom + 2;
    let (d, w) = (shape.depth, shape.width);
    if d == 1 {
        return cin + 1;
    }
    let weights = cin * w + (d - 2) * w * w + w;
    let biases = (d - 1) * w + 1;
    weights + biases
}

/// `(in, out)` channel counts of every layer.
pub fn layer_dims(shape: &MaskHeadShape) -> Vec<(usize, usize)> {
    let cin = shape.c_bottom + 2;
    (0..shape.depth)
        .map(|i| {
            let inp = if i == 0 { cin } else { shape.width };
            let out = if i + 1 == shape.depth { 1 } else { shape.width };
            (inp, out)
        })
        .collect()
}

/// A concrete mask head: `depth` 1x1 convolutions, ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHead {
    pub layers: Vec<ConvSpec>,
}

impl MaskHead {
    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvSpec::num_params).sum()
    }
}

/// Splits `theta` as layer 1 weights, layer 1 biases, layer 2 weights, ...
pub fn unpack_filter_params(theta: &[f64], shape: &MaskHeadShape) -> Result<MaskHead, ModelError> {
    let expected = num_filter_params(shape);
    if theta.len() != expected {
        return Err(ModelError::FilterParamLength {
            expected,
            actual: theta.len(),
        });
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(shape.depth);
    for (cin, cout) in layer_dims(shape) {
        let weights = theta[offset..offset + cin * cout].to_vec();
        offset += cin * cout;
        let bias = theta[offset..offset + cout].to_vec();
        offset += cout;
        layers.push(ConvSpec::new(cin, cout, 1, weights, bias)?);
    }
    debug_assert_eq!(offset, expected);
    Ok(MaskHead { layers })
}

/// Input-space coordinate of cell index `i` at stride `s`.
#[inline]
pub fn cell_center(i: usize, stride: usize) -> f64 {
    (stride / 2 + i * stride) as f64
}

/// Two-channel map over a `height x width` grid at `stride`: channel 0 is the
/// x offset from `origin` divided by `norm`, channel 1 the y offset.
pub fn make_relative_coords(
    origin: (f64, f64),
    height: usize,
    width: usize,
    stride: usize,
    norm: f64,
) -> FeatureMap {
    let mut data = vec![0.0; 2 * height * width];
    let n = height * width;
    for y in 0..height {
        let dy = (cell_center(y, stride) - origin.1) / norm;
        for x in 0..width {
            data[y * width + x] = (cell_center(x, stride) - origin.0) / norm;
            data[n + y * width + x] = dy;
        }
    }
    FeatureMap::from_raw(2, height, width, stride, data)
}

/// Coordinate channels for a generator at input-space `origin` under `mode`.
pub fn coord_channels(
    mode: CoordMode,
    origin: (f64, f64),
    height: usize,
    width: usize,
    stride: usize,
    norm: f64,
) -> FeatureMap {
    match mode {
        CoordMode::Relative => make_relative_coords(origin, height, width, stride, norm),
        CoordMode::Absolute => make_relative_coords((0.0, 0.0), height, width, stride, norm),
        CoordMode::None => FeatureMap::zeros(2, height, width, stride),
    }
}

/// Runs one head over `concat(bottom, coords)` with [`conv2d`]; returns raw logits.
pub fn apply_mask_head(
    bottom: &FeatureMap,
    coords: &FeatureMap,
    head: &MaskHead,
) -> Result<FeatureMap, ModelError> {
    let input = FeatureMap::concat_channels(&[bottom, coords])?;
    if input.channels() != head.input_channels() {
        return Err(ModelError::Config(format!(
            "mask head expects {} input channels, features have {}",
            head.input_channels(),
            input.channels()
        )));
    }
    let mut x = input;
    let last = head.layers.len() - 1;
    for (i, layer) in head.layers.iter().enumerate() {
        x = conv2d(&x, layer)?;
        if i < last {
            x = pointwise(&x, Pointwise::Relu);
        }
    }
    Ok(x)
}

/// Heads per stacked first-layer multiply.
const HEAD_CHUNK: usize = 8;

/// Runs many heads over one bottom map.
///
/// The first layer's product with the shared bottom features is one matrix
/// multiply per chunk of stacked heads; only the coordinate part and the
/// deeper layers are evaluated per head.
pub fn apply_mask_heads_batched(
    bottom: &FeatureMap,
    heads: &[(MaskHead, FeatureMap)],
) -> Result<Vec<FeatureMap>, ModelError> {
    if heads.is_empty() {
        return Ok(Vec::new());
    }
    let cb = bottom.channels();
    let p = bottom.plane_len();
    let (h, w, stride) = (bottom.height(), bottom.width(), bottom.stride());
    for (head, coords) in heads {
        if head.input_channels() != cb + coords.channels()
            || coords.height() != h
            || coords.width() != w
        {
            return Err(ModelError::Config(format!(
                "mask head expects {} input channels, features have {}",
                head.input_channels(),
                cb + coords.channels()
            )));
        }
    }
    let mut outputs = Vec::with_capacity(heads.len());
    let mut stacked = Vec::new();
    let mut first = Vec::new();
    let (mut act, mut next) = (Vec::new(), Vec::new());
    for chunk in heads.chunks(HEAD_CHUNK) {
        // stacked first-layer weights restricted to the bottom channels
        let rows: usize = chunk.iter().map(|(hd, _)| hd.layers[0].out_channels).sum();
        stacked.clear();
        for (head, _) in chunk {
            let l = &head.layers[0];
            for o in 0..l.out_channels {
                stacked.extend_from_slice(&l.weights[o * l.in_channels..o * l.in_channels + cb]);
            }
        }
        first.clear();
        first.resize(rows * p, 0.0);
        gemm(
            rows,
            cb,
            p,
            1.0,
            &stacked,
            false,
            bottom.data(),
            false,
            0.0,
            &mut first,
        );

        let mut row0 = 0;
        for (head, coords) in chunk {
            let l0 = &head.layers[0];
            let out0 = l0.out_channels;
            act.clear();
            act.extend_from_slice(&first[row0 * p..(row0 + out0) * p]);
            row0 += out0;
            for o in 0..out0 {
                let wrow = &l0.weights[o * l0.in_channels..(o + 1) * l0.in_channels];
                let dst = &mut act[o * p..(o + 1) * p];
                for (ci, &wc) in wrow[cb..].iter().enumerate() {
                    let src = coords.channel(ci);
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += wc * s);
                }
                dst.iter_mut().for_each(|d| *d += l0.bias[o]);
            }
            let mut cur = out0;
            for layer in &head.layers[1..] {
                act.iter_mut().for_each(|v| *v = v.max(0.0));
                next.clear();
                for o in 0..layer.out_channels {
                    next.extend(std::iter::repeat_n(layer.bias[o], p));
                }
                gemm(
                    layer.out_channels,
                    cur,
                    p,
                    1.0,
                    &layer.weights,
                    false,
                    &act,
                    false,
                    1.0,
                    &mut next,
                );
                std::mem::swap(&mut act, &mut next);
                cur = layer.out_channels;
            }
            outputs.push(FeatureMap::from_raw(cur, h, w, stride, act.clone()));
        }
    }
    Ok(outputs)
}

/// Per-layer pre-activations of a head on a `channels x p` input.
fn mlp_forward(theta: &[f64], dims: &[(usize, usize)], input: &[f64], p: usize) -> Vec<Vec<f64>> {
    let mut pre = Vec::with_capacity(dims.len());
    let mut offset = 0;
    let mut act: Vec<f64> = input.to_vec();
    for (li, &(cin, cout)) in dims.iter().enumerate() {
        let wts = &theta[offset..offset + cin * cout];
        let bias = &theta[offset + cin * cout..offset + cin * cout + cout];
        offset += cin * cout + cout;
        let mut z = vec![0.0; cout * p];
        for o in 0..cout {
            z[o * p..(o + 1) * p].fill(bias[o]);
        }
        gemm(cout, cin, p, 1.0, wts, false, &act, false, 1.0, &mut z);
        if li + 1 < dims.len() {
            act = z.iter().map(|v| v.max(0.0)).collect();
        }
        pre.push(z);
    }
    pre
}

/// Tape op: mask logits of the head generated at one controller location.
///
/// Inputs are the bottom features and the controller map of the generating
/// level; the coordinate channels are constants.
pub(crate) struct DynamicHeadOp {
    inputs: [NodeId; 2],
    location: (usize, usize),
    coords: FeatureMap,
    dims: Vec<(usize, usize)>,
    num_params: usize,
}

impl DynamicHeadOp {
    pub(crate) fn new(
        bottom: NodeId,
        controller: NodeId,
        location: (usize, usize),
        coords: FeatureMap,
        shape: &MaskHeadShape,
    ) -> Self {
        Self {
            inputs: [bottom, controller],
            location,
            coords,
            dims: layer_dims(shape),
            num_params: num_filter_params(shape),
        }
    }

    fn theta(&self, controller: &FeatureMap) -> Vec<f64> {
        let (y, x) = self.location;
        (0..self.num_params)
            .map(|c| controller.at(c, y, x))
            .collect()
    }

    fn input(&self, bottom: &FeatureMap) -> Vec<f64> {
        let mut v = bottom.data().to_vec();
        v.extend_from_slice(self.coords.data());
        v
    }

    pub(crate) fn forward(&self, bottom: &FeatureMap, controller: &FeatureMap) -> FeatureMap {
        let theta = self.theta(controller);
        let pre = mlp_forward(&theta, &self.dims, &self.input(bottom), bottom.plane_len());
        let logits = pre.into_iter().next_back().expect("depth >= 1");
        FeatureMap::from_raw(1, bottom.height(), bottom.width(), bottom.stride(), logits)
    }
}

impl TapeOp for DynamicHeadOp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(
        &self,
        inputs: &[&FeatureMap],
        _output: &FeatureMap,
        grad_out: &[f64],
    ) -> Vec<GradContribution> {
        let (bottom, controller) = (inputs[0], inputs[1]);
        let p = bottom.plane_len();
        let theta = self.theta(controller);
        let input = self.input(bottom);
        let pre = mlp_forward(&theta, &self.dims, &input, p);

        let mut offsets = Vec::with_capacity(self.dims.len());
        let mut off = 0;
        for &(cin, cout) in &self.dims {
            offsets.push(off);
            off += cin * cout + cout;
        }
        let mut dtheta = vec![0.0; self.num_params];
        let mut delta = grad_out.to_vec();
        for li in (0..self.dims.len()).rev() {
            let (cin, cout) = self.dims[li];
            let layer_in: Vec<f64> = if li == 0 {
                input.clone()
            } else {
                pre[li - 1].iter().map(|v| v.max(0.0)).collect()
            };
            let wo = offsets[li];
            // dW = delta * in^T, db = row sums of delta
            gemm(
                cout,
                p,
                cin,
                1.0,
                &delta,
                false,
                &layer_in,
                true,
                0.0,
                &mut dtheta[wo..wo + cin * cout],
            );
            for o in 0..cout {
                dtheta[wo + cin * cout + o] = delta[o * p..(o + 1) * p].iter().sum();
            }
            let mut din = vec![0.0; cin * p];
            gemm(
                cin,
                cout,
                p,
                1.0,
                &theta[wo..wo + cin * cout],
                true,
                &delta,
                false,
                0.0,
                &mut din,
            );
            if li > 0 {
                for (d, z) in din.iter_mut().zip(&pre[li - 1]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = din;
        }
        let cb = bottom.channels();
        let (y, x) = self.location;
        let cplane = controller.plane_len();
        vec![
            GradContribution {
                input: 0,
                offset: 0,
                stride: 1,
                values: delta[..cb * p].to_vec(),
            },
            GradContribution {
                input: 1,
                offset: y * controller.width() + x,
                stride: cplane,
                values: dtheta,
            },
        ]
    }
}
