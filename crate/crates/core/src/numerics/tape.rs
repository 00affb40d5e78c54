//! Reverse-mode differentiation over [`FeatureMap`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! read from a borrowed [`ParamStore`]; [`Tape::backward`] returns gradients
//! in the store's flat layout.

use super::conv::{conv_backward_raw, conv_forward_raw};
use super::{
    avg_pool2, avg_pool2_backward, pointwise, pointwise_backward, resize_bilinear,
    resize_bilinear_backward, ConvWorkspace, FeatureMap, NumericsError, ParamId, ParamStore,
    Pointwise,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Sparse gradient contribution from a custom op to one of its inputs.
#[derive(Debug, Clone)]
pub struct GradContribution {
    /// Position in [`TapeOp::inputs`].
    pub input: usize,
    pub offset: usize,
    /// Distance between consecutive `values` in the input buffer.
    pub stride: usize,
    pub values: Vec<f64>,
}

/// A differentiable operation defined outside this module.
pub trait TapeOp: Send + Sync {
    fn inputs(&self) -> &[NodeId];
    fn backward(
        &self,
        inputs: &[&FeatureMap],
        output: &FeatureMap,
        grad_out: &[f64],
    ) -> Vec<GradContribution>;
}

enum Op {
    Leaf {
        requires_grad: bool,
    },
    Conv {
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
        kernel: usize,
    },
    Unary {
        x: NodeId,
        kind: Pointwise,
    },
    AvgPool2 {
        x: NodeId,
    },
    Resize {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Custom(Box<dyn TapeOp>),
}

struct Node {
    value: FeatureMap,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    ws: ConvWorkspace,
}

/// Output of [`Tape::backward`].
pub struct TapeGrads {
    pub params: Vec<f64>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl TapeGrads {
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].as_deref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            ws: ConvWorkspace::default(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FeatureMap, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &FeatureMap {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: FeatureMap) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
        )
    }

    /// A leaf that never receives a gradient (images, fixed coordinate maps).
    pub fn constant(&mut self, value: FeatureMap) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
        )
    }

    /// Convolution whose weights (`[out, in, k, k]`) and bias live in the store.
    pub fn conv(
        &mut self,
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
    ) -> Result<NodeId, NumericsError> {
        let shape = &self.params.info(weight).shape;
        if shape.len() != 4 || shape[2] != shape[3] || (shape[2] != 1 && shape[2] != 3) {
            return Err(NumericsError::InvalidArgument(format!(
                "conv weight {} has shape {:?}",
                self.params.info(weight).name,
                shape
            )));
        }
        let (out_c, in_c, kernel) = (shape[0], shape[1], shape[2]);
        let input = &self.nodes[x.0].value;
        if input.channels() != in_c {
            return Err(NumericsError::ChannelMismatch {
                expected: in_c,
                actual: input.channels(),
            });
        }
        let (h, w, stride) = (input.height(), input.width(), input.stride());
        let mut out = Vec::with_capacity(out_c * h * w);
        conv_forward_raw(
            input.data(),
            in_c,
            h,
            w,
            self.params.get(weight),
            self.params.get(bias),
            out_c,
            kernel,
            &mut out,
            &mut self.ws,
        );
        let value = FeatureMap::from_raw(out_c, h, w, stride, out);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                weight,
                bias,
                kernel,
            },
        ))
    }

    pub fn unary(&mut self, x: NodeId, kind: Pointwise) -> NodeId {
        let value = pointwise(&self.nodes[x.0].value, kind);
        self.push(value, Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Pointwise::Relu)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let value = avg_pool2(&self.nodes[x.0].value)?;
        Ok(self.push(value, Op::AvgPool2 { x }))
    }

    /// Bilinear resize; the output carries `stride`.
    pub fn resize(
        &mut self,
        x: NodeId,
        out_h: usize,
        out_w: usize,
        stride: usize,
    ) -> Result<NodeId, NumericsError> {
        let value = resize_bilinear(&self.nodes[x.0].value, out_h, out_w)?.with_stride(stride);
        Ok(self.push(value, Op::Resize { x }))
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId, NumericsError> {
        if factor == 0 {
            return Err(NumericsError::InvalidArgument(
                "upsample factor must be >= 1".into(),
            ));
        }
        if factor == 1 {
            return Ok(x);
        }
        let v = &self.nodes[x.0].value;
        let (h, w, s) = (
            v.height() * factor,
            v.width() * factor,
            (v.stride() / factor).max(1),
        );
        self.resize(x, h, w, s)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(NumericsError::ShapeMismatch(format!(
                "add {}x{}x{} and {}x{}x{}",
                va.channels(),
                va.height(),
                va.width(),
                vb.channels(),
                vb.height(),
                vb.width()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = FeatureMap::from_raw(va.channels(), va.height(), va.width(), va.stride(), data);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let maps: Vec<&FeatureMap> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = FeatureMap::concat_channels(&maps)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Records a custom op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn TapeOp>, value: FeatureMap) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.push(value, Op::Custom(op))
    }

    /// Back-propagates the given output gradients through the whole tape.
    pub fn backward(&self, seeds: &[(NodeId, Vec<f64>)]) -> TapeGrads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut param_grads = vec![0.0; self.params.len()];
        let mut ws = ConvWorkspace::default();
        for (id, g) in seeds {
            assert_eq!(
                g.len(),
                self.nodes[id.0].value.data().len(),
                "seed gradient length"
            );
            accumulate(&mut grads, &self.nodes, *id, 0, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Conv {
                    x,
                    weight,
                    bias,
                    kernel,
                } => {
                    let input = &self.nodes[x.0].value;
                    let (in_c, h, w) = (input.channels(), input.height(), input.width());
                    let out_c = node.value.channels();
                    let wr = self.params.range(*weight);
                    let br = self.params.range(*bias);
                    let mut dw = vec![0.0; wr.len()];
                    let mut db = vec![0.0; br.len()];
                    let needs_dx = self.needs_grad(*x);
                    let mut dx = if needs_dx {
                        vec![0.0; input.data().len()]
                    } else {
                        Vec::new()
                    };
                    conv_backward_raw(
                        input.data(),
                        in_c,
                        h,
                        w,
                        self.params.get(*weight),
                        out_c,
                        *kernel,
                        &g,
                        if needs_dx { Some(&mut dx) } else { None },
                        &mut dw,
                        &mut db,
                        &mut ws,
                    );
                    param_grads[wr]
                        .iter_mut()
                        .zip(&dw)
                        .for_each(|(a, b)| *a += b);
                    param_grads[br]
                        .iter_mut()
                        .zip(&db)
                        .for_each(|(a, b)| *a += b);
                    if needs_dx {
                        accumulate(&mut grads, &self.nodes, *x, 0, &dx);
                    }
                }
                Op::Unary { x, kind } => {
                    let dx = pointwise_backward(&self.nodes[x.0].value, &node.value, &g, *kind);
                    accumulate(&mut grads, &self.nodes, *x, 0, &dx);
                }
                Op::AvgPool2 { x } => {
                    let v = &self.nodes[x.0].value;
                    let dx = avg_pool2_backward(v.channels(), v.height(), v.width(), &g);
                    accumulate(&mut grads, &self.nodes, *x, 0, &dx);
                }
                Op::Resize { x } => {
                    let v = &self.nodes[x.0].value;
                    let dx = resize_bilinear_backward(
                        v.channels(),
                        v.height(),
                        v.width(),
                        node.value.height(),
                        node.value.width(),
                        &g,
                    );
                    accumulate(&mut grads, &self.nodes, *x, 0, &dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, &self.nodes, *a, 0, &g);
                    accumulate(&mut grads, &self.nodes, *b, 0, &g);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.data().len();
                        accumulate(&mut grads, &self.nodes, *p, 0, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Custom(op) => {
                    let inputs: Vec<&FeatureMap> =
                        op.inputs().iter().map(|i| &self.nodes[i.0].value).collect();
                    for c in op.backward(&inputs, &node.value, &g) {
                        let target = op.inputs()[c.input];
                        accumulate_strided(
                            &mut grads,
                            &self.nodes,
                            target,
                            c.offset,
                            c.stride,
                            &c.values,
                        );
                    }
                }
            }
            if matches!(
                node.op,
                Op::Leaf {
                    requires_grad: true
                }
            ) {
                grads[idx] = Some(g);
            }
        }
        TapeGrads {
            params: param_grads,
            nodes: grads,
        }
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        !matches!(
            self.nodes[id.0].op,
            Op::Leaf {
                requires_grad: false
            }
        )
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
    offset: usize,
    values: &[f64],
) {
    let full = nodes[id.0].value.data().len();
    assert!(
        offset + values.len() <= full,
        "gradient contribution out of range"
    );
    let buf = grads[id.0].get_or_insert_with(|| vec![0.0; full]);
    buf[offset..offset + values.len()]
        .iter_mut()
        .zip(values)
        .for_each(|(a, b)| *a += b);
}

fn accumulate_strided(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
    offset: usize,
    stride: usize,
    values: &[f64],
) {
    if stride <= 1 {
        return accumulate(grads, nodes, id, offset, values);
    }
    let full = nodes[id.0].value.data().len();
    assert!(
        values.is_empty() || offset + (values.len() - 1) * stride < full,
        "gradient contribution out of range"
    );
    let buf = grads[id.0].get_or_insert_with(|| vec![0.0; full]);
    for (i, v) in values.iter().enumerate() {
        buf[offset + i * stride] += v;
    }
}
