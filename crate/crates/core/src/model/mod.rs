//! The network: a small conv backbone, an FPN, shared per-level heads, the
//! bottom branch, an optional semantic branch and the mask heads.

mod checkpoint;
pub mod mask_head;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::{FeatureMap, NumericsError, ParamId, ParamStore};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, ModelManifest, CHECKPOINT_VERSION,
};
pub use mask_head::{
    apply_mask_head, apply_mask_heads_batched, cell_center, coord_channels, make_relative_coords,
    num_filter_params, unpack_filter_params, CoordMode, MaskHead,
};

use mask_head::{layer_dims, DynamicHeadOp};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input {height}x{width} is not divisible by {multiple}; pad to {padded_height}x{padded_width}")]
    InputSize {
        height: usize,
        width: usize,
        multiple: usize,
        padded_height: usize,
        padded_width: usize,
    },
    #[error("pyramid level {0:?} is missing")]
    MissingLevel(Level),
    #[error("filter parameter vector has length {actual}, expected {expected}")]
    FilterParamLength { expected: usize, actual: usize },
}

/// Pyramid level `Pk` has stride `2^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    P2,
    P3,
    P4,
    P5,
    P6,
    P7,
}

impl Level {
    pub const ALL: [Level; 6] = [
        Level::P2,
        Level::P3,
        Level::P4,
        Level::P5,
        Level::P6,
        Level::P7,
    ];

    pub fn index(self) -> u32 {
        self as u32 + 2
    }

    pub fn stride(self) -> usize {
        1 << self.index()
    }

    pub fn from_index(k: u32) -> Option<Level> {
        Self::ALL.get(k.checked_sub(2)? as usize).copied()
    }

    pub fn name(self) -> String {
        format!("P{}", self.index())
    }
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix(['P', 'p'])
            .and_then(|k| k.parse::<u32>().ok())
            .and_then(Level::from_index)
            .ok_or_else(|| format!("unknown pyramid level '{s}'"))
    }
}

/// Geometry of one mask head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskHeadShape {
    pub c_bottom: usize,
    pub depth: usize,
    pub width: usize,
}

/// Where mask-head weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskHeadKind {
    /// Generated per location by the controller.
    Dynamic,
    /// One learned head shared by every instance.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Levels the detection heads run on.
    pub fpn_levels: Vec<Level>,
    /// Stem width followed by the widths at strides 2, 4, 8, 16 and 32.
    pub backbone_channels: Vec<usize>,
    pub fpn_channels: usize,
    pub head_channels: usize,
    pub tower_depth: usize,
    pub bottom_channels: usize,
    pub bottom_convs: usize,
    pub c_bottom: usize,
    pub mask_head_depth: usize,
    pub mask_head_width: usize,
    pub bottom_level: Level,
    pub upsample_factor: usize,
    pub num_classes: usize,
    pub coord_norm: f64,
    pub coord_mode: CoordMode,
    pub mask_head_kind: MaskHeadKind,
    /// Output classes of the semantic branch; 0 disables it.
    pub semantic_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fpn_levels: vec![Level::P3, Level::P4, Level::P5],
            backbone_channels: vec![8, 8, 16, 32, 32, 32],
            fpn_channels: 32,
            head_channels: 32,
            tower_depth: 2,
            bottom_channels: 32,
            bottom_convs: 4,
            c_bottom: 8,
            mask_head_depth: 3,
            mask_head_width: 8,
            bottom_level: Level::P2,
            upsample_factor: 2,
            num_classes: 3,
            coord_norm: 32.0,
            coord_mode: CoordMode::Relative,
            mask_head_kind: MaskHeadKind::Dynamic,
            semantic_classes: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.fpn_levels.is_empty() {
            return fail("fpn_levels is empty");
        }
        let mut sorted = self.fpn_levels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.fpn_levels.len() {
            return fail("fpn_levels has duplicates");
        }
        if self.backbone_channels.len() != 6 || self.backbone_channels.contains(&0) {
            return fail("backbone_channels needs six positive widths");
        }
        if self.fpn_channels == 0 || self.head_channels == 0 || self.bottom_channels == 0 {
            return fail("channel widths must be positive");
        }
        if self.c_bottom == 0 || self.mask_head_depth == 0 || self.mask_head_width == 0 {
            return fail("mask head needs depth, width and c_bottom >= 1");
        }
        if !matches!(self.bottom_level, Level::P2 | Level::P3) {
            return fail("bottom_level must be P2 or P3");
        }
        if !matches!(self.upsample_factor, 1 | 2 | 4) {
            return fail("upsample_factor must be 1, 2 or 4");
        }
        if self.upsample_factor > self.bottom_level.stride() {
            return fail("upsample_factor exceeds the bottom stride");
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive");
        }
        if !(self.coord_norm.is_finite() && self.coord_norm > 0.0) {
            return fail("coord_norm must be positive");
        }
        Ok(())
    }

    pub fn mask_shape(&self) -> MaskHeadShape {
        MaskHeadShape {
            c_bottom: self.c_bottom,
            depth: self.mask_head_depth,
            width: self.mask_head_width,
        }
    }

    pub fn num_filter_params(&self) -> usize {
        num_filter_params(&self.mask_shape())
    }

    /// Every level the FPN materializes, ascending.
    pub fn pyramid_levels(&self) -> Vec<Level> {
        let mut lowest = self.bottom_level;
        for &l in &self.fpn_levels {
            lowest = lowest.min(l.min(Level::P5));
        }
        if self.semantic_classes > 0 {
            lowest = Level::P2;
        }
        let top = self
            .fpn_levels
            .iter()
            .copied()
            .max()
            .unwrap_or(Level::P5)
            .max(Level::P5);
        Level::ALL
            .into_iter()
            .filter(|&l| l >= lowest && l <= top)
            .collect()
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.pyramid_levels().last().map_or(32, |l| l.stride())
    }

    /// Stride of the mask logits handed to the losses.
    pub fn mask_stride(&self) -> usize {
        self.bottom_level.stride() / self.upsample_factor
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layers {
    stem: ConvIds,
    blocks: Vec<ConvIds>,
    lateral: BTreeMap<Level, ConvIds>,
    smooth: BTreeMap<Level, ConvIds>,
    p6: Option<ConvIds>,
    p7: Option<ConvIds>,
    cls_tower: Vec<ConvIds>,
    box_tower: Vec<ConvIds>,
    cls_logits: ConvIds,
    box_reg: ConvIds,
    ctr: ConvIds,
    controller: Option<ConvIds>,
    bottom: Vec<ConvIds>,
    bottom_out: ConvIds,
    static_head: Vec<ConvIds>,
    semantic: Option<ConvIds>,
}

enum Init {
    He,
    Normal(f64),
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
        bias: f64,
        decay: bool,
    ) -> ConvIds {
        let std = match init {
            Init::He => (2.0 / (cin * k * k) as f64).sqrt(),
            Init::Normal(s) => s,
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = cout * cin * k * k;
        let weights: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        let w = self
            .store
            .add(format!("{name}.weight"), &[cout, cin, k, k], weights, decay);
        let b = self
            .store
            .add(format!("{name}.bias"), &[cout], vec![bias; cout], false);
        ConvIds { w, b }
    }
}

/// Parameters plus the layer table that addresses them.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layers: Layers,
}

/// Focal-loss prior: initial foreground probability 0.01.
const CLS_PRIOR_BIAS: f64 = -4.59511985013459;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let ch = &config.backbone_channels;
        let f = config.fpn_channels;
        let h = config.head_channels;

        let stem = b.conv("backbone.stem", 3, ch[0], 3, Init::He, 0.0, true);
        let blocks = (1..=5)
            .map(|i| {
                b.conv(
                    &format!("backbone.block{i}"),
                    ch[i - 1],
                    ch[i],
                    3,
                    Init::He,
                    0.0,
                    true,
                )
            })
            .collect();

        let levels = config.pyramid_levels();
        let mut lateral = BTreeMap::new();
        let mut smooth = BTreeMap::new();
        for &l in levels.iter().filter(|&&l| l <= Level::P5) {
            let cin = ch[l.index() as usize];
            lateral.insert(
                l,
                b.conv(
                    &format!("fpn.lateral.{}", l.name()),
                    cin,
                    f,
                    1,
                    Init::He,
                    0.0,
                    true,
                ),
            );
            smooth.insert(
                l,
                b.conv(
                    &format!("fpn.smooth.{}", l.name()),
                    f,
                    f,
                    3,
                    Init::He,
                    0.0,
                    true,
                ),
            );
        }
        let p6 = levels
            .contains(&Level::P6)
            .then(|| b.conv("fpn.P6", f, f, 3, Init::He, 0.0, true));
        let p7 = levels
            .contains(&Level::P7)
            .then(|| b.conv("fpn.P7", f, f, 3, Init::He, 0.0, true));

        let tower = |b: &mut Builder, name: &str| -> Vec<ConvIds> {
            (0..config.tower_depth)
                .map(|i| {
                    let cin = if i == 0 { f } else { h };
                    b.conv(
                        &format!("head.{name}_tower.{i}"),
                        cin,
                        h,
                        3,
                        Init::He,
                        0.0,
                        true,
                    )
                })
                .collect()
        };
        let cls_tower = tower(&mut b, "cls");
        let box_tower = tower(&mut b, "box");
        let tower_out = if config.tower_depth == 0 { f } else { h };
        let cls_logits = b.conv(
            "head.cls_logits",
            tower_out,
            config.num_classes,
            3,
            Init::Normal(0.01),
            CLS_PRIOR_BIAS,
            true,
        );
        let box_reg = b.conv(
            "head.box_reg",
            tower_out,
            4,
            3,
            Init::Normal(0.01),
            0.0,
            true,
        );
        let ctr = b.conv(
            "head.centerness",
            tower_out,
            1,
            3,
            Init::Normal(0.01),
            0.0,
            true,
        );
        let controller = (config.mask_head_kind == MaskHeadKind::Dynamic).then(|| {
            b.conv(
                "head.controller",
                tower_out,
                config.num_filter_params(),
                3,
                Init::Normal(0.01),
                0.0,
                false,
            )
        });

        let bottom = (0..config.bottom_convs)
            .map(|i| {
                let cin = if i == 0 { f } else { config.bottom_channels };
                b.conv(
                    &format!("bottom.conv{i}"),
                    cin,
                    config.bottom_channels,
                    3,
                    Init::He,
                    0.0,
                    true,
                )
            })
            .collect();
        let bottom_in = if config.bottom_convs == 0 {
            f
        } else {
            config.bottom_channels
        };
        let bottom_out = b.conv(
            "bottom.out",
            bottom_in,
            config.c_bottom,
            1,
            Init::He,
            0.0,
            true,
        );

        let static_head = if config.mask_head_kind == MaskHeadKind::Static {
            layer_dims(&config.mask_shape())
                .into_iter()
                .enumerate()
                .map(|(i, (cin, cout))| {
                    b.conv(
                        &format!("mask_head.static{i}"),
                        cin,
                        cout,
                        1,
                        Init::He,
                        0.0,
                        true,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let semantic = (config.semantic_classes > 0).then(|| {
            let cin = 4 * f;
            b.conv(
                "semantic.out",
                cin,
                config.semantic_classes,
                1,
                Init::Normal(0.01),
                0.0,
                true,
            )
        });

        let layers = Layers {
            stem,
            blocks,
            lateral,
            smooth,
            p6,
            p7,
            cls_tower,
            box_tower,
            cls_logits,
            box_reg,
            ctr,
            controller,
            bottom,
            bottom_out,
            static_head,
            semantic,
        };
        Ok(Self {
            config,
            params: b.store,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameter values; the layout must already match.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "parameter vector has length {}, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        self.params.flat_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn check_input(&self, image: &FeatureMap) -> Result<(), ModelError> {
        if image.channels() != 3 {
            return Err(NumericsError::ChannelMismatch {
                expected: 3,
                actual: image.channels(),
            }
            .into());
        }
        let m = self.config.size_multiple();
        let (h, w) = (image.height(), image.width());
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(ModelError::InputSize {
                height: h,
                width: w,
                multiple: m,
                padded_height: h.div_ceil(m).max(1) * m,
                padded_width: w.div_ceil(m).max(1) * m,
            });
        }
        Ok(())
    }

    fn conv_relu(&self, t: &mut Tape<'_>, x: NodeId, c: ConvIds) -> Result<NodeId, ModelError> {
        let y = t.conv(x, c.w, c.b)?;
        Ok(t.relu(y))
    }

    fn pyramid_nodes(
        &self,
        t: &mut Tape<'_>,
        image: NodeId,
    ) -> Result<BTreeMap<Level, NodeId>, ModelError> {
        let l = &self.layers;
        let mut x = self.conv_relu(t, image, l.stem)?;
        // c[i] has stride 2^i
        let mut c = vec![x];
        for block in &l.blocks {
            x = self.conv_relu(t, x, *block)?;
            x = t.avg_pool2(x)?;
            c.push(x);
        }
        let mut out = BTreeMap::new();
        let mut inner: Option<NodeId> = None;
        for (&level, lat) in l.lateral.iter().rev() {
            let lateral = t.conv(c[level.index() as usize], lat.w, lat.b)?;
            let merged = match inner {
                Some(above) => {
                    let up = t.upsample(above, 2)?;
                    t.add(lateral, up)?
                }
                None => lateral,
            };
            inner = Some(merged);
            let s = l.smooth[&level];
            out.insert(level, t.conv(merged, s.w, s.b)?);
        }
        if let Some(p6) = l.p6 {
            let p5 = out[&Level::P5];
            let pooled = t.avg_pool2(p5)?;
            let v = t.conv(pooled, p6.w, p6.b)?;
            out.insert(Level::P6, v);
            if let Some(p7) = l.p7 {
                let r = t.relu(v);
                let pooled = t.avg_pool2(r)?;
                out.insert(Level::P7, t.conv(pooled, p7.w, p7.b)?);
            }
        }
        Ok(out)
    }

    fn head_nodes(
        &self,
        t: &mut Tape<'_>,
        level: Level,
        x: NodeId,
    ) -> Result<HeadNodes, ModelError> {
        let l = &self.layers;
        let mut cls = x;
        for c in &l.cls_tower {
            cls = self.conv_relu(t, cls, *c)?;
        }
        let mut bx = x;
        for c in &l.box_tower {
            bx = self.conv_relu(t, bx, *c)?;
        }
        Ok(HeadNodes {
            level,
            cls: t.conv(cls, l.cls_logits.w, l.cls_logits.b)?,
            controller: match l.controller {
                Some(c) => Some(t.conv(cls, c.w, c.b)?),
                None => None,
            },
            box_reg: t.conv(bx, l.box_reg.w, l.box_reg.b)?,
            ctr: t.conv(bx, l.ctr.w, l.ctr.b)?,
        })
    }

    fn bottom_node(
        &self,
        t: &mut Tape<'_>,
        pyr: &BTreeMap<Level, NodeId>,
    ) -> Result<NodeId, ModelError> {
        let base_level = self.config.bottom_level;
        let base = *pyr
            .get(&base_level)
            .ok_or(ModelError::MissingLevel(base_level))?;
        let (h, w, s) = {
            let v = t.value(base);
            (v.height(), v.width(), v.stride())
        };
        let mut sum = base;
        for level in Level::ALL
            .into_iter()
            .filter(|&l| l > base_level && l <= Level::P5)
        {
            let p = *pyr.get(&level).ok_or(ModelError::MissingLevel(level))?;
            let up = t.resize(p, h, w, s)?;
            sum = t.add(sum, up)?;
        }
        let mut x = sum;
        for c in &self.layers.bottom {
            x = self.conv_relu(t, x, *c)?;
        }
        Ok(t.conv(x, self.layers.bottom_out.w, self.layers.bottom_out.b)?)
    }

    fn semantic_node(
        &self,
        t: &mut Tape<'_>,
        pyr: &BTreeMap<Level, NodeId>,
    ) -> Result<Option<NodeId>, ModelError> {
        let Some(sem) = self.layers.semantic else {
            return Ok(None);
        };
        let p2 = *pyr
            .get(&Level::P2)
            .ok_or(ModelError::MissingLevel(Level::P2))?;
        let (h, w, s) = {
            let v = t.value(p2);
            (v.height(), v.width(), v.stride())
        };
        let mut parts = vec![p2];
        for level in [Level::P3, Level::P4, Level::P5] {
            let p = *pyr.get(&level).ok_or(ModelError::MissingLevel(level))?;
            parts.push(t.resize(p, h, w, s)?);
        }
        let cat = t.concat(&parts)?;
        Ok(Some(t.conv(cat, sem.w, sem.b)?))
    }

    /// Records the full forward pass of one image on a fresh tape.
    pub fn forward(&self, image: &FeatureMap) -> Result<ForwardPass<'_>, ModelError> {
        self.check_input(image)?;
        let mut tape = Tape::new(&self.params);
        let img = tape.constant(image.clone());
        let pyramid = self.pyramid_nodes(&mut tape, img)?;
        let mut heads = Vec::with_capacity(self.config.fpn_levels.len());
        let mut levels = self.config.fpn_levels.clone();
        levels.sort();
        for level in levels {
            heads.push(self.head_nodes(&mut tape, level, pyramid[&level])?);
        }
        let bottom = self.bottom_node(&mut tape, &pyramid)?;
        let semantic = self.semantic_node(&mut tape, &pyramid)?;
        Ok(ForwardPass {
            model: self,
            tape,
            pyramid,
            heads,
            bottom,
            semantic,
            static_cache: None,
        })
    }

    /// Parameters of the head generated at `(y, x)` of one level's controller map.
    pub fn filter_params_at(&self, outputs: &HeadOutputs, y: usize, x: usize) -> Option<Vec<f64>> {
        let c = outputs.controller.as_ref()?;
        Some((0..c.channels()).map(|ch| c.at(ch, y, x)).collect())
    }

    /// The shared head of a static-head model.
    pub fn static_head(&self) -> Option<MaskHead> {
        if self.layers.static_head.is_empty() {
            return None;
        }
        let layers = self
            .layers
            .static_head
            .iter()
            .map(|c| {
                let shape = &self.params.info(c.w).shape;
                crate::numerics::ConvSpec::new(
                    shape[1],
                    shape[0],
                    1,
                    self.params.get(c.w).to_vec(),
                    self.params.get(c.b).to_vec(),
                )
                .expect("stored layer is consistent")
            })
            .collect();
        Some(MaskHead { layers })
    }

    /// Mask head for a generator at `(y, x)` on `outputs`' level.
    pub fn mask_head_at(
        &self,
        outputs: &HeadOutputs,
        y: usize,
        x: usize,
    ) -> Result<MaskHead, ModelError> {
        match self.config.mask_head_kind {
            MaskHeadKind::Dynamic => {
                let theta = self.filter_params_at(outputs, y, x).ok_or_else(|| {
                    ModelError::Config("head outputs lack a controller map".into())
                })?;
                unpack_filter_params(&theta, &self.config.mask_shape())
            }
            MaskHeadKind::Static => Ok(self.static_head().expect("static model has a static head")),
        }
    }

    /// Coordinate channels for a generator at input-space `origin` over a bottom map.
    pub fn coords_for(&self, origin: (f64, f64), bottom: &FeatureMap) -> FeatureMap {
        coord_channels(
            self.config.coord_mode,
            origin,
            bottom.height(),
            bottom.width(),
            bottom.stride(),
            self.config.coord_norm,
        )
    }
}

/// Tape nodes of one level's head outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub level: Level,
    pub cls: NodeId,
    pub ctr: NodeId,
    pub box_reg: NodeId,
    pub controller: Option<NodeId>,
}

/// Head outputs of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub level: Level,
    pub cls_logits: FeatureMap,
    pub ctr_logits: FeatureMap,
    /// Raw regression outputs; see [`HeadOutputs::box_distances`].
    pub box_reg: FeatureMap,
    pub controller: Option<FeatureMap>,
}

impl HeadOutputs {
    /// `(l, t, r, b)` distances in input pixels: `exp(raw) * stride`.
    pub fn box_distances(&self, y: usize, x: usize) -> [f64; 4] {
        let s = self.level.stride() as f64;
        std::array::from_fn(|k| self.box_reg.at(k, y, x).exp() * s)
    }
}

/// Pyramid features keyed by level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<Level, FeatureMap>,
}

impl FeaturePyramid {
    pub fn get(&self, level: Level) -> Option<&FeatureMap> {
        self.levels.get(&level)
    }
}

/// A recorded forward pass; mask logits are added on demand.
pub struct ForwardPass<'m> {
    model: &'m Model,
    pub tape: Tape<'m>,
    pub pyramid: BTreeMap<Level, NodeId>,
    pub heads: Vec<HeadNodes>,
    pub bottom: NodeId,
    pub semantic: Option<NodeId>,
    static_cache: Option<NodeId>,
}

impl<'m> ForwardPass<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn head_outputs(&self) -> Vec<HeadOutputs> {
        self.heads
            .iter()
            .map(|h| HeadOutputs {
                level: h.level,
                cls_logits: self.tape.value(h.cls).clone(),
                ctr_logits: self.tape.value(h.ctr).clone(),
                box_reg: self.tape.value(h.box_reg).clone(),
                controller: h.controller.map(|c| self.tape.value(c).clone()),
            })
            .collect()
    }

    pub fn bottom_features(&self) -> &FeatureMap {
        self.tape.value(self.bottom)
    }

    /// Upsampled mask logits for the instance generated at cell `(y, x)` of
    /// head `head_index`. The result has stride `config.mask_stride()`.
    pub fn mask_logits(
        &mut self,
        head_index: usize,
        y: usize,
        x: usize,
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.model.config;
        let level = self.heads[head_index].level;
        let s = level.stride();
        let origin = (cell_center(x, s), cell_center(y, s));
        let coords = self.model.coords_for(origin, self.tape.value(self.bottom));
        let logits = match (cfg.mask_head_kind, self.heads[head_index].controller) {
            (MaskHeadKind::Dynamic, Some(ctrl)) => {
                let op = DynamicHeadOp::new(self.bottom, ctrl, (y, x), coords, &cfg.mask_shape());
                let value = op.forward(self.tape.value(self.bottom), self.tape.value(ctrl));
                self.tape.custom(Box::new(op), value)
            }
            (MaskHeadKind::Dynamic, None) => unreachable!("dynamic model always has a controller"),
            (MaskHeadKind::Static, _) => {
                let location_free = cfg.coord_mode != CoordMode::Relative;
                if let (true, Some(cached)) = (location_free, self.static_cache) {
                    return Ok(cached);
                }
                let c = self.tape.constant(coords);
                let mut h = self.tape.concat(&[self.bottom, c])?;
                let last = self.model.layers.static_head.len() - 1;
                for (i, conv) in self.model.layers.static_head.iter().enumerate() {
                    h = self.tape.conv(h, conv.w, conv.b)?;
                    if i < last {
                        h = self.tape.relu(h);
                    }
                }
                let up = self.tape.upsample(h, cfg.upsample_factor)?;
                if location_free {
                    self.static_cache = Some(up);
                }
                return Ok(up);
            }
        };
        Ok(self.tape.upsample(logits, cfg.upsample_factor)?)
    }
}

/// Backbone and FPN features of one image.
pub fn build_pyramid(model: &Model, image: &FeatureMap) -> Result<FeaturePyramid, ModelError> {
    model.check_input(image)?;
    let mut t = Tape::new(&model.params);
    let img = t.constant(image.clone());
    let nodes = model.pyramid_nodes(&mut t, img)?;
    Ok(FeaturePyramid {
        levels: nodes
            .into_iter()
            .map(|(l, n)| (l, t.value(n).clone()))
            .collect(),
    })
}

/// Applies the shared heads to every configured level of `pyramid`.
pub fn run_heads(model: &Model, pyramid: &FeaturePyramid) -> Result<Vec<HeadOutputs>, ModelError> {
    let mut t = Tape::new(&model.params);
    let mut levels = model.config.fpn_levels.clone();
    levels.sort();
    let mut out = Vec::with_capacity(levels.len());
    for level in levels {
        let p = pyramid.get(level).ok_or(ModelError::MissingLevel(level))?;
        let x = t.constant(p.clone());
        let h = model.head_nodes(&mut t, level, x)?;
        out.push(HeadOutputs {
            level,
            cls_logits: t.value(h.cls).clone(),
            ctr_logits: t.value(h.ctr).clone(),
            box_reg: t.value(h.box_reg).clone(),
            controller: h.controller.map(|c| t.value(c).clone()),
        });
    }
    Ok(out)
}

/// Bottom-branch features at the bottom level's stride.
pub fn build_bottom_features(
    model: &Model,
    pyramid: &FeaturePyramid,
) -> Result<FeatureMap, ModelError> {
    let mut t = Tape::new(&model.params);
    let nodes: BTreeMap<Level, NodeId> = pyramid
        .levels
        .iter()
        .map(|(&l, m)| (l, t.constant(m.clone())))
        .collect();
    let b = model.bottom_node(&mut t, &nodes)?;
    Ok(t.value(b).clone())
}
