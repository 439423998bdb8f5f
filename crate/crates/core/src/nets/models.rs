use asda_autodiff::{Conv2dSpec, Graph, RoiCells, Scalar, Tensor, Var};
use rand::Rng;

use super::anchors::{AnchorGrid, AnchorLevel, DEFAULT_MATCH_THRESHOLD};
use super::params::{Bound, ParamGroup, ParamSet};
use crate::error::{Error, Result};
use crate::types::{BBox, LabeledScene, ObjectSet};

/// Sizes of the scaled-down networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Widths of the four stride-2 trunk blocks.
    pub base_widths: [usize; 4],
    pub anchor_sizes: [f32; 2],
    pub anchor_ratios: Vec<f32>,
    pub match_threshold: f32,
    /// Side of the pooled ROI grid.
    pub roi_size: usize,
    pub odc_width: usize,
    pub pdc_widths: [usize; 2],
}

impl ArchConfig {
    pub fn new(height: usize, width: usize, num_classes: usize) -> Self {
        ArchConfig {
            height,
            width,
            num_classes,
            base_widths: [16, 32, 64, 64],
            anchor_sizes: [12.0, 40.0],
            anchor_ratios: vec![1.0, 2.0, 0.5],
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            roi_size: 3,
            odc_width: 32,
            pdc_widths: [32, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of 16",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 || self.roi_size == 0 || self.anchor_ratios.is_empty() {
            return Err(Error::Config("invalid architecture sizes".into()));
        }
        Ok(())
    }

    /// Stride of the map used for ROI pooling (the largest detection map).
    pub fn roi_stride(&self) -> usize {
        4
    }

    pub fn det_classes(&self) -> usize {
        self.num_classes + 1
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        let level = |stride: usize, size: f32| AnchorLevel {
            grid_h: self.height / stride,
            grid_w: self.width / stride,
            stride,
            size,
            ratios: self.anchor_ratios.clone(),
        };
        AnchorGrid::new(
            vec![level(4, self.anchor_sizes[0]), level(16, self.anchor_sizes[1])],
            self.match_threshold,
        )
    }
}

const SAME3: Conv2dSpec = Conv2dSpec {
    stride: 1,
    pad: 1,
    output_padding: 0,
};
const DOWN3: Conv2dSpec = Conv2dSpec {
    stride: 2,
    pad: 1,
    output_padding: 0,
};
const POINT: Conv2dSpec = Conv2dSpec {
    stride: 1,
    pad: 0,
    output_padding: 0,
};
const UP2: Conv2dSpec = Conv2dSpec {
    stride: 2,
    pad: 1,
    output_padding: 0,
};
const UP4: Conv2dSpec = Conv2dSpec {
    stride: 4,
    pad: 2,
    output_padding: 0,
};

fn conv(g: &mut Graph<f32>, p: &Bound, name: &str, x: Var, spec: Conv2dSpec) -> Var {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    g.conv2d(x, w, Some(b), spec)
}

fn conv_relu(g: &mut Graph<f32>, p: &Bound, name: &str, x: Var, spec: Conv2dSpec) -> Var {
    let y = conv(g, p, name, x, spec);
    g.relu(y)
}

fn up(g: &mut Graph<f32>, p: &Bound, name: &str, x: Var, spec: Conv2dSpec) -> Var {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    g.conv_transpose2d(x, w, Some(b), spec)
}

/// How much of the DS network a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsPass {
    /// Both streams and the fused segmentation output.
    Full,
    /// Detection stream only (target images in the plain multi-task setting).
    Detection,
    /// Detection stream plus the segmentation feature tap, no decoder.
    DetectionAndFeature,
    /// Segmentation output only (inference).
    Segmentation,
}

/// Graph handles produced by [`DsModel::forward`].
#[derive(Clone, Debug)]
pub struct DsOutputs {
    /// `[B, C, H, W]` logits.
    pub seg: Option<Var>,
    /// Per level `[B, A*K, gh, gw]`, channel `a*K + k`.
    pub det_cls: Vec<Var>,
    /// Per level `[B, A*4, gh, gw]`, channel `a*4 + j`.
    pub det_loc: Vec<Var>,
    /// Segmentation-stream feature fed to the pixel classifier.
    pub feat_seg: Option<Var>,
    /// Detection-stream map used for ROI pooling.
    pub feat_det: Option<Var>,
}

/// The detection+segmentation network: a shared trunk, an FCN-style
/// segmentation stream with two skips, and a two-scale anchor detector. The
/// coarsest segmentation feature is fused with the coarsest detection feature.
///
/// Built with `with_detection = false` it is a lone FCN of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DsModel {
    pub arch: ArchConfig,
    pub params: ParamSet,
    pub with_detection: bool,
}

impl DsModel {
    pub fn new(arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(arch, true, rng)
    }

    pub fn segmentation_only(arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(arch, false, rng)
    }

    fn build(arch: ArchConfig, with_detection: bool, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let [w1, w2, w3, w4] = arch.base_widths;
        let c = arch.num_classes;
        let k = arch.det_classes();
        let a = arch.anchor_ratios.len();
        let mut p = ParamSet::new();
        use ParamGroup::*;
        p.push_layer("ds.conv1", Base, &[w1, 3, 3, 3], w1, rng);
        p.push_layer("ds.conv2", Base, &[w2, w1, 3, 3], w2, rng);
        p.push_layer("ds.conv3", Base, &[w3, w2, 3, 3], w3, rng);
        p.push_layer("ds.conv4", Base, &[w4, w3, 3, 3], w4, rng);
        p.push_layer("ds.conv5", SegFeature, &[w4, w4, 3, 3], w4, rng);
        if with_detection {
            p.push_layer("ds.det_a", Det, &[w2, w2, 3, 3], w2, rng);
            p.push_layer("ds.det_b", Det, &[w4, w4, 3, 3], w4, rng);
            p.push_layer("ds.head_a_cls", Det, &[a * k, w2, 3, 3], a * k, rng);
            p.push_layer("ds.head_a_loc", Det, &[a * 4, w2, 3, 3], a * 4, rng);
            p.push_layer("ds.head_b_cls", Det, &[a * k, w4, 3, 3], a * k, rng);
            p.push_layer("ds.head_b_loc", Det, &[a * 4, w4, 3, 3], a * 4, rng);
        }
        let fused = if with_detection { 2 * w4 } else { w4 };
        p.push_layer("ds.score16", SegDecoder, &[c, fused, 1, 1], c, rng);
        p.push_layer("ds.up16", SegDecoder, &[c, c, 4, 4], c, rng);
        p.push_layer("ds.score8", SegDecoder, &[c, w3, 1, 1], c, rng);
        p.push_layer("ds.up8", SegDecoder, &[c, c, 4, 4], c, rng);
        p.push_layer("ds.score4", SegDecoder, &[c, w2, 1, 1], c, rng);
        p.push_layer("ds.up4", SegDecoder, &[c, c, 8, 8], c, rng);
        Ok(DsModel {
            arch,
            params: p,
            with_detection,
        })
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        self.arch.anchor_grid()
    }

    /// `images` is `[B, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound, images: Var, pass: DsPass) -> DsOutputs {
        let shape = g.shape(images).to_vec();
        assert_eq!(
            &shape[1..],
            &[3, self.arch.height, self.arch.width],
            "image batch does not match the configured size"
        );
        let want_det = self.with_detection && pass != DsPass::Segmentation;
        let want_seg = matches!(pass, DsPass::Full | DsPass::Segmentation);
        let want_feat = want_seg || pass == DsPass::DetectionAndFeature;

        let b1 = conv_relu(g, p, "ds.conv1", images, DOWN3);
        let b2 = conv_relu(g, p, "ds.conv2", b1, DOWN3);
        let b3 = conv_relu(g, p, "ds.conv3", b2, DOWN3);
        let b4 = conv_relu(g, p, "ds.conv4", b3, DOWN3);
        let feat_seg = want_feat.then(|| conv_relu(g, p, "ds.conv5", b4, SAME3));

        let mut out = DsOutputs {
            seg: None,
            det_cls: Vec::new(),
            det_loc: Vec::new(),
            feat_seg,
            feat_det: None,
        };
        let needs_det_b = self.with_detection && (want_det || want_seg);
        let det_b = needs_det_b.then(|| conv_relu(g, p, "ds.det_b", b4, SAME3));
        if want_det {
            let det_a = conv_relu(g, p, "ds.det_a", b2, SAME3);
            let det_b = det_b.expect("det_b computed");
            out.det_cls = vec![
                conv(g, p, "ds.head_a_cls", det_a, SAME3),
                conv(g, p, "ds.head_b_cls", det_b, SAME3),
            ];
            out.det_loc = vec![
                conv(g, p, "ds.head_a_loc", det_a, SAME3),
                conv(g, p, "ds.head_b_loc", det_b, SAME3),
            ];
            out.feat_det = Some(det_a);
        }
        if want_seg {
            let f = feat_seg.expect("seg feature computed");
            let fused = match det_b {
                Some(d) => g.concat_channels(&[f, d]),
                None => f,
            };
            let s16 = conv(g, p, "ds.score16", fused, POINT);
            let u16 = up(g, p, "ds.up16", s16, UP2);
            let s8 = conv(g, p, "ds.score8", b3, POINT);
            let m8 = g.add(u16, s8);
            let u8 = up(g, p, "ds.up8", m8, UP2);
            let s4 = conv(g, p, "ds.score4", b2, POINT);
            let m4 = g.add(u8, s4);
            out.seg = Some(up(g, p, "ds.up4", m4, UP4));
        }
        out
    }

    /// Per-pixel logits `[B, C, H, W]` for a batch, segmentation stream only.
    pub fn predict(&self, scenes: &[&LabeledScene]) -> Tensor<f32> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let x = g.constant(images_tensor(scenes));
        let out = self.forward(&mut g, &p, x, DsPass::Segmentation);
        g.value(out.seg.expect("segmentation output")).clone()
    }
}

/// Pixel-level domain classifier: one convolution then two transposed
/// convolutions back to input resolution, 2 logits per pixel (channel 0 is source).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelClassifier {
    pub params: ParamSet,
}

impl PixelClassifier {
    pub fn new(arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let [a, b] = arch.pdc_widths;
        let w4 = arch.base_widths[3];
        let mut p = ParamSet::new();
        let g = ParamGroup::PixelClassifier;
        p.push_layer("pdc.conv", g, &[a, w4, 3, 3], a, rng);
        p.push_layer("pdc.up1", g, &[a, b, 8, 8], b, rng);
        p.push_layer("pdc.up2", g, &[b, 2, 8, 8], 2, rng);
        PixelClassifier { params: p }
    }

    /// `feat` is the `[B, D, H/16, W/16]` segmentation feature; output `[B, 2, H, W]`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound, feat: Var) -> Var {
        let h = conv_relu(g, p, "pdc.conv", feat, SAME3);
        let h = up(g, p, "pdc.up1", h, UP4);
        let h = g.relu(h);
        up(g, p, "pdc.up2", h, UP4)
    }
}

/// Object-level domain classifier over ROI-pooled detection features.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectClassifier {
    pub params: ParamSet,
    pub roi_size: usize,
    pub outputs: usize,
}

impl ObjectClassifier {
    /// `outputs` is `2N` for joint (class, domain) labels or 2 for domain only.
    pub fn new(arch: &ArchConfig, outputs: usize, rng: &mut impl Rng) -> Self {
        let d = arch.base_widths[1];
        let w = arch.odc_width;
        let mut p = ParamSet::new();
        let g = ParamGroup::ObjectClassifier;
        p.push_layer("odc.conv1", g, &[w, d, 3, 3], w, rng);
        p.push_layer("odc.conv2", g, &[w, w, 3, 3], w, rng);
        p.push_layer("odc.fc", g, &[outputs, w], outputs, rng);
        ObjectClassifier {
            params: p,
            roi_size: arch.roi_size,
            outputs,
        }
    }

    /// Logits `[R, outputs]` for the regions `rois` of `feat`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound, feat: Var, rois: &[RoiCells]) -> Var {
        let pooled = g.roi_pool(feat, rois, self.roi_size);
        self.forward_pooled(g, p, pooled)
    }

    /// Logits for already pooled features `[R, D, p, p]`.
    pub fn forward_pooled(&self, g: &mut Graph<f32>, p: &Bound, pooled: Var) -> Var {
        let h = conv_relu(g, p, "odc.conv1", pooled, SAME3);
        let h = conv_relu(g, p, "odc.conv2", h, SAME3);
        let h = g.global_avg_pool(h);
        let w = p.get("odc.fc.w");
        let b = p.get("odc.fc.b");
        g.linear(h, w, Some(b))
    }
}

/// Feature cells covered by a pixel box on a map of the given stride; the
/// footprint is `floor(min/s) .. ceil(max/s)`, widened to one cell if empty.
pub fn box_to_cells(b: &BBox, stride: usize, grid_h: usize, grid_w: usize, batch: usize) -> RoiCells {
    let s = stride as f32;
    let span = |lo: f32, hi: f32, n: usize| {
        let a = ((lo / s).floor().max(0.0) as usize).min(n - 1);
        let z = ((hi / s).ceil().max(0.0) as usize).min(n);
        if z <= a {
            log::debug!("box {b:?} collapses below one feature cell; widening");
            (a, a + 1)
        } else {
            (a, z)
        }
    };
    let (y0, y1) = span(b.y_min, b.y_max, grid_h);
    let (x0, x1) = span(b.x_min, b.x_max, grid_w);
    RoiCells {
        batch,
        y0,
        y1,
        x0,
        x1,
    }
}

/// ROIs for every object of every image, in image-then-object order.
pub fn rois_for(objects: &[&ObjectSet], stride: usize, grid_h: usize, grid_w: usize) -> Vec<RoiCells> {
    objects
        .iter()
        .enumerate()
        .flat_map(|(i, set)| set.boxes().map(move |b| box_to_cells(b, stride, grid_h, grid_w, i)))
        .collect()
}

/// Stacks scene images into `[B, 3, H, W]`.
pub fn images_tensor(scenes: &[&LabeledScene]) -> Tensor<f32> {
    assert!(!scenes.is_empty());
    let (h, w) = (scenes[0].height, scenes[0].width);
    let mut data = Vec::with_capacity(scenes.len() * 3 * h * w);
    for s in scenes {
        assert_eq!((s.height, s.width), (h, w), "mixed scene sizes in a batch");
        data.extend_from_slice(&s.image);
    }
    Tensor::new(vec![scenes.len(), 3, h, w], data)
}

/// Flat index of head channel `ch` at anchor cell `(y, x)` of batch item `b`
/// in a `[B, channels, gh, gw]` head map.
fn head_index(b: usize, ch: usize, y: usize, x: usize, channels: usize, gh: usize, gw: usize) -> usize {
    ((b * channels + ch) * gh + y) * gw + x
}

/// Per-image detection outputs in anchor order: `logits[anchor*K + k]`,
/// `offsets[anchor*4 + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetFlat<T> {
    pub logits: Vec<T>,
    pub offsets: Vec<T>,
}

/// Reorders head maps into per-image anchor-major vectors.
pub fn flatten_det<T: Scalar>(
    grid: &AnchorGrid,
    k: usize,
    cls: &[&Tensor<T>],
    loc: &[&Tensor<T>],
) -> Vec<DetFlat<T>> {
    let batch = cls[0].dim(0);
    (0..batch)
        .map(|b| {
            let mut logits = Vec::with_capacity(grid.len() * k);
            let mut offsets = Vec::with_capacity(grid.len() * 4);
            for (li, l) in grid.levels.iter().enumerate() {
                let a_n = l.per_cell();
                let (cd, ld) = (cls[li].data(), loc[li].data());
                for y in 0..l.grid_h {
                    for x in 0..l.grid_w {
                        for a in 0..a_n {
                            for kk in 0..k {
                                logits.push(cd[head_index(b, a * k + kk, y, x, a_n * k, l.grid_h, l.grid_w)]);
                            }
                            for j in 0..4 {
                                offsets.push(ld[head_index(b, a * 4 + j, y, x, a_n * 4, l.grid_h, l.grid_w)]);
                            }
                        }
                    }
                }
            }
            DetFlat { logits, offsets }
        })
        .collect()
}

/// Inverse of [`flatten_det`]: scatters per-image flat gradients back into
/// head-map shaped tensors `(cls, loc)` per level.
pub fn unflatten_det<T: Scalar>(grid: &AnchorGrid, k: usize, flat: &[DetFlat<T>]) -> (Vec<Tensor<T>>, Vec<Tensor<T>>) {
    let batch = flat.len();
    let mut cls: Vec<Tensor<T>> = grid
        .levels
        .iter()
        .map(|l| Tensor::zeros(vec![batch, l.per_cell() * k, l.grid_h, l.grid_w]))
        .collect();
    let mut loc: Vec<Tensor<T>> = grid
        .levels
        .iter()
        .map(|l| Tensor::zeros(vec![batch, l.per_cell() * 4, l.grid_h, l.grid_w]))
        .collect();
    for (b, f) in flat.iter().enumerate() {
        let mut anchor = 0;
        for (li, l) in grid.levels.iter().enumerate() {
            let a_n = l.per_cell();
            let cd = cls[li].data_mut();
            for y in 0..l.grid_h {
                for x in 0..l.grid_w {
                    for a in 0..a_n {
                        for kk in 0..k {
                            cd[head_index(b, a * k + kk, y, x, a_n * k, l.grid_h, l.grid_w)] = f.logits[anchor * k + kk];
                        }
                        anchor += 1;
                    }
                }
            }
        }
        let mut anchor = 0;
        for (li, l) in grid.levels.iter().enumerate() {
            let a_n = l.per_cell();
            let ld = loc[li].data_mut();
            for y in 0..l.grid_h {
                for x in 0..l.grid_w {
                    for a in 0..a_n {
                        for j in 0..4 {
                            ld[head_index(b, a * 4 + j, y, x, a_n * 4, l.grid_h, l.grid_w)] = f.offsets[anchor * 4 + j];
                        }
                        anchor += 1;
                    }
                }
            }
        }
    }
    (cls, loc)
}
