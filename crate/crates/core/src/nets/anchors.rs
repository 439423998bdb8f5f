use crate::types::{BBox, ObjectSet};

pub const DEFAULT_MATCH_THRESHOLD: f32 = 0.5;

/// Default boxes of one detection scale.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
    pub size: f32,
    /// Width/height ratios; each yields `w = size*sqrt(r)`, `h = size/sqrt(r)`.
    pub ratios: Vec<f32>,
}

impl AnchorLevel {
    pub fn per_cell(&self) -> usize {
        self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w * self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All default boxes, ordered by level, then row, column and ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub levels: Vec<AnchorLevel>,
    pub anchors: Vec<BBox>,
    pub match_threshold: f32,
}

impl AnchorGrid {
    pub fn new(levels: Vec<AnchorLevel>, match_threshold: f32) -> Self {
        let mut anchors = Vec::new();
        for l in &levels {
            for y in 0..l.grid_h {
                for x in 0..l.grid_w {
                    let cx = (x as f32 + 0.5) * l.stride as f32;
                    let cy = (y as f32 + 0.5) * l.stride as f32;
                    for &r in &l.ratios {
                        let s = r.sqrt();
                        anchors.push(BBox::from_center(cx, cy, l.size * s, l.size / s));
                    }
                }
            }
        }
        AnchorGrid {
            levels,
            anchors,
            match_threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Index of the first anchor of each level.
    pub fn level_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut acc = 0;
        for l in &self.levels {
            out.push(acc);
            acc += l.len();
        }
        out
    }
}

/// `(dcx/wa, dcy/ha, log(w/wa), log(h/ha))`.
pub fn encode_offsets(anchor: &BBox, b: &BBox) -> [f32; 4] {
    let (acx, acy) = anchor.center();
    let (cx, cy) = b.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (cx - acx) / aw,
        (cy - acy) / ah,
        (b.width() / aw).ln(),
        (b.height() / ah).ln(),
    ]
}

pub fn decode_offsets(anchor: &BBox, d: [f32; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BBox::from_center(acx + d[0] * aw, acy + d[1] * ah, aw * d[2].exp(), ah * d[3].exp())
}

/// Per-anchor training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    /// 0 is background, `c + 1` is object class `c`.
    pub labels: Vec<usize>,
    /// Meaningful only for positives.
    pub offsets: Vec<[f32; 4]>,
    pub num_positive: usize,
}

/// MultiBox matching: an anchor is positive when its best IoU reaches the
/// threshold, and every object additionally claims its single best anchor.
pub fn match_anchors(grid: &AnchorGrid, objects: &ObjectSet) -> AnchorTargets {
    let n = grid.len();
    let mut labels = vec![0usize; n];
    let mut offsets = vec![[0.0f32; 4]; n];
    if objects.is_empty() {
        return AnchorTargets {
            labels,
            offsets,
            num_positive: 0,
        };
    }
    let objs = objects.as_slice();
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut best_anchor = vec![(0usize, f32::NEG_INFINITY); objs.len()];
    for (a, anchor) in grid.anchors.iter().enumerate() {
        let mut best = (0usize, f32::NEG_INFINITY);
        for (o, obj) in objs.iter().enumerate() {
            let iou = anchor.iou(&obj.bbox);
            if iou > best.1 {
                best = (o, iou);
            }
            if iou > best_anchor[o].1 {
                best_anchor[o] = (a, iou);
            }
        }
        if best.1 >= grid.match_threshold {
            assigned[a] = Some(best.0);
        }
    }
    for (o, &(a, _)) in best_anchor.iter().enumerate() {
        assigned[a] = Some(o);
    }
    let mut num_positive = 0;
    for (a, slot) in assigned.iter().enumerate() {
        if let Some(o) = *slot {
            labels[a] = objs[o].class + 1;
            offsets[a] = encode_offsets(&grid.anchors[a], &objs[o].bbox);
            num_positive += 1;
        }
    }
    AnchorTargets {
        labels,
        offsets,
        num_positive,
    }
}
