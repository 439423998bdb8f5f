//! Shared domain types: scenes, boxes, class catalog and ODC label vectors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which domain a scene came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn to_byte(self) -> u8 {
        match self {
            DomainTag::Source => 0,
            DomainTag::Target => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(DomainTag::Source),
            1 => Some(DomainTag::Target),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            DomainTag::Source => DomainTag::Target,
            DomainTag::Target => DomainTag::Source,
        }
    }
}

/// Half-open pixel box `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        !(self.x_min < self.x_max && self.y_min < self.y_max)
    }

    pub fn center(&self) -> (f32, f32) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn intersection_area(&self, other: &BBox) -> f32 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Overlap over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f32 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f32
            && self.y_max <= height as f32
    }

    /// Whether pixel `(x, y)` has its center inside the box.
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        px >= self.x_min && px < self.x_max && py >= self.y_min && py < self.y_max
    }
}

/// One annotated object: a box and its class id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: BBox,
    pub class: usize,
}

/// Object-level annotations of one scene. May be empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectSet {
    objects: Vec<Object>,
}

impl ObjectSet {
    pub fn new() -> Self {
        ObjectSet::default()
    }

    pub fn from_parts(boxes: Vec<BBox>, classes: Vec<usize>) -> Result<Self> {
        if boxes.len() != classes.len() {
            return Err(Error::Config(format!(
                "{} boxes but {} classes",
                boxes.len(),
                classes.len()
            )));
        }
        Ok(ObjectSet {
            objects: boxes
                .into_iter()
                .zip(classes)
                .map(|(bbox, class)| Object { bbox, class })
                .collect(),
        })
    }

    pub fn push(&mut self, bbox: BBox, class: usize) {
        self.objects.push(Object { bbox, class });
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Object> {
        self.objects.iter()
    }

    pub fn boxes(&self) -> impl Iterator<Item = &BBox> + '_ {
        self.objects.iter().map(|o| &o.bbox)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.objects.iter().map(|o| o.class)
    }

    pub fn as_slice(&self) -> &[Object] {
        &self.objects
    }
}

impl FromIterator<Object> for ObjectSet {
    fn from_iter<I: IntoIterator<Item = Object>>(iter: I) -> Self {
        ObjectSet {
            objects: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a ObjectSet {
    type Item = &'a Object;
    type IntoIter = std::slice::Iter<'a, Object>;

    fn into_iter(self) -> Self::IntoIter {
        self.objects.iter()
    }
}

/// The unit of training data.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub scene_id: u64,
    pub domain: DomainTag,
    pub height: usize,
    pub width: usize,
    /// `[3, height, width]`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[height, width]` class ids; present for source scenes and eval fixtures.
    pub pixel_labels: Option<Vec<u8>>,
    pub objects: ObjectSet,
}

/// Per-pixel class logits `[channels, height, width]` of a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f32>,
}

impl ScoreMap {
    pub fn new(channels: usize, height: usize, width: usize, logits: Vec<f32>) -> Result<Self> {
        if logits.len() != channels * height * width {
            return Err(Error::Config(format!(
                "score map of {} values for [{channels}, {height}, {width}]",
                logits.len()
            )));
        }
        Ok(ScoreMap {
            channels,
            height,
            width,
            logits,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|v| v.is_finite())
    }

    /// Soft-max over channels at pixel index `p` (row-major over `[height, width]`).
    pub fn softmax_at(&self, p: usize) -> Vec<f64> {
        let n = self.height * self.width;
        let z: Vec<f64> = (0..self.channels)
            .map(|c| self.logits[c * n + p] as f64)
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Per-pixel argmax over channels; ties resolve to the lowest channel.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.height * self.width;
        (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.logits[c * n + p] > self.logits[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Semantic categories shared by both domains. The ODC uses `N == C` classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "N")]
    n: usize,
    names: Vec<String>,
    /// Display color per class, fixed so that panels are comparable across runs.
    palette: Vec<[u8; 3]>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>, palette: Vec<[u8; 3]>) -> Result<Self> {
        let cat = ClassCatalog {
            c: names.len(),
            n: names.len(),
            names,
            palette,
        };
        cat.check()?;
        Ok(cat)
    }

    /// sky, building, road, car, pedestrian, sign, vegetation.
    pub fn urban() -> Self {
        let names = ["sky", "building", "road", "car", "pedestrian", "sign", "vegetation"];
        let palette = vec![
            [70, 130, 180],
            [70, 70, 70],
            [128, 64, 128],
            [0, 0, 142],
            [220, 20, 60],
            [220, 220, 0],
            [107, 142, 35],
        ];
        ClassCatalog::new(names.iter().map(|s| s.to_string()).collect(), palette)
            .expect("built-in catalog is valid")
    }

    pub fn check(&self) -> Result<()> {
        if self.c < 2 {
            return Err(Error::Config(format!("catalog needs C >= 2, got {}", self.c)));
        }
        if self.n != self.c {
            return Err(Error::Config(format!("catalog N = {} but C = {}", self.n, self.c)));
        }
        if self.names.len() != self.c || self.palette.len() != self.c {
            return Err(Error::Config("catalog names/palette length differs from C".into()));
        }
        if self.c > 255 {
            return Err(Error::Config("at most 255 classes fit the u8 label map".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn num_object_classes(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn palette(&self) -> &[[u8; 3]] {
        &self.palette
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cat: ClassCatalog =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("catalog.json: {e}")))?;
        cat.check()?;
        Ok(cat)
    }

    /// SHA-256 of the canonical JSON form; checkpoints pin it.
    pub fn hash(&self) -> [u8; 32] {
        let compact = serde_json::to_vec(self).expect("catalog serializes");
        Sha256::digest(&compact).into()
    }
}

/// A one-hot vector: a single 1 at `hot` among `len` entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OneHot {
    hot: usize,
    len: usize,
}

impl OneHot {
    /// 0-based position of the 1.
    pub fn index(&self) -> usize {
        self.hot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.hot] = 1.0;
        v
    }
}

/// `Y_M(c)` with the 1-based position `c` in `1..=m`.
pub fn make_onehot(c: usize, m: usize) -> Result<OneHot> {
    if c < 1 || c > m {
        return Err(Error::Range {
            what: "one-hot position",
            value: c as i64,
            lo: 1,
            hi: m as i64,
        });
    }
    Ok(OneHot { hot: c - 1, len: m })
}

/// ODC label for an object of 1-based class `c` among `n` classes.
///
/// Source objects map to `Y_2N(c)` and target objects to `Y_2N(N + c)`; the
/// inverse label swaps the two domain blocks.
pub fn odc_target(c: usize, domain: DomainTag, inverse: bool, n: usize) -> Result<OneHot> {
    if c < 1 || c > n {
        return Err(Error::Range {
            what: "object class",
            value: c as i64,
            lo: 1,
            hi: n as i64,
        });
    }
    let effective = if inverse { domain.flipped() } else { domain };
    match effective {
        DomainTag::Source => make_onehot(c, 2 * n),
        DomainTag::Target => make_onehot(n + c, 2 * n),
    }
}

/// Lists every violated scene invariant; empty when the scene is well formed.
pub fn validate_scene(s: &LabeledScene, catalog: &ClassCatalog) -> Vec<String> {
    validate_scene_sized(s, catalog, None)
}

/// As [`validate_scene`], additionally requiring the configured scene size.
pub fn validate_scene_sized(
    s: &LabeledScene,
    catalog: &ClassCatalog,
    size: Option<(usize, usize)>,
) -> Vec<String> {
    let mut out = Vec::new();
    let c = catalog.num_classes();
    if let Some((h, w)) = size {
        if s.height != h || s.width != w {
            out.push(format!(
                "size: {}x{} differs from configured {h}x{w}",
                s.height, s.width
            ));
        }
    }
    if s.image.len() != 3 * s.height * s.width {
        out.push(format!(
            "image: {} values for [3, {}, {}]",
            s.image.len(),
            s.height,
            s.width
        ));
    } else if s.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
        out.push("image: values outside [0, 1]".to_string());
    }
    match (&s.pixel_labels, s.domain) {
        (None, DomainTag::Source) => out.push("pixel_labels: required for SOURCE".to_string()),
        (Some(labels), _) => {
            if labels.len() != s.height * s.width {
                out.push(format!(
                    "pixel_labels: {} values for [{}, {}]",
                    labels.len(),
                    s.height,
                    s.width
                ));
            }
            if labels.iter().any(|&l| l as usize >= c) {
                out.push(format!("pixel_labels: class id outside 0..{c}"));
            }
        }
        (None, DomainTag::Target) => {}
    }
    for (i, o) in s.objects.iter().enumerate() {
        if o.bbox.is_empty() {
            out.push(format!("objects[{i}]: empty box"));
        } else if !o.bbox.within(s.width, s.height) {
            out.push(format!("objects[{i}]: box outside image bounds"));
        }
        if o.class >= c {
            out.push(format!("objects[{i}]: class {} outside 0..{c}", o.class));
        }
    }
    out
}
