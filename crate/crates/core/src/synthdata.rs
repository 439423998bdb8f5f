//! Procedural two-domain "toy urban" scenes and the weak labels derived from them.
//!
//! Scenes are a stack of background strata (sky, a ragged building skyline,
//! road) with movable objects drawn on top. Both domains share the geometry
//! distribution; they differ only in [`DomainStyle`]: palette, per-pixel
//! texture noise and brightness.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{self, encode_scene, scene_file_name, sha256_hex, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::types::{BBox, ClassCatalog, DomainTag, LabeledScene, ObjectSet};

pub const SKY: usize = 0;
pub const BUILDING: usize = 1;
pub const ROAD: usize = 2;
pub const CAR: usize = 3;
pub const PEDESTRIAN: usize = 4;
pub const SIGN: usize = 5;
pub const VEGETATION: usize = 6;

/// Components smaller than this many pixels yield no box.
pub const DEFAULT_MIN_AREA: usize = 9;

/// Appearance of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub name: String,
    /// Base RGB color per class, in `[0, 1]`.
    pub palette: Vec<[f32; 3]>,
    pub texture_noise_sigma: f32,
    pub brightness_shift: f32,
    /// Relative object-size jitter; 0 keeps geometry identical across styles.
    pub shape_jitter: f32,
    pub rng_seed: u64,
}

const SYNTH_PALETTE: [[f32; 3]; 7] = [
    [0.55, 0.75, 0.95],
    [0.60, 0.45, 0.38],
    [0.36, 0.36, 0.40],
    [0.85, 0.18, 0.15],
    [0.95, 0.80, 0.30],
    [0.25, 0.50, 0.95],
    [0.22, 0.62, 0.22],
];

/// Rotates `rgb` about the gray axis by `degrees` (a hue rotation).
pub fn rotate_hue(rgb: [f32; 3], degrees: f32) -> [f32; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let r3 = (1.0f32 / 3.0).sqrt() * s;
    let m = [
        [c + k, k - r3, k + r3],
        [k + r3, c + k, k - r3],
        [k - r3, k + r3, c + k],
    ];
    let mut out = [0.0; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]).clamp(0.0, 1.0);
    }
    out
}

impl DomainStyle {
    /// The labelled synthetic domain: clean palette, little noise.
    pub fn synth_style() -> Self {
        DomainStyle {
            name: "synth".into(),
            palette: SYNTH_PALETTE.to_vec(),
            texture_noise_sigma: 0.03,
            brightness_shift: 0.0,
            shape_jitter: 0.0,
            rng_seed: 0,
        }
    }

    /// The "real" domain: hue-rotated palette, darker, noisier.
    pub fn real_style() -> Self {
        DomainStyle {
            name: "real".into(),
            palette: SYNTH_PALETTE.iter().map(|&c| rotate_hue(c, 120.0)).collect(),
            texture_noise_sigma: 0.09,
            brightness_shift: -0.08,
            shape_jitter: 0.0,
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Triangle,
}

/// Vertical placement rule of a movable object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Anywhere inside the road band.
    OnRoad,
    /// Standing on the building/road boundary.
    Horizon,
    /// Inside the building band.
    Facade,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundKind {
    pub class: usize,
    pub shape: ShapeKind,
    pub count: (usize, usize),
    pub width: (usize, usize),
    pub height: (usize, usize),
    pub placement: Placement,
}

/// A background band; the last stratum absorbs the remaining rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Stratum {
    pub class: usize,
    pub min_frac: f32,
    pub max_frac: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub strata: Vec<Stratum>,
    /// Max vertical offset of skyline blocks at the top of the second stratum.
    pub skyline_jitter: usize,
    /// Drawn in order; later objects occlude earlier ones.
    pub foreground: Vec<ForegroundKind>,
    pub min_area: usize,
    /// Std of foreground box-corner noise as a fraction of box size; 0 disables.
    pub box_noise: f32,
}

impl SceneSpec {
    /// The default 7-class urban layout.
    pub fn urban(height: usize, width: usize) -> Self {
        let s = |v: usize| (v * width / 64).max(1);
        let t = |v: usize| (v * height / 64).max(1);
        SceneSpec {
            height,
            width,
            strata: vec![
                Stratum { class: SKY, min_frac: 0.20, max_frac: 0.35 },
                Stratum { class: BUILDING, min_frac: 0.25, max_frac: 0.40 },
                Stratum { class: ROAD, min_frac: 1.0, max_frac: 1.0 },
            ],
            skyline_jitter: t(6),
            foreground: vec![
                ForegroundKind {
                    class: VEGETATION,
                    shape: ShapeKind::Ellipse,
                    count: (0, 2),
                    width: (s(10), s(18)),
                    height: (t(8), t(14)),
                    placement: Placement::Horizon,
                },
                ForegroundKind {
                    class: SIGN,
                    shape: ShapeKind::Triangle,
                    count: (0, 2),
                    width: (s(6), s(10)),
                    height: (t(6), t(9)),
                    placement: Placement::Facade,
                },
                ForegroundKind {
                    class: CAR,
                    shape: ShapeKind::Rect,
                    count: (1, 3),
                    width: (s(10), s(18)),
                    height: (t(5), t(9)),
                    placement: Placement::OnRoad,
                },
                ForegroundKind {
                    class: PEDESTRIAN,
                    shape: ShapeKind::Ellipse,
                    count: (0, 3),
                    width: (s(3), s(5)),
                    height: (t(8), t(14)),
                    placement: Placement::Horizon,
                },
            ],
            min_area: DEFAULT_MIN_AREA,
            box_noise: 0.0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.height < 4 || self.width < 4 || self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::Config(format!("scene size {}x{} unsupported", self.height, self.width)));
        }
        if self.strata.is_empty() {
            return Err(Error::Config("at least one stratum required".into()));
        }
        for s in &self.strata {
            if s.class >= num_classes || !(0.0..=1.0).contains(&s.min_frac) || s.min_frac > s.max_frac {
                return Err(Error::Config(format!("invalid stratum {s:?}")));
            }
        }
        for f in &self.foreground {
            if f.class >= num_classes
                || f.count.0 > f.count.1
                || f.width.0 > f.width.1
                || f.height.0 > f.height.1
                || f.width.0 == 0
                || f.height.0 == 0
            {
                return Err(Error::Config(format!("invalid foreground kind {f:?}")));
            }
        }
        if self.box_noise < 0.0 {
            return Err(Error::Config("box_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-class binary masks rasterized from boxes: `mask[c, y, x]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoarseMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
}

impl CoarseMap {
    pub fn get(&self, c: usize, y: usize, x: usize) -> bool {
        self.mask[(c * self.height + y) * self.width + x] != 0
    }
}

/// What the generator drew for one movable object.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    pub class: usize,
    pub shape: ShapeKind,
    /// Tight box of all pixels the shape covers, before occlusion.
    pub bbox: BBox,
    pub visible_pixels: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Overrides the asymmetric rule (labels only for source scenes).
    pub attach_pixel_labels: Option<bool>,
}

fn scene_rng(style: &DomainStyle, domain: DomainTag, id: u64) -> ChaCha8Rng {
    let mut z = style
        .rng_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(id.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(domain.to_byte() as u64 + 1);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

fn shape_covers(shape: ShapeKind, b: &BBox, x: usize, y: usize) -> bool {
    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
    if px < b.x_min || px >= b.x_max || py < b.y_min || py >= b.y_max {
        return false;
    }
    let (cx, cy) = b.center();
    match shape {
        ShapeKind::Rect => true,
        ShapeKind::Ellipse => {
            let dx = (px - cx) / (0.5 * b.width());
            let dy = (py - cy) / (0.5 * b.height());
            dx * dx + dy * dy <= 1.0
        }
        ShapeKind::Triangle => {
            let frac = (py - b.y_min) / b.height();
            (px - cx).abs() <= frac * 0.5 * b.width() + 0.5
        }
    }
}

/// Renders one scene. Deterministic in `(spec, style, domain, id)`.
pub fn generate_scene(
    spec: &SceneSpec,
    style: &DomainStyle,
    domain: DomainTag,
    id: u64,
) -> Result<LabeledScene> {
    generate_scene_with(spec, style, domain, id, GenerateOptions::default()).map(|(s, _)| s)
}

/// As [`generate_scene`], also returning the movable objects that were placed.
pub fn generate_scene_with(
    spec: &SceneSpec,
    style: &DomainStyle,
    domain: DomainTag,
    id: u64,
    opts: GenerateOptions,
) -> Result<(LabeledScene, Vec<PlacedObject>)> {
    let num_classes = style.palette.len();
    spec.validate(num_classes)?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = scene_rng(style, domain, id);

    // Row where stratum k+1 begins, per column.
    let mut bounds: Vec<Vec<usize>> = Vec::new();
    let mut top = 0usize;
    for (k, s) in spec.strata.iter().enumerate().take(spec.strata.len() - 1) {
        let frac = rng.random_range(s.min_frac..=s.max_frac);
        top = (top + (frac * h as f32).round() as usize).min(h);
        let mut row = vec![top; w];
        if k == 0 && spec.skyline_jitter > 0 {
            let mut x = 0;
            while x < w {
                let bw = rng.random_range(6..=14).min(w - x);
                let off = rng.random_range(-(spec.skyline_jitter as i64)..=spec.skyline_jitter as i64);
                let y = (top as i64 + off).clamp(1, h as i64 - 1) as usize;
                row[x..x + bw].fill(y);
                x += bw;
            }
        }
        bounds.push(row);
    }
    let mut labels = vec![0u8; h * w];
    let mut region = vec![0usize; h * w];
    for x in 0..w {
        for y in 0..h {
            let k = bounds.iter().take_while(|b| y >= b[x]).count();
            labels[y * w + x] = spec.strata[k].class as u8;
            region[y * w + x] = k;
        }
    }
    let n_strata = spec.strata.len();
    let road_top = bounds.last().map_or(0, |b| b.iter().copied().min().unwrap_or(0));
    let facade = (
        bounds.first().map_or(0, |b| b.iter().copied().max().unwrap_or(0)),
        road_top,
    );

    // Movable objects; ids start after strata so occlusion is tracked per object.
    let mut owner = vec![usize::MAX; h * w];
    let mut placed: Vec<PlacedObject> = Vec::new();
    for kind in &spec.foreground {
        let count = rng.random_range(kind.count.0..=kind.count.1);
        for _ in 0..count {
            let jitter = |rng: &mut ChaCha8Rng, v: usize| {
                let j = if style.shape_jitter > 0.0 {
                    1.0 + style.shape_jitter * rng.random_range(-1.0f32..=1.0)
                } else {
                    1.0
                };
                ((v as f32 * j).round() as usize).max(1)
            };
            let bw = rng.random_range(kind.width.0..=kind.width.1);
            let bh = rng.random_range(kind.height.0..=kind.height.1);
            let (bw, bh) = (jitter(&mut rng, bw), jitter(&mut rng, bh));
            if bw > w || bh > h {
                return Err(Error::Generation(format!(
                    "object {bw}x{bh} of class {} does not fit a {w}x{h} scene",
                    kind.class
                )));
            }
            let x0 = rng.random_range(0..=w - bw);
            let y_bottom = match kind.placement {
                Placement::OnRoad => {
                    let lo = (road_top + bh.div_ceil(2)).min(h);
                    rng.random_range(lo..=h)
                }
                Placement::Horizon => {
                    let lo = road_top.saturating_sub(1);
                    rng.random_range(lo..=(road_top + 3).min(h))
                }
                Placement::Facade => {
                    let (a, b) = (facade.0.min(facade.1), facade.1.max(facade.0));
                    let lo = (a + bh).min(h);
                    rng.random_range(lo..=b.max(lo))
                }
            };
            let y0 = y_bottom.clamp(bh, h) - bh;
            let bbox = BBox::new(x0 as f32, y0 as f32, (x0 + bw) as f32, (y0 + bh) as f32);
            let idx = placed.len();
            let (mut tx0, mut ty0, mut tx1, mut ty1) = (usize::MAX, usize::MAX, 0, 0);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    if shape_covers(kind.shape, &bbox, x, y) {
                        labels[y * w + x] = kind.class as u8;
                        owner[y * w + x] = idx;
                        tx0 = tx0.min(x);
                        ty0 = ty0.min(y);
                        tx1 = tx1.max(x + 1);
                        ty1 = ty1.max(y + 1);
                    }
                }
            }
            if tx0 == usize::MAX {
                continue;
            }
            placed.push(PlacedObject {
                class: kind.class,
                shape: kind.shape,
                bbox: BBox::new(tx0 as f32, ty0 as f32, tx1 as f32, ty1 as f32),
                visible_pixels: 0,
            });
        }
    }
    for &o in &owner {
        if o != usize::MAX {
            placed[o].visible_pixels += 1;
        }
    }

    // Boxes: strata from connected components, movable objects from placements.
    let strata_classes: Vec<usize> = spec.strata.iter().map(|s| s.class).collect();
    let mut objects: ObjectSet = boxes_from_mask_classes(&labels, h, w, num_classes, spec.min_area, |c| {
        strata_classes.contains(&c)
    })
    .iter()
    .copied()
    .collect();
    let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
    let placed: Vec<PlacedObject> = placed
        .into_iter()
        .filter(|p| p.visible_pixels >= spec.min_area)
        .collect();
    for p in &placed {
        let mut b = p.bbox;
        if spec.box_noise > 0.0 {
            let (sx, sy) = (spec.box_noise * b.width(), spec.box_noise * b.height());
            let mut j = |v: f32, s: f32| v + s * noise.sample(&mut rng);
            b = BBox::new(j(b.x_min, sx), j(b.y_min, sy), j(b.x_max, sx), j(b.y_max, sy));
            b = BBox::new(
                b.x_min.clamp(0.0, w as f32 - 1.0),
                b.y_min.clamp(0.0, h as f32 - 1.0),
                b.x_max.clamp(0.0, w as f32),
                b.y_max.clamp(0.0, h as f32),
            );
            if b.x_max <= b.x_min + 1.0 {
                b.x_max = (b.x_min + 1.0).min(w as f32);
            }
            if b.y_max <= b.y_min + 1.0 {
                b.y_max = (b.y_min + 1.0).min(h as f32);
            }
        }
        objects.push(b, p.class);
    }

    let image = paint(&labels, &region, &owner, n_strata, h, w, style, &mut rng);
    let attach = opts
        .attach_pixel_labels
        .unwrap_or(domain == DomainTag::Source);
    Ok((
        LabeledScene {
            scene_id: id,
            domain,
            height: h,
            width: w,
            image,
            pixel_labels: attach.then_some(labels),
            objects,
        },
        placed,
    ))
}

#[allow(clippy::too_many_arguments)]
fn paint(
    labels: &[u8],
    region: &[usize],
    owner: &[usize],
    n_strata: usize,
    h: usize,
    w: usize,
    style: &DomainStyle,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let n_owner = owner.iter().filter(|&&o| o != usize::MAX).max().map_or(0, |&m| m + 1);
    // Per-region and per-object multiplicative tint.
    let tints: Vec<f32> = (0..n_strata + n_owner)
        .map(|_| rng.random_range(0.85f32..=1.15))
        .collect();
    let noise = Normal::new(0.0f32, style.texture_noise_sigma.max(0.0)).expect("valid sigma");
    let mut image = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let class = labels[p] as usize;
            let tint = if owner[p] != usize::MAX {
                tints[n_strata + owner[p]]
            } else {
                tints[region[p]]
            };
            // Domain-invariant structure: facade windows, lane dashes, sky gradient.
            let pattern = match class {
                BUILDING if x % 4 >= 2 && y % 5 >= 3 => 0.65,
                ROAD if y % 8 == 0 && (x / 4) % 2 == 0 => 1.35,
                SKY => 1.0 - 0.25 * (y as f32 / h as f32),
                CAR if (y + x) % 7 == 0 => 0.8,
                _ => 1.0,
            };
            let base = style.palette[class];
            for ch in 0..3 {
                let mut v = base[ch] * tint * pattern + style.brightness_shift;
                if style.texture_noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                image[ch * h * w + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Tight boxes of 4-connected same-class components, dropping components
/// smaller than `min_area` pixels. Boxes appear in row-major order of each
/// component's first pixel.
pub fn boxes_from_mask(
    labels: &[u8],
    height: usize,
    width: usize,
    catalog: &ClassCatalog,
    min_area: usize,
) -> ObjectSet {
    boxes_from_mask_classes(labels, height, width, catalog.num_classes(), min_area, |_| true)
}

fn boxes_from_mask_classes(
    labels: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
    min_area: usize,
    keep: impl Fn(usize) -> bool,
) -> ObjectSet {
    assert_eq!(labels.len(), height * width);
    let mut seen = vec![false; labels.len()];
    let mut out = ObjectSet::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        let class = labels[start] as usize;
        if seen[start] || class >= num_classes || !keep(class) {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / width, p % width);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] as usize == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        if area >= min_area {
            out.push(BBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32), class);
        }
    }
    out
}

/// Rasterizes boxes into per-class masks; overlapping boxes set several channels.
pub fn coarse_map_from_boxes(objects: &ObjectSet, height: usize, width: usize, channels: usize) -> CoarseMap {
    let mut mask = vec![0u8; channels * height * width];
    for o in objects {
        if o.class >= channels {
            continue;
        }
        let xa = o.bbox.x_min.max(0.0).floor() as usize;
        let ya = o.bbox.y_min.max(0.0).floor() as usize;
        let xb = (o.bbox.x_max.ceil().max(0.0) as usize).min(width);
        let yb = (o.bbox.y_max.ceil().max(0.0) as usize).min(height);
        for y in ya..yb {
            for x in xa..xb {
                if o.bbox.covers_pixel(x, y) {
                    mask[(o.class * height + y) * width + x] = 1;
                }
            }
        }
    }
    CoarseMap {
        channels,
        height,
        width,
        mask,
    }
}

/// Parameters of one generated split.
#[derive(Clone, Debug)]
pub struct SplitRequest {
    pub name: String,
    pub n_scenes: usize,
    pub spec: SceneSpec,
    pub style: DomainStyle,
    pub domain: DomainTag,
    pub seed: u64,
    pub attach_pixel_labels: Option<bool>,
}

/// Writes `n_scenes` scenes, `catalog.json` and `manifest.json` into `dir`.
pub fn generate_split(dir: &Path, req: &SplitRequest, catalog: &ClassCatalog) -> Result<Manifest> {
    if req.n_scenes == 0 {
        return Err(Error::Config("a split needs at least one scene".into()));
    }
    if req.style.palette.len() != catalog.num_classes() {
        return Err(Error::Config("style palette size differs from catalog".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let style = req.style.clone().with_seed(req.seed);
    let opts = GenerateOptions {
        attach_pixel_labels: req.attach_pixel_labels,
    };
    let mut scenes = Vec::with_capacity(req.n_scenes);
    let mut labelled = true;
    for id in 0..req.n_scenes as u64 {
        let (scene, _) = generate_scene_with(&req.spec, &style, req.domain, id, opts)?;
        labelled &= scene.pixel_labels.is_some();
        let bytes = encode_scene(&scene);
        let file = scene_file_name(id);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        scenes.push(ManifestEntry {
            id,
            domain: req.domain,
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        split: req.name.clone(),
        domain: req.domain,
        seed: req.seed,
        height: req.spec.height,
        width: req.spec.width,
        pixel_labels: labelled,
        count: scenes.len(),
        scenes,
    };
    fs::write(dir.join(dataset::CATALOG_FILE), catalog.to_json() + "\n")
        .map_err(|e| Error::io(dir.join(dataset::CATALOG_FILE), e))?;
    dataset::write_json(&dir.join(dataset::MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
