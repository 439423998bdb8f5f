use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use asda_core::dataset::Split;
use asda_core::eval::predict_labels;
use asda_core::nets::ArchConfig;
use asda_core::trainer::{TrainConfig, TrainState, CHECKPOINT_FILE, CONFIG_FILE, FINAL_CHECKPOINT_FILE, METRICS_FILE};
use asda_core::{ClassCatalog, Error, LabeledScene};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde_json::Value;

use crate::manifest::{DirLock, RunManifest};
use crate::CliResult;

const PANEL_SCALE: u32 = 3;
const PLOT_W: u32 = 640;
const PLOT_H: u32 = 360;
const MARGIN: u32 = 24;
const SERIES_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

pub struct ReportArgs {
    pub runs: Vec<PathBuf>,
    pub split: PathBuf,
    pub samples: usize,
    pub out: PathBuf,
}

struct RunCurves {
    name: String,
    mode: String,
    loss: Vec<(f64, f64)>,
    miou: Vec<(f64, f64)>,
}

fn read_curves(dir: &Path) -> CliResult<RunCurves> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (mut loss, mut miou) = (Vec::new(), Vec::new());
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).map_err(|e| Error::format(&path, e.to_string()))?;
        let step = v["step"].as_f64().ok_or_else(|| Error::format(&path, "metric line without step"))?;
        if let Some(t) = v["total"].as_f64() {
            loss.push((step, t));
        }
        if let Some(m) = v["target_miou"].as_f64() {
            miou.push((step, m));
        }
    }
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let mode = TrainConfig::from_toml(&cfg_text)?.mode.to_string();
    Ok(RunCurves {
        name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        mode,
        loss,
        miou,
    })
}

/// Line chart of several series on shared axes; axis ranges go in the summary.
fn line_plot(series: &[&[(f64, f64)]]) -> (RgbImage, [f64; 4]) {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let pts = series.iter().flat_map(|s| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (img, [0.0; 4]);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (l, r, t, b) = (MARGIN as f32, (PLOT_W - MARGIN) as f32, MARGIN as f32, (PLOT_H - MARGIN) as f32);
    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, (l, b), (r, b), axis);
    draw_line_segment_mut(&mut img, (l, t), (l, b), axis);
    let map = |(x, y): (f64, f64)| {
        (
            l + ((x - x0) / (x1 - x0)) as f32 * (r - l),
            b - ((y - y0) / (y1 - y0)) as f32 * (b - t),
        )
    };
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(SERIES_COLORS[i % SERIES_COLORS.len()]);
        for w in s.windows(2) {
            draw_line_segment_mut(&mut img, map(w[0]), map(w[1]), c);
        }
        if s.len() == 1 {
            let (x, y) = map(s[0]);
            draw_filled_rect_mut(&mut img, Rect::at(x as i32 - 2, y as i32 - 2).of_size(5, 5), c);
        }
    }
    (img, [x0, x1, y0, y1])
}

fn save(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)).into())
}

fn colorize(labels: &[u8], catalog: &ClassCatalog, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let c = labels[(y * w + x) as usize] as usize;
        Rgb(catalog.palette().get(c).copied().unwrap_or([0, 0, 0]))
    })
}

fn scene_rgb(s: &LabeledScene) -> RgbImage {
    let (w, h) = (s.width as u32, s.height as u32);
    let hw = s.width * s.height;
    RgbImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        let px = |ch: usize| (s.image[ch * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Tiles images left to right with a 2-pixel white gutter.
fn hstack(tiles: &[RgbImage]) -> RgbImage {
    let gap = 2;
    let h = tiles.iter().map(|t| t.height()).max().unwrap_or(0);
    let w = tiles.iter().map(|t| t.width()).sum::<u32>() + gap * tiles.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x = 0;
    for t in tiles {
        image::imageops::replace(&mut out, t, x as i64, 0);
        x += t.width() + gap;
    }
    out
}

fn legend(catalog: &ClassCatalog) -> RgbImage {
    let sw = 24u32;
    let mut img = RgbImage::from_pixel(sw * catalog.num_classes() as u32, sw, Rgb([255, 255, 255]));
    for (i, c) in catalog.palette().iter().enumerate() {
        draw_filled_rect_mut(&mut img, Rect::at(i as i32 * sw as i32, 0).of_size(sw, sw), Rgb(*c));
    }
    img
}

fn checkpoint_of(dir: &Path) -> Option<PathBuf> {
    [FINAL_CHECKPOINT_FILE, CHECKPOINT_FILE].iter().map(|f| dir.join(f)).find(|p| p.is_file())
}

/// Curves, legend, `samples` prediction panels and `summary.md` in `out`.
pub fn report(a: &ReportArgs) -> CliResult<Vec<PathBuf>> {
    let curves: Vec<RunCurves> = a.runs.iter().map(|d| read_curves(d)).collect::<CliResult<_>>()?;
    let split = Split::load(&a.split)?;
    if split.scenes.iter().any(|s| s.pixel_labels.is_none()) {
        return Err(Error::format(&a.split, "report panels need a split with pixel labels").into());
    }
    let _lock = DirLock::acquire(&a.out)?;
    let mut outputs = Vec::new();
    let mut md = String::from("# Run report\n\n");

    let loss: Vec<&[(f64, f64)]> = curves.iter().map(|c| c.loss.as_slice()).collect();
    let (img, loss_axes) = line_plot(&loss);
    let p = a.out.join("loss_curve.png");
    save(&img, &p)?;
    outputs.push(p);
    let miou: Vec<&[(f64, f64)]> = curves.iter().map(|c| c.miou.as_slice()).collect();
    let (img, miou_axes) = line_plot(&miou);
    let p = a.out.join("miou_curve.png");
    save(&img, &p)?;
    outputs.push(p);

    md.push_str("## Runs\n\n| color | run | mode | steps | final target mIoU |\n|---|---|---|---|---|\n");
    for (i, c) in curves.iter().enumerate() {
        let [r, g, b] = SERIES_COLORS[i % SERIES_COLORS.len()];
        let last = c.miou.last().map(|&(_, m)| format!("{:.2}", 100.0 * m)).unwrap_or_else(|| "-".into());
        let steps = c.loss.last().map(|&(s, _)| s as u64).unwrap_or(0);
        writeln!(md, "| #{r:02x}{g:02x}{b:02x} | {} | {} | {steps} | {last} |", c.name, c.mode).unwrap();
    }
    writeln!(
        md,
        "\n`loss_curve.png`: steps {:.0}..{:.0}, total loss {:.4}..{:.4}.  \n`miou_curve.png`: steps {:.0}..{:.0}, mIoU {:.4}..{:.4}.\n",
        loss_axes[0], loss_axes[1], loss_axes[2], loss_axes[3], miou_axes[0], miou_axes[1], miou_axes[2], miou_axes[3]
    )
    .unwrap();

    let catalog = &split.catalog;
    let p = a.out.join("legend.png");
    save(&legend(catalog), &p)?;
    outputs.push(p);
    md.push_str("## Legend\n\n| swatch | class |\n|---|---|\n");
    for (i, (name, [r, g, b])) in catalog.names().iter().zip(catalog.palette()).enumerate() {
        writeln!(md, "| {i}: #{r:02x}{g:02x}{b:02x} | {name} |").unwrap();
    }

    let k = a.samples.min(split.scenes.len());
    let scenes = &split.scenes[..k];
    let arch = ArchConfig::new(split.manifest.height, split.manifest.width, catalog.num_classes());
    let mut preds: Vec<Vec<Vec<u8>>> = Vec::new();
    for dir in &a.runs {
        let ck = checkpoint_of(dir).ok_or_else(|| Error::io(dir.join(FINAL_CHECKPOINT_FILE), std::io::ErrorKind::NotFound.into()))?;
        let model = TrainState::load_model(&ck, catalog, arch.clone())?;
        preds.push(predict_labels(&model, scenes, 16));
    }
    md.push_str("\n## Panels\n\nEach panel: input, ground truth, then one prediction per run in table order.\n\n");
    for (i, s) in scenes.iter().enumerate() {
        let (w, h) = (s.width as u32, s.height as u32);
        let mut tiles = vec![scene_rgb(s), colorize(s.pixel_labels.as_ref().expect("checked above"), catalog, w, h)];
        tiles.extend(preds.iter().map(|p| colorize(&p[i], catalog, w, h)));
        let tiles: Vec<RgbImage> = tiles
            .iter()
            .map(|t| image::imageops::resize(t, w * PANEL_SCALE, h * PANEL_SCALE, image::imageops::FilterType::Nearest))
            .collect();
        let p = a.out.join(format!("panel_{i:03}.png"));
        save(&hstack(&tiles), &p)?;
        writeln!(md, "- `panel_{i:03}.png`: scene {}", s.scene_id).unwrap();
        outputs.push(p);
    }
    let p = a.out.join("summary.md");
    fs::write(&p, md).map_err(|e| Error::io(&p, e))?;
    outputs.push(p);

    let mut hashes = BTreeMap::new();
    hashes.insert(split.manifest.split.clone(), split.manifest.content_hash());
    RunManifest::new("report", None, hashes).finish(&a.out, outputs.clone())?;
    Ok(outputs)
}
