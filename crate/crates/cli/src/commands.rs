use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use asda_core::dataset::{read_catalog, read_manifest, write_json, Split};
use asda_core::eval::{evaluate_model, UndefinedClass};
use asda_core::nets::ArchConfig;
use asda_core::synthdata::{generate_split, SceneSpec, SplitRequest};
use asda_core::trainer::{
    run_experiment, run_ladder, LadderProtocol, Mode, RunOptions, TrainConfig, TrainData, TrainState,
    CHECKPOINT_FILE, CONFIG_FILE, FINAL_CHECKPOINT_FILE,
};
use asda_core::{ClassCatalog, Error};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::manifest::{fresh_run_dir, DirLock, RunManifest};
use crate::{CliError, CliResult};

pub const SPLITS: [&str; 3] = ["source-train", "target-train", "target-val"];

pub struct GenDataArgs {
    pub root: PathBuf,
    pub size: usize,
    pub source: usize,
    pub target: usize,
    pub val: usize,
    pub seed: u64,
}

/// Writes the three benchmark splits under `root`.
pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    if a.size < 32 || !a.size.is_multiple_of(16) || a.size > 1024 {
        return Err(CliError::Usage(format!(
            "--size must be a multiple of 16 between 32 and 1024, got {}",
            a.size
        )));
    }
    if a.source == 0 || a.target == 0 || a.val == 0 {
        return Err(CliError::Usage("every split needs at least one scene".into()));
    }
    let _lock = DirLock::acquire(&a.root)?;
    let proto = LadderProtocol::standard();
    let spec = SceneSpec::urban(a.size, a.size);
    let catalog = ClassCatalog::urban();
    let counts = [a.source, a.target, a.val];
    let mut hashes = BTreeMap::new();
    let mut outputs = Vec::new();
    for ((plan, n), offset) in proto.splits().into_iter().zip(counts).zip(1u64..) {
        let dir = a.root.join(plan.name);
        let req = SplitRequest {
            name: plan.name.to_string(),
            n_scenes: n,
            spec: spec.clone(),
            style: plan.style.clone(),
            domain: plan.domain,
            seed: a.seed + offset,
            attach_pixel_labels: plan.pixel_labels,
        };
        let m = generate_split(&dir, &req, &catalog)?;
        log::info!("{}: {} scenes, seed {}", plan.name, m.count, m.seed);
        hashes.insert(plan.name.to_string(), m.content_hash());
        outputs.push(dir);
    }
    let mut manifest = RunManifest::new("gen-data", None, hashes);
    manifest.seeds = (1..=3).map(|o| a.seed + o).collect();
    manifest.finish(&a.root, outputs)?;
    Ok(())
}

fn data_hashes(root: &Path) -> CliResult<BTreeMap<String, String>> {
    SPLITS
        .iter()
        .map(|s| Ok((s.to_string(), read_manifest(&root.join(s))?.content_hash())))
        .collect()
}

fn load_data(root: &Path) -> CliResult<(ArchConfig, TrainData)> {
    let src = root.join(SPLITS[0]);
    let m = read_manifest(&src)?;
    let catalog = read_catalog(&src)?;
    let arch = ArchConfig::new(m.height, m.width, catalog.num_classes());
    arch.validate()?;
    let data = TrainData::load(&src, &root.join(SPLITS[1]), &root.join(SPLITS[2]), &arch.anchor_grid())?;
    Ok((arch, data))
}

/// Config overrides shared by `train` and `ablate`.
#[derive(Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub steps: Option<u64>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    fn apply(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                TrainConfig::from_toml(&text)?
            }
            None => TrainConfig::ladder(),
        };
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(b) = self.batch {
            cfg.batch = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub runs: PathBuf,
    pub mode: Option<Mode>,
    pub overrides: Overrides,
    pub resume: Option<PathBuf>,
    pub stop_at: Option<u64>,
}

/// Trains one model; returns the run directory.
pub fn train(a: &TrainArgs) -> CliResult<PathBuf> {
    let (arch, data) = load_data(&a.data)?;
    let (dir, cfg, resume) = match &a.resume {
        Some(dir) => {
            let path = dir.join(CONFIG_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let cfg = TrainConfig::from_toml(&text)?;
            if dir.join(FINAL_CHECKPOINT_FILE).is_file() {
                log::info!("{} already completed", dir.display());
                return Ok(dir.clone());
            }
            let ck = dir.join(CHECKPOINT_FILE);
            if !ck.is_file() {
                return Err(Error::io(&ck, std::io::ErrorKind::NotFound.into()).into());
            }
            (dir.clone(), cfg, Some(ck))
        }
        None => {
            let mut cfg = a.overrides.apply()?;
            if let Some(m) = a.mode {
                cfg.mode = m;
            }
            (fresh_run_dir(&a.runs, &cfg.hash()), cfg, None)
        }
    };
    let _lock = DirLock::acquire(&dir)?;
    let manifest = RunManifest::new("train", Some(cfg.hash()), data_hashes(&a.data)?);
    let out = run_experiment(&cfg, &arch, &data, &dir, &RunOptions { resume, stop_at: a.stop_at })?;
    match out.final_miou {
        Some(m) => println!("{} {}: final target mIoU {:.2}", cfg.mode, dir.display(), 100.0 * m),
        None => println!("{} {}: stopped at step {}", cfg.mode, dir.display(), out.state.step),
    }
    manifest.finish(&dir, vec![out.metrics, out.checkpoint])?;
    Ok(dir)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub split: PathBuf,
    pub runs: PathBuf,
    pub exclude: Vec<String>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ClassRow {
    id: usize,
    name: String,
    tp: u64,
    fp: u64,
    fn_: u64,
    iou: Option<f64>,
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint: PathBuf,
    split: PathBuf,
    split_hash: String,
    scenes: usize,
    miou: Option<f64>,
    excluded: Vec<String>,
    miou_subset: Option<f64>,
    pixel_accuracy: Option<f64>,
    classes: Vec<ClassRow>,
}

fn class_ids(catalog: &ClassCatalog, names: &[String]) -> CliResult<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            catalog
                .names()
                .iter()
                .position(|c| c == n)
                .or_else(|| n.parse().ok().filter(|&i: &usize| i < catalog.num_classes()))
                .ok_or_else(|| CliError::Usage(format!("unknown class {n:?}")))
        })
        .collect()
}

/// Segmentation-only evaluation of a checkpoint; writes `iou.csv` and `summary.json`.
pub fn eval(a: &EvalArgs) -> CliResult<PathBuf> {
    if !a.checkpoint.is_file() {
        return Err(Error::io(&a.checkpoint, std::io::ErrorKind::NotFound.into()).into());
    }
    let split = Split::load(&a.split)?;
    if split.scenes.iter().any(|s| s.pixel_labels.is_none()) {
        return Err(Error::format(&a.split, "evaluation split has no pixel labels").into());
    }
    let excluded = class_ids(&split.catalog, &a.exclude)?;
    let arch = ArchConfig::new(split.manifest.height, split.manifest.width, split.catalog.num_classes());
    let model = TrainState::load_model(&a.checkpoint, &split.catalog, arch)?;
    let counts = evaluate_model(&model, &split.scenes, 16);

    let out = match &a.out {
        Some(o) => o.clone(),
        None => {
            let bytes = fs::read(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
            let mut h = Sha256::new();
            h.update(&bytes);
            h.update(split.manifest.content_hash().as_bytes());
            fresh_run_dir(&a.runs, &format!("eval-{}", hex::encode(h.finalize())))
        }
    };
    let _lock = DirLock::acquire(&out)?;
    let names = split.catalog.names();
    let rows: Vec<ClassRow> = (0..counts.classes)
        .map(|c| ClassRow {
            id: c,
            name: names[c].clone(),
            tp: counts.tp(c),
            fp: counts.fp(c),
            fn_: counts.fn_(c),
            iou: counts.iou(c),
        })
        .collect();
    let mut csv = String::from("class,name,tp,fp,fn,iou\n");
    for r in &rows {
        let iou = r.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(csv, "{},{},{},{},{},{iou}", r.id, r.name, r.tp, r.fp, r.fn_).unwrap();
    }
    let csv_path = out.join("iou.csv");
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;

    let kept: Vec<usize> = (0..counts.classes).filter(|c| !excluded.contains(c)).collect();
    let summary = EvalSummary {
        checkpoint: a.checkpoint.clone(),
        split: a.split.clone(),
        split_hash: split.manifest.content_hash(),
        scenes: split.scenes.len(),
        miou: counts.miou(None, UndefinedClass::Exclude),
        excluded: excluded.iter().map(|&c| names[c].clone()).collect(),
        miou_subset: (!excluded.is_empty())
            .then(|| counts.miou(Some(&kept), UndefinedClass::Exclude))
            .flatten(),
        pixel_accuracy: counts.pixel_accuracy(),
        classes: rows,
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;

    print!("{csv}");
    if let Some(m) = summary.miou {
        println!("mIoU {:.2}", 100.0 * m);
    }
    if let Some(m) = summary.miou_subset {
        println!("mIoU without {} {:.2}", summary.excluded.join(","), 100.0 * m);
    }
    let mut hashes = BTreeMap::new();
    hashes.insert(split.manifest.split.clone(), split.manifest.content_hash());
    RunManifest::new("eval", None, hashes).finish(&out, vec![csv_path, summary_path])?;
    Ok(out)
}

pub struct AblateArgs {
    pub data: PathBuf,
    pub runs: PathBuf,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub overrides: Overrides,
}

/// Runs every mode over every seed and writes the comparison report.
pub fn ablate(a: &AblateArgs) -> CliResult<PathBuf> {
    if a.seeds.len() < 3 {
        return Err(CliError::Usage("the ladder needs at least 3 seeds".into()));
    }
    if a.modes.is_empty() {
        return Err(CliError::Usage("no modes given".into()));
    }
    let (arch, data) = load_data(&a.data)?;
    let cfg = a.overrides.apply()?;
    let dir = fresh_run_dir(&a.runs, &format!("ablate-{}", cfg.hash()));
    let _lock = DirLock::acquire(&dir)?;
    let mut manifest = RunManifest::new("ablate", Some(cfg.hash()), data_hashes(&a.data)?);
    manifest.seeds = a.seeds.clone();
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    let report = run_ladder(&cfg, &arch, &data, &a.modes, &a.seeds, &dir)?;
    let md = dir.join("ladder.md");
    fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    let json = dir.join("ladder.json");
    write_json(&json, &report)?;
    print!("{}", report.to_markdown());
    manifest.finish(&dir, vec![md, json])?;
    Ok(dir)
}
