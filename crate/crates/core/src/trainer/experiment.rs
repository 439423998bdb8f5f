use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::config::{Mode, TrainConfig};
use super::data::TrainData;
use super::state::TrainState;
use super::step::train_step;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, UndefinedClass};
use crate::nets::ArchConfig;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) after this many completed steps.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    /// Latest checkpoint (final one when the run completed).
    pub checkpoint: PathBuf,
    pub state: TrainState,
    /// Target-val mIoU on all held-out scenes, when the run completed.
    pub final_miou: Option<f64>,
    pub curve: Vec<(u64, f64)>,
    /// Largest per-step target gradient norm² on segmentation-exclusive parameters.
    pub max_target_seg_grad_sq: f64,
    pub step_seconds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub steps: u64,
    pub config_hash: String,
    pub final_target_miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

fn miou_of(state: &TrainState, data: &TrainData, limit: usize) -> f64 {
    let scenes = if limit == 0 || limit >= data.target_val.len() {
        &data.target_val[..]
    } else {
        &data.target_val[..limit]
    };
    evaluate_model(&state.ds, scenes, EVAL_BATCH)
        .miou(None, UndefinedClass::Exclude)
        .unwrap_or(0.0)
}

/// Keeps the metric lines with `step <= upto` from an earlier run.
fn truncate_metrics(path: &Path, upto: u64) -> Result<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(String::new());
    };
    let mut kept = String::new();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?;
        if v.get("step").and_then(Value::as_u64).is_some_and(|s| s <= upto) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

/// Trains per `config`, evaluating on held-out target scenes every
/// `eval_every` steps, and writes metrics, config and checkpoints to `out_dir`.
pub fn run_experiment(
    config: &TrainConfig,
    arch: &ArchConfig,
    data: &TrainData,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutputs> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match &opts.resume {
        Some(p) => {
            let st = TrainState::load(p, &data.catalog, arch.clone())?;
            if st.config != *config {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    p.display()
                )));
            }
            st
        }
        None => TrainState::new(config.clone(), arch.clone())?,
    };
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let prefix = if opts.resume.is_some() {
        truncate_metrics(&metrics, state.step)?
    } else {
        String::new()
    };
    let mut log = fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    log.write_all(prefix.as_bytes()).map_err(|e| Error::io(&metrics, e))?;

    let stop = opts.stop_at.unwrap_or(config.steps).min(config.steps);
    let mut curve = Vec::new();
    let mut max_sq = 0.0f64;
    let mut step_seconds = Vec::new();
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    while state.step < stop {
        let t0 = Instant::now();
        let out = train_step(&mut state, data)?;
        step_seconds.push(t0.elapsed().as_secs_f64());
        max_sq = max_sq.max(out.target_seg_grad_sq);
        let mut line = Map::new();
        line.insert("step".into(), json!(state.step));
        line.insert("total".into(), json!(out.report.total));
        for (k, v) in &out.report.components {
            line.insert(k.clone(), json!(v));
        }
        line.insert("target_seg_grad_sq".into(), json!(out.target_seg_grad_sq));
        let due = config.eval_every > 0 && state.step % config.eval_every == 0;
        if due || state.step == config.steps {
            let m = miou_of(&state, data, config.eval_scenes);
            curve.push((state.step, m));
            line.insert("target_miou".into(), json!(m));
        }
        writeln!(log, "{}", Value::Object(line)).map_err(|e| Error::io(&metrics, e))?;
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            state.save(&checkpoint, &data.catalog)?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;

    if state.step < config.steps {
        state.save(&checkpoint, &data.catalog)?;
        return Ok(RunOutputs {
            dir: out_dir.to_path_buf(),
            metrics,
            checkpoint,
            state,
            final_miou: None,
            curve,
            max_target_seg_grad_sq: max_sq,
            step_seconds,
        });
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT_FILE);
    state.save(&final_path, &data.catalog)?;
    let counts = evaluate_model(&state.ds, &data.target_val, EVAL_BATCH);
    let final_miou = counts.miou(None, UndefinedClass::Exclude).unwrap_or(0.0);
    let summary = RunSummary {
        mode: config.mode,
        seed: config.seed,
        steps: state.step,
        config_hash: config.hash(),
        final_target_miou: final_miou,
        per_class_iou: (0..counts.classes).map(|c| counts.iou(c)).collect(),
    };
    crate::dataset::write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(RunOutputs {
        dir: out_dir.to_path_buf(),
        metrics,
        checkpoint: final_path,
        state,
        final_miou: Some(final_miou),
        curve,
        max_target_seg_grad_sq: max_sq,
        step_seconds,
    })
}

/// Final target-val mIoU of one (mode, seed) run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LadderCell {
    pub mode: Mode,
    pub seed: u64,
    pub final_miou: f64,
}

/// One ordering claim checked on ladder medians.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LadderReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<LadderCell>,
    pub medians: BTreeMap<Mode, f64>,
    pub verdicts: Vec<Verdict>,
}

impl LadderReport {
    /// Markdown table of medians (in mIoU points) and verdicts.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| mode | median mIoU | per seed |\n|---|---|---|\n");
        for (mode, med) in &self.medians {
            let per: Vec<String> = self
                .cells
                .iter()
                .filter(|c| c.mode == *mode)
                .map(|c| format!("{:.2}", 100.0 * c.final_miou))
                .collect();
            s.push_str(&format!("| {mode} | {:.2} | {} |\n", 100.0 * med, per.join(", ")));
        }
        s.push('\n');
        for v in &self.verdicts {
            s.push_str(&format!("- [{}] {}: {}\n", if v.holds { "pass" } else { "fail" }, v.claim, v.detail));
        }
        s
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite mIoU"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Minimum gap, in mIoU points, between consecutive rungs of the adaptation ladder.
pub const LADDER_MIN_GAP: f64 = 1.5;

/// Ordering claims on whichever modes are present in `medians` (fractions).
pub fn ordering_verdicts(medians: &BTreeMap<Mode, f64>) -> Vec<Verdict> {
    let pts = |m: Mode| medians.get(&m).map(|v| 100.0 * v);
    let mut out = Vec::new();
    let mut strict = |claim: &str, chain: &[Mode], gap: f64| {
        let vals: Option<Vec<f64>> = chain.iter().map(|&m| pts(m)).collect();
        if let Some(vals) = vals {
            let holds = vals.windows(2).all(|w| w[1] - w[0] >= gap && w[1] > w[0]);
            let detail = chain
                .iter()
                .zip(&vals)
                .map(|(m, v)| format!("{m} {v:.2}"))
                .collect::<Vec<_>>()
                .join(" < ");
            out.push(Verdict {
                claim: claim.to_string(),
                holds,
                detail,
            });
        }
    };
    strict(
        "adaptation ladder (gaps >= 1.5 points)",
        &[Mode::Ds, Mode::DsPdc, Mode::Full],
        LADDER_MIN_GAP,
    );
    strict("single segmentation net below DS below Full", &[Mode::SingleSeg, Mode::Ds, Mode::Full], 0.0);
    if let (Some(f), Some(t)) = (pts(Mode::Full), pts(Mode::Full2ClassOdc)) {
        out.push(Verdict {
            claim: "joint class-domain object classifier at least as good as domain-only".into(),
            holds: f >= t,
            detail: format!("full {f:.2} >= full-2class-odc {t:.2}"),
        });
    }
    out
}

/// Runs every (mode, seed) pair and summarizes median final mIoU per mode.
/// Each run lives in `out_root/<mode>-seed<seed>`.
pub fn run_ladder(
    base: &TrainConfig,
    arch: &ArchConfig,
    data: &TrainData,
    modes: &[Mode],
    seeds: &[u64],
    out_root: &Path,
) -> Result<LadderReport> {
    if seeds.is_empty() || modes.is_empty() {
        return Err(Error::Config("ladder needs at least one mode and one seed".into()));
    }
    let mut cells = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let cfg = base.clone().with_mode(mode).with_seed(seed);
            let dir = out_root.join(format!("{mode}-seed{seed}"));
            let out = run_experiment(&cfg, arch, data, &dir, &RunOptions::default())?;
            let m = out.final_miou.expect("completed run");
            log::info!("{mode} seed {seed}: final target mIoU {:.2}", 100.0 * m);
            cells.push(LadderCell {
                mode,
                seed,
                final_miou: m,
            });
        }
    }
    let medians: BTreeMap<Mode, f64> = modes
        .iter()
        .map(|&m| {
            let mut v: Vec<f64> = cells.iter().filter(|c| c.mode == m).map(|c| c.final_miou).collect();
            (m, median(&mut v))
        })
        .collect();
    let verdicts = ordering_verdicts(&medians);
    Ok(LadderReport {
        seeds: seeds.to_vec(),
        cells,
        medians,
        verdicts,
    })
}
