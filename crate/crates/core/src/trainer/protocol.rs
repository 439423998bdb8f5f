use std::path::Path;

use super::config::{Mode, TrainConfig};
use super::data::TrainData;
use super::experiment::{run_ladder, LadderReport};
use crate::error::Result;
use crate::nets::ArchConfig;
use crate::synthdata::{generate_scene_with, DomainStyle, GenerateOptions, SceneSpec};
use crate::types::{ClassCatalog, DomainTag, LabeledScene};

/// One generated split of the benchmark.
#[derive(Clone, Debug)]
pub struct SplitPlan {
    pub name: &'static str,
    pub domain: DomainTag,
    pub style: DomainStyle,
    pub scenes: usize,
    pub seed: u64,
    pub pixel_labels: Option<bool>,
}

impl SplitPlan {
    /// Scenes identical to what `generate_split` writes for this plan.
    pub fn generate(&self, spec: &SceneSpec) -> Result<Vec<LabeledScene>> {
        let style = self.style.clone().with_seed(self.seed);
        let opts = GenerateOptions {
            attach_pixel_labels: self.pixel_labels,
        };
        (0..self.scenes as u64)
            .map(|id| generate_scene_with(spec, &style, self.domain, id, opts).map(|(s, _)| s))
            .collect()
    }
}

/// The two-domain benchmark and the training schedule shared by every rung
/// of the comparison ladder.
#[derive(Clone, Debug)]
pub struct LadderProtocol {
    pub spec: SceneSpec,
    pub arch: ArchConfig,
    pub source: SplitPlan,
    pub target: SplitPlan,
    pub target_val: SplitPlan,
    pub config: TrainConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl LadderProtocol {
    /// 64×64 scenes, 800 per training domain, three seeds, every mode.
    pub fn standard() -> Self {
        let (h, w) = (64, 64);
        LadderProtocol {
            spec: SceneSpec::urban(h, w),
            arch: ArchConfig::new(h, w, ClassCatalog::urban().num_classes()),
            source: SplitPlan {
                name: "source-train",
                domain: DomainTag::Source,
                style: DomainStyle::synth_style(),
                scenes: 800,
                seed: 1,
                pixel_labels: None,
            },
            target: SplitPlan {
                name: "target-train",
                domain: DomainTag::Target,
                style: DomainStyle::real_style(),
                scenes: 800,
                seed: 2,
                pixel_labels: None,
            },
            target_val: SplitPlan {
                name: "target-val",
                domain: DomainTag::Target,
                style: DomainStyle::real_style(),
                scenes: 200,
                seed: 3,
                pixel_labels: Some(true),
            },
            config: TrainConfig::ladder(),
            modes: vec![Mode::Ds, Mode::DsPdc, Mode::Full, Mode::Full2ClassOdc, Mode::SingleSeg],
            seeds: vec![0, 1, 2],
        }
    }

    pub fn splits(&self) -> [&SplitPlan; 3] {
        [&self.source, &self.target, &self.target_val]
    }

    /// Generates all three splits in memory.
    pub fn data(&self) -> Result<TrainData> {
        TrainData::new(
            ClassCatalog::urban(),
            self.source.generate(&self.spec)?,
            self.target.generate(&self.spec)?,
            self.target_val.generate(&self.spec)?,
            &self.arch.anchor_grid(),
        )
    }

    /// Every (mode, seed) run of the ladder, under `out_root`.
    pub fn run(&self, data: &TrainData, out_root: &Path) -> Result<LadderReport> {
        run_ladder(&self.config, &self.arch, data, &self.modes, &self.seeds, out_root)
    }
}
