use std::path::Path;

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::nets::{match_anchors, AnchorGrid, AnchorTargets};
use crate::synthdata::coarse_map_from_boxes;
use crate::types::{ClassCatalog, DomainTag, LabeledScene};

/// Scenes of one domain with their precomputed weak-label targets.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub scenes: Vec<LabeledScene>,
    pub anchors: Vec<AnchorTargets>,
    /// Flattened `[C, H, W]` coarse box maps, one per scene.
    pub coarse: Vec<Vec<u8>>,
}

impl DomainData {
    pub fn new(scenes: Vec<LabeledScene>, grid: &AnchorGrid, classes: usize) -> Self {
        let anchors = scenes.iter().map(|s| match_anchors(grid, &s.objects)).collect();
        let coarse = scenes
            .iter()
            .map(|s| coarse_map_from_boxes(&s.objects, s.height, s.width, classes).mask)
            .collect();
        DomainData {
            scenes,
            anchors,
            coarse,
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Everything a training run reads.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub catalog: ClassCatalog,
    pub source: DomainData,
    pub target: DomainData,
    /// Held-out target scenes carrying evaluation-only pixel labels.
    pub target_val: Vec<LabeledScene>,
}

impl TrainData {
    pub fn new(
        catalog: ClassCatalog,
        source: Vec<LabeledScene>,
        target: Vec<LabeledScene>,
        target_val: Vec<LabeledScene>,
        grid: &AnchorGrid,
    ) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Config("training needs scenes from both domains".into()));
        }
        if source.iter().any(|s| s.domain != DomainTag::Source || s.pixel_labels.is_none()) {
            return Err(Error::Config("source scenes must be SOURCE-tagged with pixel labels".into()));
        }
        if target.iter().any(|s| s.domain != DomainTag::Target) {
            return Err(Error::Config("target scenes must be TARGET-tagged".into()));
        }
        if target_val.iter().any(|s| s.pixel_labels.is_none()) {
            return Err(Error::Config("evaluation scenes need pixel labels".into()));
        }
        let c = catalog.num_classes();
        Ok(TrainData {
            source: DomainData::new(source, grid, c),
            target: DomainData::new(target, grid, c),
            target_val,
            catalog,
        })
    }

    /// Loads the three split directories; the catalogs must agree.
    pub fn load(source: &Path, target: &Path, target_val: &Path, grid: &AnchorGrid) -> Result<Self> {
        let s = Split::load(source)?;
        let t = Split::load(target)?;
        let v = Split::load(target_val)?;
        for other in [&t, &v] {
            if other.catalog != s.catalog {
                return Err(Error::format(&other.dir, "class catalog differs from the source split"));
            }
        }
        TrainData::new(s.catalog, s.scenes, t.scenes, v.scenes, grid)
    }
}
