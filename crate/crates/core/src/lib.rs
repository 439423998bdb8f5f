//! Weakly supervised adversarial domain adaptation for joint detection and
//! segmentation, with a procedural two-domain benchmark.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod synthdata;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    make_onehot, odc_target, validate_scene, BBox, ClassCatalog, DomainTag, LabeledScene, Object,
    ObjectSet, OneHot, ScoreMap,
};
