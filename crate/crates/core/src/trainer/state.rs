use std::path::Path;

use asda_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::optim::{Adam, Sgd};
use crate::error::{Error, Result};
use crate::nets::{ArchConfig, Checkpoint, DsModel, ObjectClassifier, ParamSet, PixelClassifier};
use crate::types::ClassCatalog;

/// Parameters, optimizer moments and progress of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub arch: ArchConfig,
    pub ds: DsModel,
    pub pdc: Option<PixelClassifier>,
    pub odc: Option<ObjectClassifier>,
    pub ds_opt: Sgd,
    pub pdc_opt: Option<Adam>,
    pub odc_opt: Option<Adam>,
    /// Completed steps.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    config: String,
    config_hash: String,
    pdc_adam_t: Option<u64>,
    odc_adam_t: Option<u64>,
}

/// RNG stream for initialization (stream 0) or for batch sampling at `step`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl TrainState {
    /// Fresh state; all randomness comes from `config.seed`.
    pub fn new(config: TrainConfig, arch: ArchConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0);
        let ds = if config.mode == Mode::SingleSeg {
            DsModel::segmentation_only(arch.clone(), &mut rng)?
        } else {
            DsModel::new(arch.clone(), &mut rng)?
        };
        let wants_pdc = config.mode.uses_pdc()
            || (config.mode == Mode::SingleSeg
                && config.single_seg_variant == super::config::SingleSegVariant::Adapted);
        let pdc = wants_pdc.then(|| PixelClassifier::new(&arch, &mut rng));
        let odc = config
            .mode
            .odc_labels()
            .map(|l| ObjectClassifier::new(&arch, l.outputs(arch.num_classes), &mut rng));
        Ok(TrainState {
            ds_opt: Sgd::new(&ds.params, config.momentum),
            pdc_opt: pdc.as_ref().map(|p| Adam::new(&p.params)),
            odc_opt: odc.as_ref().map(|o| Adam::new(&o.params)),
            config,
            arch,
            ds,
            pdc,
            odc,
            step: 0,
        })
    }

    fn buffers(&self) -> ParamSet {
        let mut out = ParamSet::new();
        let mut add = |prefix: &str, params: &ParamSet, bufs: &[Tensor<f32>]| {
            for (p, b) in params.iter().zip(bufs) {
                out.push(format!("{prefix}/{}", p.name), p.group, b.clone());
            }
        };
        add("sgd.velocity", &self.ds.params, &self.ds_opt.velocity);
        if let (Some(p), Some(o)) = (&self.pdc, &self.pdc_opt) {
            add("adam.m", &p.params, &o.m);
            add("adam.v", &p.params, &o.v);
        }
        if let (Some(p), Some(o)) = (&self.odc, &self.odc_opt) {
            add("adam.m", &p.params, &o.m);
            add("adam.v", &p.params, &o.v);
        }
        out
    }

    /// Whole-state snapshot.
    pub fn to_checkpoint(&self, catalog: &ClassCatalog) -> Checkpoint {
        let mut tensors = self.ds.params.clone();
        if let Some(p) = &self.pdc {
            tensors.extend(p.params.clone());
        }
        if let Some(o) = &self.odc {
            tensors.extend(o.params.clone());
        }
        tensors.extend(self.buffers());
        let meta = Meta {
            step: self.step,
            config: self.config.to_toml(),
            config_hash: self.config.hash(),
            pdc_adam_t: self.pdc_opt.as_ref().map(|o| o.t),
            odc_adam_t: self.odc_opt.as_ref().map(|o| o.t),
        };
        Checkpoint {
            catalog_hash: catalog.hash(),
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            tensors,
        }
    }

    pub fn save(&self, path: &Path, catalog: &ClassCatalog) -> Result<()> {
        self.to_checkpoint(catalog).save(path)
    }

    /// Rebuilds a state from a snapshot written by [`TrainState::save`].
    pub fn from_checkpoint(ck: &Checkpoint, arch: ArchConfig, path: &Path) -> Result<Self> {
        let meta: Meta =
            serde_json::from_str(&ck.meta).map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
        let config = TrainConfig::from_toml(&meta.config)?;
        if config.hash() != meta.config_hash {
            return Err(Error::format(path, "stored config does not match its hash"));
        }
        let mut st = TrainState::new(config, arch)?;
        ck.restore_into(&mut st.ds.params, path)?;
        if let Some(p) = &mut st.pdc {
            ck.restore_into(&mut p.params, path)?;
        }
        if let Some(o) = &mut st.odc {
            ck.restore_into(&mut o.params, path)?;
        }
        let mut bufs = st.buffers();
        ck.restore_into(&mut bufs, path)?;
        let mut it = bufs.iter().map(|p| p.value.clone());
        for v in st.ds_opt.velocity.iter_mut() {
            *v = it.next().expect("velocity buffer");
        }
        for (opt, t) in [(&mut st.pdc_opt, meta.pdc_adam_t), (&mut st.odc_opt, meta.odc_adam_t)] {
            if let Some(o) = opt {
                for m in o.m.iter_mut() {
                    *m = it.next().expect("adam m");
                }
                for v in o.v.iter_mut() {
                    *v = it.next().expect("adam v");
                }
                o.t = t.ok_or_else(|| Error::format(path, "missing Adam step count"))?;
            }
        }
        st.step = meta.step;
        Ok(st)
    }

    pub fn load(path: &Path, catalog: &ClassCatalog, arch: ArchConfig) -> Result<Self> {
        let ck = Checkpoint::load(path, &catalog.hash())?;
        Self::from_checkpoint(&ck, arch, path)
    }

    /// Loads only the DS weights of a snapshot (for inference).
    pub fn load_model(path: &Path, catalog: &ClassCatalog, arch: ArchConfig) -> Result<DsModel> {
        Ok(Self::load(path, catalog, arch)?.ds)
    }
}
