//! Alternating adversarial training, checkpointed state and the experiment ladder.

mod config;
mod data;
mod experiment;
mod optim;
mod protocol;
mod state;
mod step;

pub use config::{ClassifierOptimizer, DsOptimizer, Mode, SingleSegVariant, TrainConfig};
pub use data::{DomainData, TrainData};
pub use experiment::{
    median, ordering_verdicts, run_experiment, run_ladder, LadderCell, LadderReport, RunOptions, RunOutputs,
    RunSummary, Verdict, CHECKPOINT_FILE, CONFIG_FILE, FINAL_CHECKPOINT_FILE, LADDER_MIN_GAP, METRICS_FILE,
    SUMMARY_FILE,
};
pub use optim::{Adam, Sgd};
pub use protocol::{LadderProtocol, SplitPlan};
pub use state::{stream_rng, TrainState};
pub use step::{
    sample_batch, train_single_seg_baseline, train_step, train_step_ds_only, train_step_ds_pdc, train_step_full,
    StepOutcome,
};
