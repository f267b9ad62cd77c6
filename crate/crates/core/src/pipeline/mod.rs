//! Two-stage training, inference-time optimization and dense inference.

mod gradcheck;
mod infer;
mod ito;
mod rundir;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ItoConfig, RunConfig};
use crate::data::{generate_synthetic, load_slide, Manifest, SlidePyramid, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ParamGroup;
use crate::numerics::ParamMap;

pub use gradcheck::{gradcheck, GradScope};
pub use infer::{evaluate, infer_dense, DenseOutput, MetricRow, METRICS_HEADER};
pub use ito::{run_ito, ItoResult};
pub use rundir::RunDir;
pub use train::{train_stage1, train_stage2, training_metrics, TrainState};

/// Training phase, each with a fixed freeze plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Stage1,
    Stage2,
    Ito,
}

/// Which parameter groups may move in a phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezePlan {
    /// Slide encoders (during ITO: the target slide's encoder only).
    pub encoders: bool,
    pub decoder: bool,
    pub rec_head: bool,
    pub seg_head: bool,
}

impl FreezePlan {
    pub fn for_phase(phase: Phase) -> FreezePlan {
        match phase {
            Phase::Stage1 => FreezePlan {
                encoders: true,
                decoder: true,
                rec_head: true,
                seg_head: false,
            },
            Phase::Stage2 => FreezePlan {
                encoders: false,
                decoder: false,
                rec_head: false,
                seg_head: true,
            },
            Phase::Ito => FreezePlan {
                encoders: true,
                decoder: false,
                rec_head: false,
                seg_head: false,
            },
        }
    }

    pub fn trainable(&self, group: &ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder(_) => self.encoders,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::RecHead => self.rec_head,
            ParamGroup::SegHead => self.seg_head,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Threshold,
    Divergence,
    MaxEpochs,
    None,
}

impl StopReason {
    pub fn tag(self) -> &'static str {
        match self {
            StopReason::Threshold => "threshold",
            StopReason::Divergence => "divergence",
            StopReason::MaxEpochs => "max-epochs",
            StopReason::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub stop: bool,
    pub reason: StopReason,
    /// 1-based epoch of the last history entry.
    pub epoch: usize,
    pub mse: f64,
    pub min_mse: f64,
}

/// Early-stopping rule over epoch-mean MSE values. The absolute threshold
/// is checked first, then divergence from the running minimum after the
/// warm-up, then the epoch cap.
pub fn check_stop(history: &[f64], cfg: &ItoConfig) -> Result<StopDecision> {
    let &mse = history
        .last()
        .ok_or_else(|| Error::Domain("check_stop needs at least one epoch".into()))?;
    let epoch = history.len();
    let min_mse = history.iter().copied().fold(f64::INFINITY, f64::min);
    let reason = if mse < cfg.mse_threshold {
        StopReason::Threshold
    } else if epoch > cfg.warmup_epochs && mse > cfg.divergence_ratio * min_mse {
        StopReason::Divergence
    } else if epoch >= cfg.max_epochs {
        StopReason::MaxEpochs
    } else {
        StopReason::None
    };
    Ok(StopDecision {
        stop: reason != StopReason::None,
        reason,
        epoch,
        mse,
        min_mse,
    })
}

/// SHA-256 over names, shapes and bit patterns of the parameters whose
/// names start with `prefix`.
pub fn param_digest(params: &ParamMap, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.range(prefix.to_string()..) {
        if !name.starts_with(prefix) {
            break;
        }
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Slide id for a generated slide.
pub fn synthetic_id(split: Split, seed: u64) -> String {
    match split {
        Split::Train => format!("train_{seed:04}"),
        Split::Test => format!("test_{seed:04}"),
    }
}

/// Slides of one split, from the manifest or generated from seeds.
pub fn load_slides(cfg: &RunConfig, split: Split) -> Result<Vec<SlidePyramid>> {
    if let Some(path) = &cfg.data.manifest {
        let manifest = Manifest::load(path)?;
        let root = path.parent().unwrap_or_else(|| std::path::Path::new("."));
        return manifest.split(split).map(|e| load_slide(root, e)).collect();
    }
    let seeds = match split {
        Split::Train => &cfg.data.train_seeds,
        Split::Test => &cfg.data.test_seeds,
    };
    seeds
        .iter()
        .map(|&seed| {
            let spec = SyntheticSpec {
                seed,
                ..cfg.data.synthetic.clone()
            };
            generate_synthetic(&synthetic_id(split, seed), &spec)
        })
        .collect()
}

/// One slide by id, searched in the test split first.
pub fn find_slide(cfg: &RunConfig, id: &str) -> Result<SlidePyramid> {
    for split in [Split::Test, Split::Train] {
        if let Some(s) = load_slides(cfg, split)?.into_iter().find(|s| s.id() == id) {
            return Ok(s);
        }
    }
    Err(Error::Data(format!("no slide `{id}` in the configured dataset")))
}
