//! Fully explicit run configuration with presets and dotted overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{Level, SyntheticSpec, WindowOrder, WindowSampler};
use crate::encoding::{CoordEncoder, EncoderKind, HashGridConfig, HashGridEncoder};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::objectives::DiceVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperScale,
    DeskScale,
}

impl Preset {
    pub fn tag(self) -> &'static str {
        match self {
            Preset::PaperScale => "paper-scale",
            Preset::DeskScale => "desk-scale",
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "paper-scale" => Ok(Preset::PaperScale),
            "desk-scale" => Ok(Preset::DeskScale),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected paper-scale or desk-scale)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; synthetic slides are generated when absent.
    pub manifest: Option<PathBuf>,
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
    /// Template for generated slides; `seed` is replaced per slide.
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hash: HashGridConfig,
    pub nerf_freqs: usize,
}

impl EncoderConfig {
    pub fn width(&self) -> usize {
        match self.kind {
            EncoderKind::None => 2,
            EncoderKind::NerfPe => 4 * self.nerf_freqs,
            EncoderKind::Hash => self.hash.encoded_width(),
        }
    }

    /// A freshly initialized encoder of the configured kind.
    pub fn build(&self, seed: u64) -> Result<CoordEncoder> {
        Ok(match self.kind {
            EncoderKind::None => CoordEncoder::Identity,
            EncoderKind::NerfPe => CoordEncoder::Nerf {
                n_freqs: self.nerf_freqs,
            },
            EncoderKind::Hash => CoordEncoder::Hash(HashGridEncoder::new(self.hash.clone(), seed)?),
        })
    }
}

/// Training schedule. Only the two-stage schedule is runnable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    TwoStage,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub epochs: usize,
    pub stage1_epochs: usize,
    /// Shared-network learning rate.
    pub lr: f64,
    /// Slide-encoder learning rate.
    pub encoder_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub window: usize,
    pub order: WindowOrder,
    pub skip_white_above: Option<f64>,
    pub dice_variant: DiceVariant,
    /// Write a resumable checkpoint every N epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn stage2_epochs(&self) -> usize {
        self.epochs - self.stage1_epochs
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn sampler(&self, seed: u64) -> WindowSampler {
        WindowSampler {
            size: self.window,
            order: self.order,
            seed,
            skip_white_above: self.skip_white_above,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItoConfig {
    pub max_epochs: usize,
    pub mse_threshold: f64,
    pub warmup_epochs: usize,
    pub divergence_ratio: f64,
    pub ema_decay: f64,
    /// Use `min(decay, (1+n)/(10+n))` for the first updates.
    pub ema_warmup: bool,
    pub lr: f64,
    pub level: Level,
}

impl ItoConfig {
    pub fn paper() -> Self {
        ItoConfig {
            max_epochs: 20,
            mse_threshold: 0.002,
            warmup_epochs: 5,
            divergence_ratio: 1.3,
            ema_decay: 0.99,
            ema_warmup: true,
            lr: 1e-5,
            level: Level::Base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::Config("ito.warmup_epochs must be < ito.max_epochs".into()));
        }
        if self.divergence_ratio <= 1.0 {
            return Err(Error::Config("ito.divergence_ratio must be > 1".into()));
        }
        if self.lr <= 0.0 || self.mse_threshold < 0.0 {
            return Err(Error::Config("ito.lr must be > 0 and ito.mse_threshold >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ito.ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// First level of the "high" group; defaults to the first hashed level.
    pub split: Option<usize>,
    /// Side of the square spectrum patch (power of two).
    pub spectrum_patch: usize,
    pub ablation_arms: Vec<EncoderKind>,
    /// Extra seeds for repeated ablations.
    pub ablation_seeds: Vec<u64>,
    /// `key=value` overrides applied identically to every ablation arm.
    pub ablation_overrides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ito: ItoConfig,
    pub experiments: ExperimentConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> RunConfig {
        match preset {
            Preset::PaperScale => RunConfig {
                preset,
                seed: 0,
                data: DataConfig {
                    manifest: None,
                    train_seeds: (0..39).collect(),
                    test_seeds: (1000..1022).collect(),
                    synthetic: SyntheticSpec::desk(0),
                },
                encoder: EncoderConfig {
                    kind: EncoderKind::Hash,
                    hash: HashGridConfig::paper_scale(),
                    nerf_freqs: 10,
                },
                model: ModelConfig::paper_scale(),
                train: TrainConfig {
                    schedule: Schedule::TwoStage,
                    epochs: 200,
                    stage1_epochs: 100,
                    lr: 1e-5,
                    encoder_lr: 1e-5,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    window: 1024,
                    order: WindowOrder::Sequential,
                    skip_white_above: None,
                    dice_variant: DiceVariant::Linear,
                    checkpoint_every: 10,
                },
                ito: ItoConfig::paper(),
                experiments: ExperimentConfig {
                    split: None,
                    spectrum_patch: 64,
                    ablation_arms: EncoderKind::ALL.to_vec(),
                    ablation_seeds: vec![],
                    ablation_overrides: vec![],
                },
            },
            Preset::DeskScale => {
                let full = RunConfig::preset(Preset::PaperScale);
                RunConfig {
                    preset,
                    data: DataConfig {
                        train_seeds: (0..4).collect(),
                        test_seeds: (1000..1008).collect(),
                        ..full.data
                    },
                    encoder: EncoderConfig {
                        hash: HashGridConfig::desk_scale(),
                        ..full.encoder
                    },
                    model: ModelConfig::desk_scale(),
                    train: TrainConfig {
                        epochs: 160,
                        stage1_epochs: 100,
                        lr: 1e-3,
                        encoder_lr: 1e-2,
                        window: 32,
                        order: WindowOrder::Random,
                        checkpoint_every: 0,
                        ..full.train
                    },
                    ito: ItoConfig {
                        lr: 1e-2,
                        ..ItoConfig::paper()
                    },
                    // a larger training set at the same optimizer step count
                    experiments: ExperimentConfig {
                        spectrum_patch: 64,
                        ablation_seeds: vec![1],
                        ablation_overrides: vec![
                            "data.train_seeds=[0,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15]".into(),
                            "train.epochs=40".into(),
                            "train.stage1_epochs=25".into(),
                        ],
                        ..full.experiments
                    },
                    ..full
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.schedule == Schedule::Joint {
            return Err(Error::Config(
                "joint single-stage training is not supported; use schedule two-stage".into(),
            ));
        }
        if t.stage1_epochs == 0 || t.stage1_epochs >= t.epochs {
            return Err(Error::Config("train.stage1_epochs must satisfy 0 < stage1_epochs < epochs".into()));
        }
        if t.lr <= 0.0 || t.encoder_lr <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        t.sampler(0).validate()?;
        self.ito.validate()?;
        self.model.validate()?;
        if self.encoder.kind == EncoderKind::Hash {
            self.encoder.hash.validate()?;
        }
        if self.encoder.nerf_freqs == 0 {
            return Err(Error::Config("encoder.nerf_freqs must be >= 1".into()));
        }
        if !self.experiments.spectrum_patch.is_power_of_two() {
            return Err(Error::Config("experiments.spectrum_patch must be a power of two".into()));
        }
        if self.data.manifest.is_none() && self.data.train_seeds.is_empty() {
            return Err(Error::Config("no training slides configured".into()));
        }
        Ok(())
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON, falling back
    /// to a plain string. Unknown keys are errors.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = parsed;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid override: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_canonical_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Pretty JSON with sorted keys.
    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_canonical_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Sub-seed for one named consumer of randomness.
    pub fn derive_seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed, tag)
    }
}

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Dotted keys whose values differ between two configs.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Result<Vec<String>> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(a)?, &mut fa);
    flatten("", &serde_json::to_value(b)?, &mut fb);
    let mut keys: Vec<String> = fa.keys().chain(fb.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    Ok(keys.into_iter().filter(|k| fa.get(k) != fb.get(k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::preset(Preset::DeskScale).validate().unwrap();
        RunConfig::preset(Preset::PaperScale).validate().unwrap();
        let p = RunConfig::preset(Preset::PaperScale);
        assert_eq!((p.train.epochs, p.train.stage1_epochs, p.train.lr), (200, 100, 1e-5));
        assert_eq!(p.encoder.width(), 42);
        assert_eq!((p.ito.max_epochs, p.ito.warmup_epochs), (20, 5));
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let c = RunConfig::preset(Preset::DeskScale);
        let o = c
            .with_overrides(&["train.lr=0.5", "encoder.kind=nerf-pe", "ito.level=base/4", "seed=9"])
            .unwrap();
        assert_eq!(o.train.lr, 0.5);
        assert_eq!(o.encoder.kind, EncoderKind::NerfPe);
        assert_eq!(o.ito.level, Level::Quarter);
        assert_eq!(o.seed, 9);
        assert!(matches!(c.with_overrides(&["train.nope=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["train.lr"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["train.lr=fast"]), Err(Error::Config(_))));
    }

    #[test]
    fn joint_schedule_rejected() {
        let c = RunConfig::preset(Preset::DeskScale)
            .with_overrides(&["train.schedule=joint"])
            .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::preset(Preset::DeskScale)
            .with_overrides(&["train.stage1_epochs=160"])
            .unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_round_trip_and_diff() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::preset(Preset::DeskScale);
        let p = dir.path().join("c.json");
        c.save(&p).unwrap();
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        let other = c.with_overrides(&["encoder.kind=none"]).unwrap();
        assert_ne!(other.hash().unwrap(), c.hash().unwrap());
        assert_eq!(config_diff(&c, &other).unwrap(), vec!["encoder.kind".to_string()]);
        assert_ne!(c.derive_seed("a"), c.derive_seed("b"));
    }
}
