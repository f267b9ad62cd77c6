use crate::config::{config_diff, RunConfig};
use crate::data::{Level, Split};
use crate::encoding::EncoderKind;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, infer_dense, load_slides, run_ito, train_stage1, train_stage2, MetricRow, TrainState};

/// Mean test Dice of one arm at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: EncoderKind,
    pub level: Level,
    pub dice: f64,
}

/// Result of one ablation seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// Per-slide scores; `mode` holds the arm tag.
    pub per_slide: Vec<MetricRow>,
}

impl Ablation {
    pub fn dice(&self, arm: EncoderKind, level: Level) -> Option<f64> {
        self.rows.iter().find(|r| r.arm == arm && r.level == level).map(|r| r.dice)
    }

    /// `arm,level,dice`.
    pub fn table2_csv(&self) -> String {
        table2_csv(&self.rows)
    }

    /// Rows averaged over several seeds, for arms present in every seed.
    pub fn averaged(runs: &[Ablation]) -> Vec<AblationRow> {
        let Some(first) = runs.first() else { return Vec::new() };
        first
            .rows
            .iter()
            .filter_map(|r| {
                let vals: Option<Vec<f64>> = runs.iter().map(|a| a.dice(r.arm, r.level)).collect();
                vals.map(|v| AblationRow {
                    arm: r.arm,
                    level: r.level,
                    dice: v.iter().sum::<f64>() / v.len() as f64,
                })
            })
            .collect()
    }
}

pub fn table2_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("arm,level,dice\n");
    for r in rows {
        out += &format!("{},{},{:.6}\n", r.arm, r.level, r.dice);
    }
    out
}

/// The run config of one arm: `cfg` with the shared ablation overrides
/// applied, then the encoder kind and seed replaced.
pub fn arm_config(cfg: &RunConfig, arm: EncoderKind, seed: u64) -> Result<RunConfig> {
    let mut c = cfg.with_overrides(&cfg.experiments.ablation_overrides)?;
    c.encoder.kind = arm;
    c.seed = seed;
    c.validate()?;
    Ok(c)
}

/// Trains every arm end-to-end, adapts each test slide at Base and
/// evaluates all three levels with that encoder.
pub fn run_ablation(
    cfg: &RunConfig,
    arms: &[EncoderKind],
    seed: u64,
    progress: &mut dyn FnMut(&str),
) -> Result<Ablation> {
    let configs = arms.iter().map(|&a| arm_config(cfg, a, seed)).collect::<Result<Vec<_>>>()?;
    let Some(shared) = configs.first() else {
        return Ok(Ablation { seed, rows: Vec::new(), per_slide: Vec::new() });
    };
    let train = load_slides(shared, Split::Train)?;
    let test = load_slides(shared, Split::Test)?;
    let (train, test) = (&train[..], &test[..]);
    for c in &configs[1.min(configs.len())..] {
        let diff = config_diff(&configs[0], c)?;
        if diff.iter().any(|k| k != "encoder.kind") {
            return Err(Error::Invariant(format!("ablation arms differ beyond the encoder: {diff:?}")));
        }
    }

    let ids: Vec<String> = train.iter().map(|s| s.id().to_string()).collect();
    let mut rows = Vec::new();
    let mut per_slide = Vec::new();
    for (arm, c) in arms.iter().zip(&configs) {
        progress(&format!("arm {arm} seed {seed}: training"));
        let mut state = TrainState::new(c, &ids)?;
        train_stage1(&mut state, c, train, &mut |_| Ok(()))?;
        train_stage2(&mut state, c, train, &mut |_| Ok(()))?;
        progress(&format!("arm {arm} seed {seed}: evaluating"));
        let mut sums = [0.0; 3];
        for slide in test {
            let ito = run_ito(slide.images(), Level::Base, &state.model, c)?;
            for level in Level::ALL {
                let out = infer_dense(slide.geometry(), level, &state.model, &ito.encoder, c.train.window)?;
                let row = evaluate(&out, slide, "ablation", arm.tag())?;
                sums[level.index()] += row.dice;
                per_slide.push(row);
            }
        }
        for level in Level::ALL {
            rows.push(AblationRow {
                arm: *arm,
                level,
                dice: sums[level.index()] / test.len().max(1) as f64,
            });
        }
    }
    Ok(Ablation { seed, rows, per_slide })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn arms_differ_only_in_encoder() {
        let cfg = RunConfig::preset(Preset::DeskScale);
        let a = arm_config(&cfg, EncoderKind::None, 7).unwrap();
        let b = arm_config(&cfg, EncoderKind::Hash, 7).unwrap();
        assert_eq!(config_diff(&a, &b).unwrap(), vec!["encoder.kind".to_string()]);
        assert_eq!(a.data.train_seeds.len(), 16);
        let steps = |c: &RunConfig| c.data.train_seeds.len() * c.train.stage1_epochs;
        assert_eq!(steps(&a), steps(&cfg));
    }

    #[test]
    fn averaging_drops_arms_missing_from_a_seed() {
        let row = |arm, dice| AblationRow { arm, level: Level::Base, dice };
        let a = Ablation {
            seed: 0,
            rows: vec![row(EncoderKind::Hash, 0.8), row(EncoderKind::None, 0.0)],
            per_slide: vec![],
        };
        let b = Ablation {
            seed: 1,
            rows: vec![row(EncoderKind::Hash, 0.6)],
            per_slide: vec![],
        };
        let avg = Ablation::averaged(&[a, b]);
        assert_eq!(avg.len(), 1);
        assert!((avg[0].dice - 0.7).abs() < 1e-12);
        assert_eq!(table2_csv(&avg), "arm,level,dice\nhash,base,0.700000\n");
    }
}
