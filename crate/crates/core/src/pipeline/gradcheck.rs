use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{Geometry, Level, Window};
use crate::encoding::{table_name, CoordEncoder, EncoderKind, HashGridEncoder};
use crate::error::{Error, Result};
use crate::model::{Bound, Model, ParamGroup};
use crate::numerics::{finite_diff_check, GradCheckConfig, GradCheckReport, ParamMap, Probe, Tape, Tensor};
use crate::objectives::{bce_loss, dice_loss, mse_loss};

/// Parameter groups covered by a gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    All,
    Encoder,
    Decoder,
    RecHead,
    SegHead,
    Losses,
}

impl FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<GradScope> {
        Ok(match s {
            "all" => GradScope::All,
            "encoder" => GradScope::Encoder,
            "decoder" => GradScope::Decoder,
            "rec_head" | "rec-head" => GradScope::RecHead,
            "seg_head" | "seg-head" => GradScope::SegHead,
            "losses" => GradScope::Losses,
            _ => {
                return Err(Error::Config(format!(
                    "unknown scope `{s}` (all, encoder, decoder, rec_head, seg_head, losses)"
                )))
            }
        })
    }
}

impl GradScope {
    fn includes(self, group: &str) -> bool {
        match self {
            GradScope::All => true,
            GradScope::Encoder => group == "encoder",
            GradScope::Decoder => group == "decoder",
            GradScope::RecHead => group == "rec_head",
            GradScope::SegHead => group == "seg_head",
            GradScope::Losses => group.starts_with("loss_"),
        }
    }
}

const SIDE: usize = 8;
const SLIDE: &str = "gradcheck";
/// Tables are rescaled from the tiny training init so that encoder
/// features carry signal through the network.
const TABLE_SCALE: f64 = 1e3;

fn group_of(name: &str) -> String {
    match ParamGroup::of(name) {
        Ok(ParamGroup::Encoder(_)) => "encoder".into(),
        Ok(g) => g.to_string(),
        Err(_) => name.split('/').next().unwrap_or(name).to_string(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(lo..hi);
    }
    t
}

struct Fixture {
    cfg: RunConfig,
    coords: Vec<[f64; 2]>,
    image: Tensor,
    labels: Vec<u8>,
    mse_target: Tensor,
    seg_labels: Vec<u8>,
}

impl Fixture {
    /// Full loss: reconstruction MSE plus BCE and Dice on the segmentation
    /// output, and the standalone loss probes.
    fn evaluate(&self, params: &ParamMap, want_grads: bool) -> Result<(Probe, BTreeMap<String, Tensor>)> {
        let mut model_params = ParamMap::new();
        let mut tables = ParamMap::new();
        let mut loose = ParamMap::new();
        for (name, t) in params {
            match ParamGroup::of(name) {
                Ok(ParamGroup::Encoder(_)) => {
                    tables.insert(name.rsplit('/').next().unwrap().to_string(), t.clone());
                }
                Ok(_) => {
                    model_params.insert(name.clone(), t.clone());
                }
                Err(_) => {
                    loose.insert(name.clone(), t.clone());
                }
            }
        }
        let model = Model::from_params(self.cfg.model.clone(), self.cfg.encoder.width(), model_params)?;
        let encoder = match self.cfg.encoder.kind {
            EncoderKind::Hash => CoordEncoder::Hash(HashGridEncoder::from_tables(self.cfg.encoder.hash.clone(), tables)?),
            _ => self.cfg.encoder.build(0)?,
        };

        let mut tape = Tape::new();
        let (x, table_vars) = encoder.encode_on_tape(&mut tape, &self.coords, true)?;
        let mut b = Bound::new();
        for (name, v) in table_vars {
            b.insert(format!("encoder/{SLIDE}/{name}"), v);
        }
        for g in ParamGroup::GLOBAL {
            model.bind(&mut tape, &g, true, &mut b)?;
        }
        let hw = (SIDE, SIDE);
        let feats = model.decode(&mut tape, &b, x, hw)?;
        let rgb = model.rec_head(&mut tape, &b, feats, hw)?;
        let probs = model.seg_head(&mut tape, &b, feats, hw)?;
        let mut terms = vec![
            mse_loss(&mut tape, rgb, &self.image)?,
            bce_loss(&mut tape, probs, &self.labels)?,
            dice_loss(&mut tape, probs, &self.labels, self.cfg.train.dice_variant)?,
        ];

        let pred = tape.param(loose["loss_mse/pred"].clone())?;
        b.insert("loss_mse/pred".into(), pred);
        terms.push(mse_loss(&mut tape, pred, &self.mse_target)?);
        let bl = tape.param(loose["loss_bce/logits"].clone())?;
        b.insert("loss_bce/logits".into(), bl);
        let bp = tape.softmax(bl)?;
        terms.push(bce_loss(&mut tape, bp, &self.seg_labels)?);
        let dl = tape.param(loose["loss_dice/logits"].clone())?;
        b.insert("loss_dice/logits".into(), dl);
        let dp = tape.softmax(dl)?;
        terms.push(dice_loss(&mut tape, dp, &self.seg_labels, self.cfg.train.dice_variant)?);

        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        let probe = Probe {
            loss: tape.value(total).item(),
            signature: tape.branch_signature(),
        };
        let grads = if want_grads {
            b.gradients(&mut tape.backward(total)?)
        } else {
            BTreeMap::new()
        };
        Ok((probe, grads))
    }
}

/// Central-difference check of every gradient the training stages use:
/// a slide encoder, the decoder, both heads and the three losses.
pub fn gradcheck(cfg: &RunConfig, scope: GradScope, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(cfg.model.clone(), cfg.encoder.width(), rng.gen())?;
    let mut params = model.params().clone();
    if let CoordEncoder::Hash(h) = cfg.encoder.build(rng.gen())? {
        for l in 0..h.config().levels {
            let mut t = h.tables()[&table_name(l)].clone();
            t.scale(TABLE_SCALE);
            params.insert(format!("encoder/{SLIDE}/{}", table_name(l)), t);
        }
    }
    let n = SIDE * SIDE;
    params.insert("loss_mse/pred".into(), uniform(&mut rng, &[16, 3], 0.05, 0.95));
    params.insert("loss_bce/logits".into(), uniform(&mut rng, &[16, 2], -2.0, 2.0));
    params.insert("loss_dice/logits".into(), uniform(&mut rng, &[16, 2], -2.0, 2.0));

    // an 8×8 window somewhere inside a 64×64 slide
    let geometry = Geometry::for_base(64, 64, 1);
    let window = Window {
        level: Level::Base,
        row0: rng.gen_range(0..64 - SIDE),
        col0: rng.gen_range(0..64 - SIDE),
        height: SIDE,
        width: SIDE,
    };
    let fixture = Fixture {
        cfg: cfg.clone(),
        coords: geometry.window_coords(&window)?,
        image: uniform(&mut rng, &[n, 3], 0.0, 1.0),
        labels: (0..n).map(|_| rng.gen_range(0..2u8)).collect(),
        mse_target: uniform(&mut rng, &[16, 3], 0.0, 1.0),
        seg_labels: (0..16).map(|_| rng.gen_range(0..2u8)).collect(),
    };

    let (_, analytic) = fixture.evaluate(&params, true)?;
    let probed: ParamMap = params
        .iter()
        .filter(|(n, _)| scope.includes(&group_of(n)))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let mut loss = |p: &ParamMap| -> Result<Probe> {
        let mut full = params.clone();
        for (n, t) in p {
            full.insert(n.clone(), t.clone());
        }
        fixture.evaluate(&full, false).map(|r| r.0)
    };
    let gc = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    finite_diff_check(&mut loss, &probed, &analytic, &group_of, &BTreeSet::new(), &gc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn scopes_parse() {
        assert_eq!("all".parse::<GradScope>().unwrap(), GradScope::All);
        assert_eq!("rec-head".parse::<GradScope>().unwrap(), GradScope::RecHead);
        assert!(matches!("heads".parse::<GradScope>(), Err(Error::Config(_))));
    }

    #[test]
    fn desk_preset_passes_for_one_seed() {
        let cfg = RunConfig::preset(Preset::DeskScale);
        let report = gradcheck(&cfg, GradScope::All, 1).unwrap();
        let groups: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(
            groups,
            ["decoder", "encoder", "loss_bce", "loss_dice", "loss_mse", "rec_head", "seg_head"]
        );
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn scope_limits_groups() {
        let cfg = RunConfig::preset(Preset::DeskScale);
        let report = gradcheck(&cfg, GradScope::Losses, 2).unwrap();
        assert_eq!(report.groups.len(), 3);
        assert!(report.passed());
    }
}
