use std::collections::{BTreeMap, HashMap};

use serde_json::json;

use super::infer::{evaluate, infer_dense, MetricRow};
use super::{param_digest, FreezePlan, Phase};
use crate::config::RunConfig;
use crate::data::{Level, SlidePyramid, Window, WindowBatch};
use crate::encoding::{CoordEncoder, HashGridEncoder};
use crate::error::{Error, Result};
use crate::model::{Bound, Model, ParamGroup};
use crate::numerics::{AdamState, Checkpoint, ParamMap, Tape, Tensor};
use crate::objectives::{bce_loss, dice_loss, mse_loss, LossValue};

/// Everything that moves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config_hash: String,
    pub model: Model,
    /// Per training slide. Fixed encoders are stored once per slide too.
    pub encoders: BTreeMap<String, CoordEncoder>,
    pub net_adam: AdamState,
    pub enc_adam: BTreeMap<String, AdamState>,
    /// Slide-mean training MSE per stage-1 epoch.
    pub stage1: Vec<f64>,
    pub stage2: Vec<LossValue>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, slide_ids: &[String]) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.encoder.width(), cfg.derive_seed("model"))?;
        let mut encoders = BTreeMap::new();
        let mut enc_adam = BTreeMap::new();
        for id in slide_ids {
            if id.is_empty() || id.contains('/') {
                return Err(Error::Data(format!("slide id `{id}` must be nonempty without '/'")));
            }
            encoders.insert(id.clone(), cfg.encoder.build(cfg.derive_seed(&format!("encoder/{id}")))?);
            enc_adam.insert(id.clone(), AdamState::new(cfg.train.adam(cfg.train.encoder_lr)));
        }
        Ok(TrainState {
            config_hash: cfg.hash()?,
            model,
            encoders,
            net_adam: AdamState::new(cfg.train.adam(cfg.train.lr)),
            enc_adam,
            stage1: Vec::new(),
            stage2: Vec::new(),
        })
    }

    /// Slide encoder tables under `encoder/{slide}/…`.
    pub fn encoder_params(&self) -> ParamMap {
        let mut out = ParamMap::new();
        for (id, enc) in &self.encoders {
            if let Some(h) = enc.as_hash() {
                for (name, t) in h.tables() {
                    out.insert(format!("encoder/{id}/{name}"), t.clone());
                }
            }
        }
        out
    }

    /// Digest of one parameter group.
    pub fn digest(&self, group: &ParamGroup) -> String {
        match group {
            ParamGroup::Encoder(_) => param_digest(&self.encoder_params(), &group.prefix()),
            _ => param_digest(self.model.params(), &group.prefix()),
        }
    }

    pub fn stage1_done(&self, cfg: &RunConfig) -> bool {
        self.stage1.len() >= cfg.train.stage1_epochs
    }

    pub fn stage2_done(&self, cfg: &RunConfig) -> bool {
        self.stage2.len() >= cfg.train.stage2_epochs()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.meta.insert("config_hash".into(), json!(self.config_hash));
        ck.meta.insert("stage1".into(), json!(self.stage1));
        ck.meta.insert("stage2".into(), serde_json::to_value(&self.stage2)?);
        ck.insert_params("model/", self.model.params());
        ck.insert_params("", &self.encoder_params());
        ck.insert_adam("net", &self.net_adam);
        for (id, a) in &self.enc_adam {
            ck.insert_adam(&format!("encoder/{id}"), a);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(cfg: &RunConfig, slide_ids: &[String], ck: &Checkpoint) -> Result<Self> {
        let hash = cfg.hash()?;
        let stored = ck.meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("");
        if stored != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written by config {stored}, current config is {hash}"
            )));
        }
        let mut state = TrainState::new(cfg, slide_ids)?;
        state.model = Model::from_params(cfg.model.clone(), cfg.encoder.width(), ck.params("model/"))?;
        for id in slide_ids {
            if cfg.encoder.kind == crate::encoding::EncoderKind::Hash {
                let tables = ck.params(&format!("encoder/{id}/"));
                let enc = HashGridEncoder::from_tables(cfg.encoder.hash.clone(), tables)?;
                state.encoders.insert(id.clone(), CoordEncoder::Hash(enc));
            }
            state.enc_adam.insert(id.clone(), ck.adam(&format!("encoder/{id}"))?);
        }
        state.net_adam = ck.adam("net")?;
        state.stage1 = serde_json::from_value(ck.meta.get("stage1").cloned().unwrap_or(json!([])))?;
        state.stage2 = serde_json::from_value(ck.meta.get("stage2").cloned().unwrap_or(json!([])))?;
        Ok(state)
    }
}

pub(crate) struct ReconPass {
    pub mse: f64,
    pub net_grads: BTreeMap<String, Tensor>,
    pub enc_grads: BTreeMap<String, Tensor>,
}

/// encode → decode → rec_head → MSE, with gradients for the groups the
/// plan leaves trainable.
pub(crate) fn reconstruction_pass(
    model: &Model,
    encoder: &CoordEncoder,
    batch: &WindowBatch,
    plan: FreezePlan,
) -> Result<ReconPass> {
    let mut tape = Tape::new();
    let enc_trainable = plan.encoders && encoder.is_learnable();
    let (x, tables) = encoder.encode_on_tape(&mut tape, &batch.coords, enc_trainable)?;
    let mut b = Bound::new();
    model.bind(&mut tape, &ParamGroup::Decoder, plan.decoder, &mut b)?;
    model.bind(&mut tape, &ParamGroup::RecHead, plan.rec_head, &mut b)?;
    let hw = batch.window.hw();
    let feats = model.decode(&mut tape, &b, x, hw)?;
    let rgb = model.rec_head(&mut tape, &b, feats, hw)?;
    let loss = mse_loss(&mut tape, rgb, &batch.image)?;
    let mse = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let net_grads = b.gradients(&mut grads);
    let enc_grads: BTreeMap<String, Tensor> = tables
        .into_iter()
        .filter_map(|(n, v)| grads.take(v).map(|g| (n, g)))
        .collect();
    for name in net_grads.keys() {
        if !plan.trainable(&ParamGroup::of(name)?) {
            return Err(Error::Invariant(format!("gradient reached frozen parameter {name}")));
        }
    }
    if !enc_trainable && !enc_grads.is_empty() {
        return Err(Error::Invariant("gradient reached a frozen encoder".into()));
    }
    Ok(ReconPass {
        mse,
        net_grads,
        enc_grads,
    })
}

/// Adds the stage, slide and window to non-finite errors.
pub(crate) fn with_window(e: Error, stage: &str, slide: &str, w: &Window) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!(
                "{op} ({stage}, slide {slide}, {} window at row {} col {}, {}x{})",
                w.level, w.row0, w.col0, w.height, w.width
            ),
        },
        other => other,
    }
}

fn check_unchanged(before: &[(ParamGroup, String)], state: &TrainState, stage: &str) -> Result<()> {
    for (group, digest) in before {
        if &state.digest(group) != digest {
            return Err(Error::Invariant(format!("{stage} modified frozen group {group}")));
        }
    }
    Ok(())
}

/// Windows per slide for one epoch, interleaved round-robin.
fn round_robin(lists: &[Vec<Window>]) -> Vec<(usize, Window)> {
    let rounds = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..rounds {
        for (s, l) in lists.iter().enumerate() {
            if let Some(w) = l.get(i) {
                out.push((s, *w));
            }
        }
    }
    out
}

/// Reconstruction training of encoders, decoder and rec head at Base.
/// Resumes from `state.stage1.len()` completed epochs.
pub fn train_stage1(
    state: &mut TrainState,
    cfg: &RunConfig,
    slides: &[SlidePyramid],
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    let plan = FreezePlan::for_phase(Phase::Stage1);
    let sampler = cfg.train.sampler(cfg.derive_seed("windows/stage1"));
    while !state.stage1_done(cfg) {
        let epoch = state.stage1.len();
        let frozen = vec![(ParamGroup::SegHead, state.digest(&ParamGroup::SegHead))];
        let lists = slides
            .iter()
            .map(|s| sampler.windows(s.image(Level::Base)?, Level::Base, epoch))
            .collect::<Result<Vec<_>>>()?;
        let mut sums = vec![(0.0, 0usize); slides.len()];
        for (s, w) in round_robin(&lists) {
            let slide = &slides[s];
            let id = slide.id();
            let batch = WindowBatch::from_pyramid(slide.images(), w)?;
            let encoder = state
                .encoders
                .get(id)
                .ok_or_else(|| Error::Data(format!("no encoder for slide {id}")))?;
            let pass = reconstruction_pass(&state.model, encoder, &batch, plan)
                .map_err(|e| with_window(e, "stage 1", id, &w))?;
            state.net_adam.step(state.model.params_mut(), &pass.net_grads, |_| 1.0)?;
            if let Some(h) = state.encoders.get_mut(id).and_then(CoordEncoder::as_hash_mut) {
                state.enc_adam.get_mut(id).unwrap().step(h.tables_mut(), &pass.enc_grads, |_| 1.0)?;
            }
            sums[s].0 += pass.mse * w.pixels() as f64;
            sums[s].1 += w.pixels();
        }
        let mean = sums.iter().map(|(e, n)| e / *n as f64).sum::<f64>() / slides.len() as f64;
        check_unchanged(&frozen, state, "stage 1")?;
        state.stage1.push(mean);
        on_epoch(state)?;
    }
    Ok(())
}

struct CachedWindow {
    feats: Tensor,
    labels: Vec<u8>,
}

/// Segmentation-head training on frozen decoder features at Base.
pub fn train_stage2(
    state: &mut TrainState,
    cfg: &RunConfig,
    slides: &[SlidePyramid],
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    if !state.stage1_done(cfg) {
        return Err(Error::Config("stage 2 requires a completed stage 1".into()));
    }
    let sampler = cfg.train.sampler(cfg.derive_seed("windows/stage2"));
    let mut frozen: Vec<(ParamGroup, String)> = [ParamGroup::Decoder, ParamGroup::RecHead]
        .into_iter()
        .map(|g| {
            let d = state.digest(&g);
            (g, d)
        })
        .collect();
    for id in state.encoders.keys() {
        let g = ParamGroup::Encoder(id.clone());
        frozen.push((g.clone(), state.digest(&g)));
    }

    let mut cache: Vec<HashMap<(usize, usize), CachedWindow>> = Vec::new();
    for slide in slides {
        let encoder = &state.encoders[slide.id()];
        let mask = slide.mask(Level::Base)?;
        let mut per = HashMap::new();
        for w in sampler.tile(Level::Base, slide.geometry().dims(Level::Base)?)? {
            let coords = slide.geometry().window_coords(&w)?;
            let feats = state.model.decode_value(encoder.encode(&coords)?, w.hw())?;
            per.insert((w.row0, w.col0), CachedWindow {
                feats,
                labels: mask.crop(&w),
            });
        }
        cache.push(per);
    }

    while !state.stage2_done(cfg) {
        let epoch = state.stage2.len();
        let lists = slides
            .iter()
            .map(|s| sampler.windows(s.image(Level::Base)?, Level::Base, epoch))
            .collect::<Result<Vec<_>>>()?;
        let mut acc = LossValue::default();
        let mut pixels = 0usize;
        for (s, w) in round_robin(&lists) {
            let item = &cache[s][&(w.row0, w.col0)];
            let step = || -> Result<(LossValue, BTreeMap<String, Tensor>)> {
                let mut tape = Tape::new();
                let mut b = Bound::new();
                state.model.bind(&mut tape, &ParamGroup::SegHead, true, &mut b)?;
                let f = tape.constant(item.feats.clone())?;
                let probs = state.model.seg_head(&mut tape, &b, f, w.hw())?;
                let bce = bce_loss(&mut tape, probs, &item.labels)?;
                let dice = dice_loss(&mut tape, probs, &item.labels, cfg.train.dice_variant)?;
                let total = tape.add(bce, dice)?;
                let value = LossValue {
                    total: tape.value(total).item(),
                    mse: 0.0,
                    bce: tape.value(bce).item(),
                    dice: tape.value(dice).item(),
                };
                let grads = b.gradients(&mut tape.backward(total)?);
                Ok((value, grads))
            };
            let (value, grads) = step().map_err(|e| with_window(e, "stage 2", slides[s].id(), &w))?;
            state.net_adam.step(state.model.params_mut(), &grads, |_| 1.0)?;
            let n = w.pixels() as f64;
            acc.total += value.total * n;
            acc.bce += value.bce * n;
            acc.dice += value.dice * n;
            pixels += w.pixels();
        }
        let n = pixels as f64;
        state.stage2.push(LossValue {
            total: acc.total / n,
            mse: 0.0,
            bce: acc.bce / n,
            dice: acc.dice / n,
        });
        check_unchanged(&frozen, state, "stage 2")?;
        on_epoch(state)?;
    }
    Ok(())
}

/// Dense Base-level metrics of every training slide with its own encoder.
pub fn training_metrics(state: &TrainState, cfg: &RunConfig, slides: &[SlidePyramid]) -> Result<Vec<MetricRow>> {
    slides
        .iter()
        .map(|s| {
            let out = infer_dense(s.geometry(), Level::Base, &state.model, &state.encoders[s.id()], cfg.train.window)?;
            evaluate(&out, s, "train", "-")
        })
        .collect()
}
