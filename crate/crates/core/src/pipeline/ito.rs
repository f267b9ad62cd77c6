use super::train::{reconstruction_pass, with_window};
use super::{check_stop, FreezePlan, Phase, StopDecision};
use crate::config::RunConfig;
use crate::data::{ImagePyramid, Level, WindowBatch};
use crate::encoding::CoordEncoder;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamState, EmaState};

/// Outcome of inference-time optimization for one slide and level.
#[derive(Clone, Debug)]
pub struct ItoResult {
    pub slide: String,
    pub level: Level,
    /// EMA-resolved encoder used for inference.
    pub encoder: CoordEncoder,
    /// Encoder after the last optimizer step.
    pub raw: CoordEncoder,
    /// Epoch-mean reconstruction MSE, one entry per epoch.
    pub trajectory: Vec<f64>,
    pub decision: StopDecision,
}

/// Fits a fresh encoder for an unseen slide by reconstruction at `level`,
/// with every shared parameter frozen. Receives image levels only.
pub fn run_ito(images: &ImagePyramid, level: Level, model: &Model, cfg: &RunConfig) -> Result<ItoResult> {
    let ito = &cfg.ito;
    ito.validate()?;
    let plan = FreezePlan::for_phase(Phase::Ito);
    let mut encoder = cfg.encoder.build(cfg.derive_seed(&format!("ito/{}", images.id)))?;
    let sampler = cfg.train.sampler(cfg.derive_seed(&format!("windows/ito/{}", images.id)));
    let image = images.level(level)?;

    let mut adam = AdamState::new(cfg.train.adam(ito.lr));
    let mut ema = match encoder.as_hash() {
        Some(h) => Some(EmaState::new(h.tables(), ito.ema_decay, ito.ema_warmup)?),
        None => None,
    };
    let mut trajectory = Vec::new();
    let decision = loop {
        let epoch = trajectory.len() + 1;
        let (mut err, mut pixels) = (0.0, 0usize);
        for w in sampler.windows(image, level, epoch)? {
            let batch = WindowBatch::from_pyramid(images, w)?;
            let pass = reconstruction_pass(model, &encoder, &batch, plan)
                .map_err(|e| with_window(e, "ito", &images.id, &w))?;
            if !pass.net_grads.is_empty() {
                return Err(Error::Invariant("gradient reached a shared parameter during ITO".into()));
            }
            if let (Some(h), Some(ema)) = (encoder.as_hash_mut(), ema.as_mut()) {
                adam.step(h.tables_mut(), &pass.enc_grads, |_| 1.0)?;
                ema.update(h.tables())?;
            }
            err += pass.mse * w.pixels() as f64;
            pixels += w.pixels();
        }
        trajectory.push(err / pixels as f64);
        let d = check_stop(&trajectory, ito)?;
        // a fixed encoder has nothing to optimize
        if d.stop || ema.is_none() {
            break d;
        }
    };

    let raw = encoder.clone();
    if let (Some(h), Some(mut ema)) = (encoder.as_hash_mut(), ema) {
        ema.swap(h.tables_mut())?;
    }
    Ok(ItoResult {
        slide: images.id.clone(),
        level,
        encoder,
        raw,
        trajectory,
        decision,
    })
}
