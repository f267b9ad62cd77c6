use crate::data::{Geometry, Image, Level, Mask, SlidePyramid, WindowSampler};
use crate::encoding::CoordEncoder;
use crate::error::Result;
use crate::model::Model;
use crate::objectives::{dice_metric, mse, psnr_from_mse, LESION};

/// Stitched outputs for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutput {
    pub level: Level,
    pub recon: Image,
    /// Lesion probability per pixel, row-major.
    pub lesion: Vec<f64>,
    /// Per-pixel argmax; ties go to background.
    pub mask: Mask,
}

/// Tiles `level` into windows, runs encoder, decoder and both heads on
/// each, and stitches the results.
pub fn infer_dense(
    geometry: &Geometry,
    level: Level,
    model: &Model,
    encoder: &CoordEncoder,
    window: usize,
) -> Result<DenseOutput> {
    let (h, w) = geometry.dims(level)?;
    let mut recon = Image::filled(h, w, [0.0; 3]);
    let mut lesion = vec![0.0; h * w];
    let mut labels = vec![0u8; h * w];
    for win in WindowSampler::sequential(window).tile(level, (h, w))? {
        let coords = geometry.window_coords(&win)?;
        let feats = model.decode_value(encoder.encode(&coords)?, win.hw())?;
        let (rgb, probs) = model.heads_value(feats, win.hw())?;
        recon.paste(&win, rgb.data());
        for (i, p) in probs.data().chunks(2).enumerate() {
            let (r, c) = (win.row0 + i / win.width, win.col0 + i % win.width);
            lesion[r * w + c] = p[LESION];
            labels[r * w + c] = (p[LESION] > p[1 - LESION]) as u8;
        }
    }
    Ok(DenseOutput {
        level,
        recon,
        lesion,
        mask: Mask::new(h, w, labels)?,
    })
}

pub const METRICS_HEADER: &str = "phase,mode,slide,level,dice,psnr,mse,tp,fp,fn";

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub phase: String,
    pub mode: String,
    pub slide: String,
    pub level: Level,
    pub dice: f64,
    pub psnr: f64,
    pub mse: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        let psnr = if self.psnr.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.6}", self.psnr)
        };
        format!(
            "{},{},{},{},{:.6},{},{:.8},{},{},{}",
            self.phase, self.mode, self.slide, self.level, self.dice, psnr, self.mse, self.tp, self.fp, self.fn_
        )
    }
}

/// Dice against the level's mask and PSNR against the level's image.
/// The mask is read only here.
pub fn evaluate(out: &DenseOutput, slide: &SlidePyramid, phase: &str, mode: &str) -> Result<MetricRow> {
    let truth = slide.mask(out.level)?;
    let d = dice_metric(&out.mask.to_bools(), &truth.to_bools(), out.level.tag())?;
    let err = mse(out.recon.data(), slide.image(out.level)?.data());
    Ok(MetricRow {
        phase: phase.into(),
        mode: mode.into(),
        slide: slide.id().into(),
        level: out.level,
        dice: d.dice,
        psnr: psnr_from_mse(err),
        mse: err,
        tp: d.tp,
        fp: d.fp,
        fn_: d.fn_,
    })
}
