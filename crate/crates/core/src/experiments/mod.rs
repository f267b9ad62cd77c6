//! Evaluation protocols on top of the training pipeline: cross-resolution
//! evaluation, the encoder ablation, hash-level decoupling with spectra,
//! and report emission.

mod ablation;
mod decouple;
mod report;
pub mod spectrum;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::{save_mask_png, save_png, Level, SlidePyramid};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::{evaluate, infer_dense, run_ito, DenseOutput, ItoResult, MetricRow, RunDir, StopDecision};

pub use ablation::{arm_config, run_ablation, table2_csv, Ablation, AblationRow};
pub use decouple::{decouple_hash_levels, spectrum_image, write_decoupling, DecoupleOutput, DecoupleVariant, Decoupling};
pub use report::{emit_report, ReportOutcome};
pub use spectrum::{fft2_magnitude, image_spectrum, SpectrumReport};

/// Signed relative change `(value - base) / base` in percent, two decimals.
///
/// ```
/// use wsi_inr::experiments::format_pct;
/// assert_eq!(format_pct(0.2417, 0.1683), "-30.37%");
/// assert_eq!(format_pct(0.2417, 0.3048), "+26.11%");
/// assert_eq!(format_pct(0.0, 0.5), "n/a");
/// ```
pub fn format_pct(base: f64, value: f64) -> String {
    if base == 0.0 || !base.is_finite() || !value.is_finite() {
        return "n/a".into();
    }
    format!("{:+.2}%", (value - base) / base * 100.0)
}

/// How the slide encoder is adapted before evaluating a level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvalMode {
    /// One ITO run at Base, reused for every level.
    BaseOpt,
    /// An independent ITO run at each evaluated level.
    ResolutionSpecific,
}

impl EvalMode {
    pub const ALL: [EvalMode; 2] = [EvalMode::BaseOpt, EvalMode::ResolutionSpecific];

    pub fn tag(self) -> &'static str {
        match self {
            EvalMode::BaseOpt => "base-resolution-opt",
            EvalMode::ResolutionSpecific => "resolution-specific-opt",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<EvalMode> {
        match s {
            "base-resolution-opt" | "base-opt" | "base" => Ok(EvalMode::BaseOpt),
            "resolution-specific-opt" | "resolution-specific" => Ok(EvalMode::ResolutionSpecific),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}` (base-resolution-opt, resolution-specific-opt)"
            ))),
        }
    }
}

/// One evaluated (mode, slide, level) cell.
#[derive(Clone, Debug)]
pub struct EvalEntry {
    pub mode: EvalMode,
    pub metrics: MetricRow,
    /// Stop decision of the ITO run whose encoder produced this cell.
    pub stop: StopDecision,
}

/// Per-slide, per-level Dice for each protocol mode.
#[derive(Clone, Debug, Default)]
pub struct CrossResolution {
    pub entries: Vec<EvalEntry>,
}

impl CrossResolution {
    pub fn mean_dice(&self, mode: EvalMode, level: Level) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.mode == mode && e.metrics.level == level)
            .map(|e| e.metrics.dice)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    fn base_dice(&self, mode: EvalMode, slide: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.mode == mode && e.metrics.slide == slide && e.metrics.level == Level::Base)
            .map(|e| e.metrics.dice)
    }

    /// `mode,slide,level,dice,pct_change`; per-slide rows, then `mean` rows.
    pub fn table1_csv(&self) -> String {
        let mut out = String::from("mode,slide,level,dice,pct_change\n");
        for e in &self.entries {
            let m = &e.metrics;
            let pct = self.base_dice(e.mode, &m.slide).map_or("n/a".into(), |b| format_pct(b, m.dice));
            out += &format!("{},{},{},{:.6},{}\n", e.mode, m.slide, m.level, m.dice, pct);
        }
        for mode in EvalMode::ALL {
            let Some(base) = self.mean_dice(mode, Level::Base) else { continue };
            for level in Level::ALL {
                if let Some(d) = self.mean_dice(mode, level) {
                    out += &format!("{mode},mean,{level},{d:.6},{}\n", format_pct(base, d));
                }
            }
        }
        out
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.entries.iter().map(|e| e.metrics.clone()).collect()
    }
}

/// Receives every ITO result and dense output as evaluation proceeds.
pub type EvalSink<'a> = dyn FnMut(EvalMode, &ItoResult, &DenseOutput) -> Result<()> + 'a;

/// Runs ITO per protocol mode, infers densely at every level, and scores
/// against each level's mask. Base-level cells of both modes share one ITO run.
pub fn eval_cross_resolution(
    model: &Model,
    cfg: &RunConfig,
    slides: &[SlidePyramid],
    modes: &[EvalMode],
    sink: &mut EvalSink<'_>,
) -> Result<CrossResolution> {
    let mut table = CrossResolution::default();
    let window = cfg.train.window;
    for slide in slides {
        let base = run_ito(slide.images(), Level::Base, model, cfg)?;
        for &mode in modes {
            for level in Level::ALL {
                let fresh;
                let ito = match (mode, level) {
                    (EvalMode::ResolutionSpecific, Level::Half | Level::Quarter) => {
                        fresh = run_ito(slide.images(), level, model, cfg)?;
                        &fresh
                    }
                    _ => &base,
                };
                let out = infer_dense(slide.geometry(), level, model, &ito.encoder, window)?;
                sink(mode, ito, &out)?;
                table.entries.push(EvalEntry {
                    mode,
                    metrics: evaluate(&out, slide, "eval", mode.tag())?,
                    stop: ito.decision.clone(),
                });
            }
        }
    }
    Ok(table)
}

/// Artifact paths under a run directory shared by the commands and the report.
pub struct Layout<'a>(pub &'a RunDir);

impl Layout<'_> {
    pub fn table1(&self) -> PathBuf {
        self.0.root().join("eval").join("table1.csv")
    }

    pub fn table2(&self) -> PathBuf {
        self.0.root().join("ablation").join("table2.csv")
    }

    pub fn ablation_seed(&self, seed: u64) -> PathBuf {
        self.0.root().join("ablation").join(format!("seed_{seed}"))
    }

    pub fn decouple(&self) -> PathBuf {
        self.0.root().join("decouple")
    }

    pub fn ito(&self, mode: EvalMode, slide: &str, level: Level) -> PathBuf {
        self.0.root().join("ito").join(mode.tag()).join(slide).join(level.file_tag())
    }

    pub fn output(&self, mode: EvalMode, slide: &str, level: Level) -> PathBuf {
        self.0.outputs(slide, level).join(mode.tag())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.0.root().join("report")
    }
}

/// Writes the stop reason, trajectory and adapted encoder of one ITO run.
pub fn write_ito(dir: &std::path::Path, ito: &ItoResult) -> Result<()> {
    let mut trajectory = String::from("epoch,mse\n");
    for (i, m) in ito.trajectory.iter().enumerate() {
        trajectory += &format!("{},{m:.10}\n", i + 1);
    }
    write_file(&dir.join("stop_reason.txt"), format!("{}\n", ito.decision.reason.tag()).as_bytes())?;
    write_file(&dir.join("trajectory.csv"), trajectory.as_bytes())?;
    if let Some(h) = ito.encoder.as_hash() {
        let mut ck = crate::numerics::Checkpoint::new();
        ck.insert_params("encoder/", h.tables());
        ck.meta.insert("slide".into(), ito.slide.clone().into());
        ck.meta.insert("level".into(), ito.level.tag().into());
        write_file(&dir.join("encoder.ckpt"), &ck.to_bytes()?)?;
    }
    Ok(())
}

/// Writes the reconstruction, predicted mask and lesion probability map.
pub fn write_dense(dir: &std::path::Path, out: &DenseOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_png(&out.recon, &dir.join("recon.png"))?;
    save_mask_png(&out.mask, &dir.join("mask.png"))?;
    crate::data::save_gray_png(&out.lesion, out.mask.height(), out.mask.width(), &dir.join("lesion.png"))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &std::path::Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_printed_deltas() {
        let cases = [
            (0.2417, 0.1683, "-30.37%"),
            (0.2417, 0.1664, "-31.15%"),
            (0.2417, 0.2333, "-3.48%"),
            (0.2417, 0.3048, "+26.11%"),
            (0.4858, 0.2418, "-50.23%"),
            (0.4858, 0.2221, "-54.28%"),
            (0.1534, 0.1146, "-25.29%"),
            (0.1534, 0.0979, "-36.18%"),
        ];
        for (base, value, want) in cases {
            assert_eq!(format_pct(base, value), want, "{base} -> {value}");
        }
        assert_eq!(format_pct(0.5, 0.5), "+0.00%");
    }

    #[test]
    fn modes_round_trip() {
        for m in EvalMode::ALL {
            assert_eq!(m.tag().parse::<EvalMode>().unwrap(), m);
        }
        assert!("dense".parse::<EvalMode>().is_err());
    }
}
