use crate::config::RunConfig;
use crate::data::{ImagePyramid, Level};
use crate::encoding::CoordEncoder;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{mse, psnr_from_mse};
use crate::pipeline::{infer_dense, DenseOutput};

use super::spectrum::{image_spectrum, SpectrumReport};

/// Which hash levels stay active during inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoupleVariant {
    /// Levels `>= split` only.
    HighOnly,
    /// Levels `< split` only.
    LowOnly,
    Full,
}

impl DecoupleVariant {
    pub const ALL: [DecoupleVariant; 3] = [DecoupleVariant::HighOnly, DecoupleVariant::LowOnly, DecoupleVariant::Full];

    pub fn tag(self) -> &'static str {
        match self {
            DecoupleVariant::HighOnly => "high-only",
            DecoupleVariant::LowOnly => "low-only",
            DecoupleVariant::Full => "full",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoupleOutput {
    pub variant: DecoupleVariant,
    pub output: DenseOutput,
    pub psnr: f64,
    pub spectrum: SpectrumReport,
}

#[derive(Clone, Debug)]
pub struct Decoupling {
    pub slide: String,
    pub level: Level,
    pub split: usize,
    /// Spectrum of the source image patch.
    pub reference: SpectrumReport,
    pub variants: Vec<DecoupleOutput>,
}

impl Decoupling {
    pub fn get(&self, variant: DecoupleVariant) -> &DecoupleOutput {
        self.variants.iter().find(|v| v.variant == variant).expect("all variants are computed")
    }

    /// `variant,psnr,high_band_energy,parseval_error`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,psnr,high_band_energy,parseval_error\n");
        let rows = self
            .variants
            .iter()
            .map(|v| (v.variant.tag(), v.psnr, &v.spectrum))
            .chain(std::iter::once(("source", f64::INFINITY, &self.reference)));
        for (tag, psnr, s) in rows {
            let psnr = if psnr.is_finite() { format!("{psnr:.6}") } else { "inf".into() };
            out += &format!("{tag},{psnr},{:.10e},{:.3e}\n", s.high_band_energy(), s.parseval_error());
        }
        out
    }
}

/// Infers one level three times with subsets of the hash levels zeroed
/// and measures reconstruction PSNR and the spectrum of a centered patch.
pub fn decouple_hash_levels(
    images: &ImagePyramid,
    level: Level,
    model: &Model,
    encoder: &CoordEncoder,
    split: Option<usize>,
    cfg: &RunConfig,
) -> Result<Decoupling> {
    let hash = encoder
        .as_hash()
        .ok_or_else(|| Error::Config(format!("decoupling needs a hash encoder, got {}", encoder.kind())))?;
    let levels = hash.config().levels;
    let split = split.unwrap_or_else(|| hash.first_hashed_level());
    if split < 1 || split >= levels {
        return Err(Error::Config(format!("split {split} outside [1, {}]", levels - 1)));
    }
    let image = images.level(level)?;
    let patch = cfg.experiments.spectrum_patch;
    let mut variants = Vec::new();
    for variant in DecoupleVariant::ALL {
        let view = match variant {
            DecoupleVariant::HighOnly => hash.masked(|l| l >= split),
            DecoupleVariant::LowOnly => hash.masked(|l| l < split),
            DecoupleVariant::Full => hash.clone(),
        };
        let output = infer_dense(&images.geometry, level, model, &CoordEncoder::Hash(view), cfg.train.window)?;
        let psnr = psnr_from_mse(mse(output.recon.data(), image.data()));
        let spectrum = image_spectrum(&output.recon, patch)?;
        variants.push(DecoupleOutput {
            variant,
            output,
            psnr,
            spectrum,
        });
    }
    Ok(Decoupling {
        slide: images.id.clone(),
        level,
        split,
        reference: image_spectrum(image, patch)?,
        variants,
    })
}

/// Log-magnitude spectrum scaled to `[0,1]` as an RGB image.
pub fn spectrum_image(s: &SpectrumReport) -> Result<crate::data::Image> {
    let max = s.log_magnitude.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let data = s.log_magnitude.iter().flat_map(|v| [v / max; 3]).collect();
    crate::data::Image::new(s.size, s.size, data)
}

/// Writes `summary.csv`, per-variant reconstructions, masks, spectra and
/// radial profiles under `dir`.
pub fn write_decoupling(dir: &std::path::Path, d: &Decoupling) -> Result<()> {
    super::write_file(&dir.join("summary.csv"), d.summary_csv().as_bytes())?;
    let meta = format!("slide={}\nlevel={}\nsplit={}\n", d.slide, d.level, d.split);
    super::write_file(&dir.join("meta.txt"), meta.as_bytes())?;
    crate::data::save_png(&spectrum_image(&d.reference)?, &dir.join("source_spectrum.png"))?;
    for v in &d.variants {
        let sub = dir.join(v.variant.tag());
        super::write_dense(&sub, &v.output)?;
        crate::data::save_png(&spectrum_image(&v.spectrum)?, &sub.join("spectrum.png"))?;
        let mut radial = String::from("band,energy\n");
        for (i, e) in v.spectrum.radial.iter().enumerate() {
            radial += &format!("{i},{e:.10e}\n");
        }
        super::write_file(&sub.join("radial.csv"), radial.as_bytes())?;
    }
    Ok(())
}
