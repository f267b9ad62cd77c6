use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{load_mask_png, load_png, save_png, Image, Level, Mask, Split};
use crate::encoding::EncoderKind;
use crate::error::{Error, Result};
use crate::pipeline::{load_slides, RunDir};

use super::{write_file, DecoupleVariant, EvalMode, Layout};

/// Files produced by [`emit_report`] and inputs it could not find.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportOutcome {
    /// Paths relative to the run directory, sorted.
    pub files: Vec<PathBuf>,
    pub missing: Vec<String>,
}

fn read_csv(path: &Path) -> Option<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).ok()?;
    Some(
        text.lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect(),
    )
}

fn mask_image(mask: &Mask) -> Image {
    let data = mask.data().iter().flat_map(|&v| [v as f64; 3]).collect();
    Image::new(mask.height(), mask.width(), data).expect("mask dims are consistent")
}

/// Places images left to right; all must share one height.
pub fn hstack(images: &[Image]) -> Result<Image> {
    let h = images.first().map_or(0, Image::height);
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::shape("hstack", "images differ in height"));
    }
    let w: usize = images.iter().map(Image::width).sum();
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for img in images {
            let row = &img.data()[r * img.width() * 3..(r + 1) * img.width() * 3];
            data.extend_from_slice(row);
        }
    }
    Image::new(h, w, data)
}

struct Writer<'a> {
    run: &'a RunDir,
    files: Vec<PathBuf>,
    missing: Vec<String>,
}

impl Writer<'_> {
    fn rel(&self, path: &Path) -> PathBuf {
        path.strip_prefix(self.run.root()).unwrap_or(path).to_path_buf()
    }

    fn png(&mut self, image: &Image, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_png(image, path)?;
        let rel = self.rel(path);
        self.files.push(rel.clone());
        Ok(rel.display().to_string())
    }
}

fn table1_section(w: &mut Writer<'_>, out: &mut String) {
    out.push_str("## Cross-resolution Dice\n\n");
    let path = Layout(w.run).table1();
    let Some(rows) = read_csv(&path) else {
        w.missing.push(w.rel(&path).display().to_string());
        out.push_str("_absent: no evaluation has been run._\n\n");
        return;
    };
    out.push_str("| mode | base | base/2 | base/4 |\n|---|---|---|---|\n");
    for mode in EvalMode::ALL {
        let cells: Vec<String> = Level::ALL
            .iter()
            .map(|l| {
                rows.iter()
                    .find(|r| r.len() == 5 && r[0] == mode.tag() && r[1] == "mean" && r[2] == l.tag())
                    .map_or("absent".into(), |r| {
                        if *l == Level::Base {
                            r[3].clone()
                        } else {
                            format!("{} ({})", r[3], r[4])
                        }
                    })
            })
            .collect();
        out.push_str(&format!("| {mode} | {} |\n", cells.join(" | ")));
    }
    out.push('\n');
}

fn table2_section(w: &mut Writer<'_>, out: &mut String) {
    out.push_str("## Encoder ablation Dice\n\n");
    let path = Layout(w.run).table2();
    let rows = read_csv(&path);
    if rows.is_none() {
        w.missing.push(w.rel(&path).display().to_string());
    }
    let rows = rows.unwrap_or_default();
    out.push_str("| arm | base | base/2 | base/4 |\n|---|---|---|---|\n");
    for arm in EncoderKind::ALL {
        let cells: Vec<String> = Level::ALL
            .iter()
            .map(|l| {
                rows.iter()
                    .find(|r| r.len() == 3 && r[0] == arm.tag() && r[1] == l.tag())
                    .map_or("absent".into(), |r| r[2].clone())
            })
            .collect();
        out.push_str(&format!("| {arm} | {} |\n", cells.join(" | ")));
    }
    out.push('\n');
}

fn panels_section(w: &mut Writer<'_>, out: &mut String) -> Result<()> {
    out.push_str("## Panels\n\nEach panel: source, reconstruction, true mask, predicted mask.\n\n");
    let cfg = w.run.config()?;
    let slides = match load_slides(&cfg, Split::Test) {
        Ok(s) => s,
        Err(e) => {
            w.missing.push(format!("test slides ({e})"));
            return Ok(());
        }
    };
    let layout = Layout(w.run);
    let mut any = false;
    for slide in &slides {
        for mode in EvalMode::ALL {
            for level in Level::ALL {
                let dir = layout.output(mode, slide.id(), level);
                let (recon, mask) = (dir.join("recon.png"), dir.join("mask.png"));
                if !recon.exists() || !mask.exists() {
                    continue;
                }
                let panel = hstack(&[
                    slide.image(level)?.clone(),
                    load_png(&recon)?,
                    mask_image(slide.mask(level)?),
                    mask_image(&load_mask_png(&mask)?),
                ])?;
                let name = format!("{}_{}_{}.png", slide.id(), level.file_tag(), mode.tag());
                let rel = w.png(&panel, &layout.report_dir().join("panels").join(name))?;
                out.push_str(&format!("- {} {} {}: ![]({rel})\n", slide.id(), level, mode));
                any = true;
            }
        }
    }
    if !any {
        w.missing.push("outputs/<slide>/<level>/<mode>/{recon,mask}.png".into());
        out.push_str("_absent: no dense outputs._\n");
    }
    out.push('\n');
    Ok(())
}

fn decouple_section(w: &mut Writer<'_>, out: &mut String) -> Result<()> {
    out.push_str("## Hash-level decoupling\n\n");
    let dir = Layout(w.run).decouple();
    let Some(rows) = read_csv(&dir.join("summary.csv")) else {
        w.missing.push(w.rel(&dir.join("summary.csv")).display().to_string());
        out.push_str("_absent: decoupling has not been run._\n\n");
        return Ok(());
    };
    if let Ok(meta) = fs::read_to_string(dir.join("meta.txt")) {
        out.push_str(&format!("`{}`\n\n", meta.trim().replace('\n', " ")));
    }
    out.push_str("| variant | psnr | high-band energy | parseval error |\n|---|---|---|---|\n");
    for r in rows.iter().filter(|r| r.len() == 4) {
        out.push_str(&format!("| {} | {} | {} | {} |\n", r[0], r[1], r[2], r[3]));
    }
    out.push('\n');

    let mut recons = Vec::new();
    let mut spectra = vec![];
    let source = dir.join("source_spectrum.png");
    if source.exists() {
        spectra.push(load_png(&source)?);
    }
    for v in DecoupleVariant::ALL {
        let sub = dir.join(v.tag());
        if let (Ok(r), Ok(s)) = (load_png(&sub.join("recon.png")), load_png(&sub.join("spectrum.png"))) {
            recons.push(r);
            spectra.push(s);
        } else {
            w.missing.push(w.rel(&sub).display().to_string());
        }
    }
    let report = Layout(w.run).report_dir();
    if !recons.is_empty() {
        let rel = w.png(&hstack(&recons)?, &report.join("decouple_recon.png"))?;
        out.push_str(&format!("Reconstructions (high-only, low-only, full): ![]({rel})\n\n"));
        let rel = w.png(&hstack(&spectra)?, &report.join("decouple_spectra.png"))?;
        out.push_str(&format!("Spectra (source, high-only, low-only, full): ![]({rel})\n\n"));
    }
    Ok(())
}

/// Writes `report.md`, figure panels and `report/manifest.txt` from
/// whatever artifacts the run directory holds. Missing inputs are listed
/// in the report rather than treated as errors.
pub fn emit_report(run: &RunDir) -> Result<ReportOutcome> {
    let cfg = run.config()?;
    let mut w = Writer {
        run,
        files: Vec::new(),
        missing: Vec::new(),
    };
    let mut out = format!(
        "# Run report\n\npreset `{}`, seed {}, config hash `{}`\n\n",
        cfg.preset,
        cfg.seed,
        cfg.hash()?
    );
    table1_section(&mut w, &mut out);
    table2_section(&mut w, &mut out);
    panels_section(&mut w, &mut out)?;
    decouple_section(&mut w, &mut out)?;
    if !w.missing.is_empty() {
        out.push_str("## Missing inputs\n\n");
        for m in &w.missing {
            out.push_str(&format!("- {m}\n"));
        }
    }

    let report_md = run.root().join("report.md");
    write_file(&report_md, out.as_bytes())?;
    w.files.push(w.rel(&report_md));
    let manifest = Layout(run).report_dir().join("manifest.txt");
    w.files.push(w.rel(&manifest));
    w.files.sort();
    let listing: String = w.files.iter().map(|p| format!("{}\n", p.display())).collect();
    write_file(&manifest, listing.as_bytes())?;
    Ok(ReportOutcome {
        files: w.files,
        missing: w.missing,
    })
}
