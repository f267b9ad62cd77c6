use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Geometry, Image, ImagePyramid, Level, Mask, SlidePyramid, SyntheticSpec};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit RGB(A) PNG to `[0,1]` intensities. Alpha is dropped.
pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = match open(path)? {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(i) => DynamicImage::ImageRgba8(i).to_rgb8(),
        other => {
            return Err(Error::Data(format!(
                "{}: expected 8-bit RGB, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

/// 8-bit single-channel PNG, binarized at `> 127`.
pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let gray = match open(path)? {
        DynamicImage::ImageLuma8(i) => i,
        other => {
            return Err(Error::Data(format!(
                "{}: expected 8-bit grayscale mask, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|v| (v > 127) as u8).collect();
    Mask::new(h as usize, w as usize, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let raw = image.data().iter().map(|v| quantize(*v)).collect();
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, raw)
        .ok_or_else(|| Error::shape("save_png", "buffer size"))?;
    write(DynamicImage::ImageRgb8(buf), path)
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let raw = mask.data().iter().map(|v| v * 255).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .ok_or_else(|| Error::shape("save_mask_png", "buffer size"))?;
    write(DynamicImage::ImageLuma8(buf), path)
}

/// Values in `[0,1]` as 8-bit grayscale.
pub fn save_gray_png(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    let raw = values.iter().map(|v| quantize(*v)).collect();
    let buf = GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::shape("save_gray_png", "buffer size"))?;
    write(DynamicImage::ImageLuma8(buf), path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestLevel {
    pub level: Level,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSlide {
    pub id: String,
    pub split: Split,
    pub levels: Vec<ManifestLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

/// Dataset listing. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub slides: Vec<ManifestSlide>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestSlide> {
        self.slides.iter().filter(move |s| s.split == split)
    }
}

/// Reads every level of a manifest entry.
pub fn load_slide(root: &Path, entry: &ManifestSlide) -> Result<SlidePyramid> {
    let mut levels: Vec<&ManifestLevel> = entry.levels.iter().collect();
    levels.sort_by_key(|l| l.level);
    if levels.iter().enumerate().any(|(k, l)| l.level.index() != k) || levels.is_empty() {
        return Err(Error::Data(format!("slide {}: levels must be base, base/2, ... without gaps", entry.id)));
    }
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for l in &levels {
        let img = load_png(&root.join(&l.image))?;
        let mask = load_mask_png(&root.join(&l.mask))?;
        if (img.height(), img.width()) != (mask.height(), mask.width()) {
            return Err(Error::Data(format!(
                "slide {} {}: image {}x{} vs mask {}x{}",
                entry.id,
                l.level,
                img.height(),
                img.width(),
                mask.height(),
                mask.width()
            )));
        }
        images.push(img);
        masks.push(mask);
    }
    let geometry = Geometry::for_base(images[0].height(), images[0].width(), images.len());
    SlidePyramid::new(
        ImagePyramid {
            id: entry.id.clone(),
            levels: images,
            geometry,
        },
        masks,
    )
}

/// Writes every level as PNG under `root/<id>/` and returns the entry.
pub fn write_dataset(root: &Path, slide: &SlidePyramid, split: Split, spec: Option<SyntheticSpec>) -> Result<ManifestSlide> {
    let mut levels = Vec::new();
    for k in 0..slide.n_levels() {
        let level = Level::from_index(k)?;
        let image = PathBuf::from(slide.id()).join(format!("image_{}.png", level.file_tag()));
        let mask = PathBuf::from(slide.id()).join(format!("mask_{}.png", level.file_tag()));
        save_png(slide.image(level)?, &root.join(&image))?;
        save_mask_png(slide.mask(level)?, &root.join(&mask))?;
        levels.push(ManifestLevel { level, image, mask });
    }
    Ok(ManifestSlide {
        id: slide.id().to_string(),
        split,
        levels,
        synthetic: spec,
    })
}
