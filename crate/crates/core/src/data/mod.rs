//! Slides, masks, pyramids and the normalized coordinate domain.
//!
//! A slide of `H×W` base pixels occupies `[0,w_n]×[0,h_n]` with
//! `max(w_n,h_n) = 1`. Pixel `(r,c)` of level `k` (dimensions `H_k×W_k`)
//! has its center at `x = (c+0.5)/W_k·w_n`, `y = (r+0.5)/H_k·h_n`.

mod io;
mod synthetic;
mod window;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use io::{
    load_mask_png, load_png, load_slide, save_gray_png, save_mask_png, save_png, write_dataset, Manifest,
    ManifestLevel, ManifestSlide, Split,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use window::{Window, WindowBatch, WindowOrder, WindowSampler, MIN_WINDOW};

/// Number of pyramid levels carried by every slide.
pub const PYRAMID_LEVELS: usize = 3;

/// Pyramid level, tagged `base`, `base/2`, `base/4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Base,
    Half,
    Quarter,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Base, Level::Half, Level::Quarter];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Result<Level> {
        Level::ALL
            .get(k)
            .copied()
            .ok_or_else(|| Error::Config(format!("no pyramid level {k}")))
    }

    pub fn tag(self) -> &'static str {
        match self {
            Level::Base => "base",
            Level::Half => "base/2",
            Level::Quarter => "base/4",
        }
    }

    /// Tag with `/` replaced, for file names.
    pub fn file_tag(self) -> &'static str {
        match self {
            Level::Base => "base",
            Level::Half => "base_2",
            Level::Quarter => "base_4",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Level> {
        Level::ALL
            .into_iter()
            .find(|l| l.tag() == s || l.file_tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown level `{s}` (expected base, base/2, base/4)")))
    }
}

impl Serialize for Level {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for Level {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// RGB image with values in `[0,1]`, row-major, 3 values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Image {
            height,
            width,
            data: (0..height * width).flat_map(|_| rgb).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// `[h·w, 3]` crop.
    pub fn crop(&self, w: &Window) -> Tensor {
        let mut out = Vec::with_capacity(w.height * w.width * 3);
        for r in w.row0..w.row0 + w.height {
            let start = (r * self.width + w.col0) * 3;
            out.extend_from_slice(&self.data[start..start + w.width * 3]);
        }
        Tensor::new(vec![w.height * w.width, 3], out).unwrap()
    }

    /// Writes a `[h·w, 3]` block at the window position.
    pub fn paste(&mut self, w: &Window, block: &[f64]) {
        for (i, r) in (w.row0..w.row0 + w.height).enumerate() {
            let dst = (r * self.width + w.col0) * 3;
            let src = i * w.width * 3;
            self.data[dst..dst + w.width * 3].copy_from_slice(&block[src..src + w.width * 3]);
        }
    }

    /// Channel-mean grayscale of a square patch.
    pub fn gray_patch(&self, row0: usize, col0: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size);
        for r in row0..row0 + size {
            for c in col0..col0 + size {
                let p = self.pixel(r, c);
                out.push((p[0] + p[1] + p[2]) / 3.0);
            }
        }
        out
    }
}

/// Binary lesion mask, one byte per pixel (`0` or `1`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{height}x{width} needs {} values", height * width)));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        self.positives() as f64 / self.data.len().max(1) as f64
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.data.iter().map(|v| *v == 1).collect()
    }

    pub fn crop(&self, w: &Window) -> Vec<u8> {
        let mut out = Vec::with_capacity(w.height * w.width);
        for r in w.row0..w.row0 + w.height {
            let start = r * self.width + w.col0;
            out.extend_from_slice(&self.data[start..start + w.width]);
        }
        out
    }
}

/// Normalized extent `[0,w_n]×[0,h_n]` of a slide.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub w_n: f64,
    pub h_n: f64,
}

impl Domain {
    pub fn for_size(height: usize, width: usize) -> Domain {
        let m = height.max(width) as f64;
        Domain {
            w_n: width as f64 / m,
            h_n: height as f64 / m,
        }
    }
}

/// Level dimensions plus domain; everything needed to place coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub domain: Domain,
    /// `(H_k, W_k)` per level.
    pub dims: Vec<(usize, usize)>,
}

impl Geometry {
    pub fn for_base(height: usize, width: usize, n_levels: usize) -> Geometry {
        Geometry {
            domain: Domain::for_size(height, width),
            dims: (0..n_levels)
                .map(|k| (height.div_ceil(1 << k), width.div_ceil(1 << k)))
                .collect(),
        }
    }

    pub fn dims(&self, level: Level) -> Result<(usize, usize)> {
        self.dims
            .get(level.index())
            .copied()
            .ok_or_else(|| Error::Data(format!("pyramid has no level {level}")))
    }

    /// Pixel center of `(r, c)` at `level`.
    pub fn normalize(&self, r: usize, c: usize, level: Level) -> Result<[f64; 2]> {
        let (h, w) = self.dims(level)?;
        if r >= h || c >= w {
            return Err(Error::Domain(format!("pixel ({r},{c}) outside {h}x{w} at {level}")));
        }
        Ok([
            (c as f64 + 0.5) / w as f64 * self.domain.w_n,
            (r as f64 + 0.5) / h as f64 * self.domain.h_n,
        ])
    }

    /// Pixel of `level` containing the normalized point.
    pub fn denormalize(&self, xy: [f64; 2], level: Level) -> Result<(usize, usize)> {
        let (h, w) = self.dims(level)?;
        let [x, y] = xy;
        if !(0.0..=self.domain.w_n).contains(&x) || !(0.0..=self.domain.h_n).contains(&y) {
            return Err(Error::Domain(format!("({x},{y}) outside the slide domain")));
        }
        let c = ((x / self.domain.w_n * w as f64) as usize).min(w - 1);
        let r = ((y / self.domain.h_n * h as f64) as usize).min(h - 1);
        Ok((r, c))
    }

    /// Pixel-center coordinates of a window in row-major order.
    pub fn window_coords(&self, w: &Window) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(w.height * w.width);
        for r in w.row0..w.row0 + w.height {
            for c in w.col0..w.col0 + w.width {
                out.push(self.normalize(r, c, w.level)?);
            }
        }
        Ok(out)
    }
}

/// Image levels of one slide. This is all that inference-time optimization
/// receives.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    pub id: String,
    pub levels: Vec<Image>,
    pub geometry: Geometry,
}

impl ImagePyramid {
    pub fn level(&self, level: Level) -> Result<&Image> {
        self.levels
            .get(level.index())
            .ok_or_else(|| Error::Data(format!("slide {} has no level {level}", self.id)))
    }
}

/// Image and mask levels of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidePyramid {
    images: ImagePyramid,
    masks: Vec<Mask>,
}

impl SlidePyramid {
    pub fn new(images: ImagePyramid, masks: Vec<Mask>) -> Result<Self> {
        if masks.len() != images.levels.len() {
            return Err(Error::Data(format!("slide {}: mask/image level counts differ", images.id)));
        }
        for (k, (img, m)) in images.levels.iter().zip(&masks).enumerate() {
            let dims = images.geometry.dims[k];
            if (img.height, img.width) != dims || (m.height, m.width) != dims {
                return Err(Error::Data(format!(
                    "slide {} level {k}: expected {}x{}, image {}x{}, mask {}x{}",
                    images.id, dims.0, dims.1, img.height, img.width, m.height, m.width
                )));
            }
        }
        Ok(SlidePyramid { images, masks })
    }

    pub fn id(&self) -> &str {
        &self.images.id
    }

    pub fn images(&self) -> &ImagePyramid {
        &self.images
    }

    pub fn geometry(&self) -> &Geometry {
        &self.images.geometry
    }

    pub fn image(&self, level: Level) -> Result<&Image> {
        self.images.level(level)
    }

    pub fn mask(&self, level: Level) -> Result<&Mask> {
        self.masks
            .get(level.index())
            .ok_or_else(|| Error::Data(format!("slide {} has no mask level {level}", self.id())))
    }

    pub fn n_levels(&self) -> usize {
        self.masks.len()
    }
}

/// Repeated 2×2 area averaging; masks by majority with ties to lesion.
/// Odd trailing rows/columns average over the pixels that exist.
pub fn build_pyramid(id: &str, image: Image, mask: Mask, n_levels: usize) -> Result<SlidePyramid> {
    if n_levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let min = 1usize << (n_levels - 1);
    if image.height < min || image.width < min {
        return Err(Error::Data(format!(
            "{}x{} image is too small for {n_levels} levels",
            image.height, image.width
        )));
    }
    if (mask.height, mask.width) != (image.height, image.width) {
        return Err(Error::Data("image and mask sizes differ".into()));
    }
    let geometry = Geometry::for_base(image.height, image.width, n_levels);
    let mut images = vec![image];
    let mut masks = vec![mask];
    for _ in 1..n_levels {
        let (img, m) = (images.last().unwrap(), masks.last().unwrap());
        let (h, w) = (img.height.div_ceil(2), img.width.div_ceil(2));
        let mut data = vec![0.0; h * w * 3];
        let mut mdata = vec![0u8; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0.0; 3];
                let (mut n, mut pos) = (0usize, 0usize);
                for rr in 2 * r..(2 * r + 2).min(img.height) {
                    for cc in 2 * c..(2 * c + 2).min(img.width) {
                        let p = img.pixel(rr, cc);
                        for ch in 0..3 {
                            acc[ch] += p[ch];
                        }
                        pos += m.data[rr * m.width + cc] as usize;
                        n += 1;
                    }
                }
                for ch in 0..3 {
                    data[(r * w + c) * 3 + ch] = acc[ch] / n as f64;
                }
                mdata[r * w + c] = (2 * pos >= n) as u8;
            }
        }
        images.push(Image::new(h, w, data)?);
        masks.push(Mask::new(h, w, mdata)?);
    }
    SlidePyramid::new(
        ImagePyramid {
            id: id.to_string(),
            levels: images,
            geometry,
        },
        masks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        let data = (0..h * w)
            .flat_map(|i| {
                let (r, c) = (i / w, i % w);
                [r as f64 / h as f64, c as f64 / w as f64, ((r * 7 + c * 3) % 11) as f64 / 10.0]
            })
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn level_tags_round_trip() {
        for l in Level::ALL {
            assert_eq!(l.tag().parse::<Level>().unwrap(), l);
            assert_eq!(l.file_tag().parse::<Level>().unwrap(), l);
            assert_eq!(serde_json::from_str::<Level>(&serde_json::to_string(&l).unwrap()).unwrap(), l);
        }
        assert!("base/8".parse::<Level>().is_err());
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(10, 7, [0.25, 0.5, 0.75]);
        let p = build_pyramid("c", img, Mask::new(10, 7, vec![1; 70]).unwrap(), 3).unwrap();
        for l in Level::ALL {
            let im = p.image(l).unwrap();
            assert!(im.data().chunks(3).all(|px| px == [0.25, 0.5, 0.75]));
            assert!(p.mask(l).unwrap().data().iter().all(|v| *v == 1));
        }
        assert_eq!(p.geometry().dims, vec![(10, 7), (5, 4), (3, 2)]);
    }

    #[test]
    fn checkerboard_averages_to_half() {
        let img = Image::new(2, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = build_pyramid("k", img, Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap(), 2).unwrap();
        assert_eq!(p.image(Level::Half).unwrap().data(), [0.5, 0.5, 0.5]);
        // two of four lesion pixels: the tie goes to lesion
        assert_eq!(p.mask(Level::Half).unwrap().data(), [1]);
    }

    #[test]
    fn too_small_for_levels() {
        let img = Image::filled(3, 8, [0.0; 3]);
        let err = build_pyramid("s", img, Mask::new(3, 8, vec![0; 24]).unwrap(), 3).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn mass_is_conserved_for_even_sizes() {
        let img = gradient_image(16, 12);
        let mean = img.mean();
        let p = build_pyramid("m", img, Mask::new(16, 12, vec![0; 192]).unwrap(), 3).unwrap();
        for l in Level::ALL {
            assert!((p.image(l).unwrap().mean() - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_reference_points() {
        let g = Geometry::for_base(64, 64, 3);
        assert_eq!(g.normalize(0, 0, Level::Base).unwrap(), [0.5 / 64.0, 0.5 / 64.0]);
        for l in Level::ALL {
            let (h, w) = g.dims(l).unwrap();
            let [x, y] = g.normalize(h / 2, w / 2, l).unwrap();
            assert!((x - 0.5).abs() <= 1.0 / w as f64 && (y - 0.5).abs() <= 1.0 / h as f64);
        }
        assert!(matches!(g.normalize(64, 0, Level::Base), Err(Error::Domain(_))));
        let wide = Geometry::for_base(50, 100, 3);
        assert_eq!(wide.domain, Domain { w_n: 1.0, h_n: 0.5 });
    }

    #[test]
    fn levels_agree_on_physical_location() {
        let g = Geometry::for_base(64, 64, 3);
        for r in 0..64 {
            for c in 0..64 {
                let p = g.normalize(r, c, Level::Base).unwrap();
                let q = g.normalize(r / 2, c / 2, Level::Half).unwrap();
                let pitch = 1.0 / 32.0;
                assert!((p[0] - q[0]).abs() <= pitch && (p[1] - q[1]).abs() <= pitch);
                let q4 = g.normalize(r / 4, c / 4, Level::Quarter).unwrap();
                let pitch4 = 1.0 / 16.0;
                assert!((p[0] - q4[0]).abs() <= pitch4 && (p[1] - q4[1]).abs() <= pitch4);
            }
        }
    }

    proptest! {
        #[test]
        fn normalize_round_trips(h in 8usize..80, w in 8usize..80, fr in 0.0f64..1.0, fc in 0.0f64..1.0, k in 0usize..3) {
            let g = Geometry::for_base(h, w, 3);
            let level = Level::from_index(k).unwrap();
            let (hk, wk) = g.dims(level).unwrap();
            let (r, c) = (((hk as f64) * fr) as usize, ((wk as f64) * fc) as usize);
            let xy = g.normalize(r, c, level).unwrap();
            prop_assert!(xy[0] <= g.domain.w_n && xy[1] <= g.domain.h_n);
            prop_assert_eq!(g.denormalize(xy, level).unwrap(), (r, c));
            prop_assert!((g.domain.w_n.max(g.domain.h_n) - 1.0).abs() < 1e-15);
        }
    }
}
