use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Geometry, Image, ImagePyramid, Level};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest window side.
pub const MIN_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub level: Level,
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowOrder {
    #[default]
    Sequential,
    /// Shuffled per epoch from `(seed, epoch)`.
    Random,
}

/// Disjoint tiling of a level into windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSampler {
    pub size: usize,
    pub order: WindowOrder,
    pub seed: u64,
    /// Skip windows whose near-white pixel fraction exceeds this value.
    pub skip_white_above: Option<f64>,
}

impl WindowSampler {
    pub fn sequential(size: usize) -> Self {
        WindowSampler {
            size,
            order: WindowOrder::Sequential,
            seed: 0,
            skip_white_above: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_WINDOW {
            return Err(Error::Config(format!("window size must be >= {MIN_WINDOW}")));
        }
        Ok(())
    }

    /// Row-major tiling of `dims`. A remainder narrower than
    /// [`MIN_WINDOW`] is merged into the preceding window.
    pub fn tile(&self, level: Level, dims: (usize, usize)) -> Result<Vec<Window>> {
        self.validate()?;
        if dims.0 < MIN_WINDOW || dims.1 < MIN_WINDOW {
            return Err(Error::Data(format!(
                "level {level} is {}x{}, smaller than the minimum window",
                dims.0, dims.1
            )));
        }
        let spans = |n: usize| {
            let mut out: Vec<(usize, usize)> = Vec::new();
            let mut start = 0;
            while start < n {
                let len = self.size.min(n - start);
                match out.last_mut() {
                    Some(last) if len < MIN_WINDOW => last.1 += len,
                    _ => out.push((start, len)),
                }
                start += len;
            }
            out
        };
        let mut out = Vec::new();
        for (row0, height) in spans(dims.0) {
            for &(col0, width) in &spans(dims.1) {
                out.push(Window {
                    level,
                    row0,
                    col0,
                    height,
                    width,
                });
            }
        }
        Ok(out)
    }

    /// Windows for one epoch, in traversal order.
    pub fn windows(&self, image: &Image, level: Level, epoch: usize) -> Result<Vec<Window>> {
        let mut ws = self.tile(level, (image.height(), image.width()))?;
        if let Some(limit) = self.skip_white_above {
            ws.retain(|w| white_fraction(image, w) <= limit);
        }
        if self.order == WindowOrder::Random {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            ws.shuffle(&mut rng);
        }
        Ok(ws)
    }
}

fn white_fraction(image: &Image, w: &Window) -> f64 {
    let crop = image.crop(w);
    let white = crop.data().chunks(3).filter(|p| p.iter().all(|v| *v > 0.9)).count();
    white as f64 / w.pixels() as f64
}

/// Coordinates and target pixels of one window; carries no mask.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub window: Window,
    pub coords: Vec<[f64; 2]>,
    pub image: Tensor,
}

impl WindowBatch {
    pub fn new(geometry: &Geometry, image: &Image, window: Window) -> Result<Self> {
        Ok(WindowBatch {
            coords: geometry.window_coords(&window)?,
            image: image.crop(&window),
            window,
        })
    }

    pub fn from_pyramid(p: &ImagePyramid, window: Window) -> Result<Self> {
        WindowBatch::new(&p.geometry, p.level(window.level)?, window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_pyramid, Mask};

    #[test]
    fn sequential_tiling_of_128_by_64() {
        let s = WindowSampler::sequential(64);
        let ws = s.tile(Level::Base, (128, 128)).unwrap();
        assert_eq!(ws.len(), 4);
        assert_eq!((ws[1].row0, ws[1].col0), (0, 64));
        assert!(ws.iter().all(|w| w.hw() == (64, 64)));
    }

    #[test]
    fn small_remainders_merge() {
        let s = WindowSampler::sequential(32);
        let ws = s.tile(Level::Base, (70, 38)).unwrap();
        let rows: Vec<(usize, usize)> = ws.iter().filter(|w| w.col0 == 0).map(|w| (w.row0, w.height)).collect();
        assert_eq!(rows, vec![(0, 32), (32, 38)]);
        assert!(ws.iter().all(|w| w.width == 38));
        assert_eq!(s.tile(Level::Base, (40, 40)).unwrap().len(), 4);
        let smaller = s.tile(Level::Base, (20, 20)).unwrap();
        assert_eq!(smaller.len(), 1);
        assert!(s.tile(Level::Base, (6, 20)).is_err());
    }

    #[test]
    fn random_order_is_seeded() {
        let img = Image::filled(64, 64, [0.5; 3]);
        let s = WindowSampler {
            size: 16,
            order: WindowOrder::Random,
            seed: 3,
            skip_white_above: None,
        };
        let a = s.windows(&img, Level::Base, 1).unwrap();
        assert_eq!(a, s.windows(&img, Level::Base, 1).unwrap());
        assert_ne!(a, s.windows(&img, Level::Base, 2).unwrap());
        let mut sorted = a.clone();
        sorted.sort_by_key(|w| (w.row0, w.col0));
        assert_eq!(sorted, s.tile(Level::Base, (64, 64)).unwrap());
    }

    #[test]
    fn white_windows_can_be_skipped() {
        let mut img = Image::filled(32, 32, [1.0; 3]);
        let w = Window {
            level: Level::Base,
            row0: 0,
            col0: 0,
            height: 16,
            width: 16,
        };
        img.paste(&w, &vec![0.3; 16 * 16 * 3]);
        let s = WindowSampler {
            skip_white_above: Some(0.99),
            ..WindowSampler::sequential(16)
        };
        assert_eq!(s.windows(&img, Level::Base, 0).unwrap(), vec![w]);
    }

    #[test]
    fn every_lesion_pixel_is_covered() {
        let (h, w) = (45, 37);
        let mask: Vec<u8> = (0..h * w).map(|i| (i % 3 == 0) as u8).collect();
        let p = build_pyramid("c", Image::filled(h, w, [0.5; 3]), Mask::new(h, w, mask).unwrap(), 3).unwrap();
        let s = WindowSampler {
            size: 16,
            order: WindowOrder::Random,
            seed: 9,
            skip_white_above: None,
        };
        for level in Level::ALL {
            let m = p.mask(level).unwrap();
            let mut count = vec![0u32; m.height() * m.width()];
            for win in s.windows(p.image(level).unwrap(), level, 4).unwrap() {
                for r in win.row0..win.row0 + win.height {
                    for c in win.col0..win.col0 + win.width {
                        count[r * m.width() + c] += 1;
                    }
                }
            }
            for (i, v) in m.data().iter().enumerate() {
                if *v == 1 {
                    assert_eq!(count[i], 1);
                }
            }
        }
    }

    #[test]
    fn batch_coords_are_row_major_centers() {
        let p = build_pyramid("b", Image::filled(16, 16, [0.1; 3]), Mask::new(16, 16, vec![0; 256]).unwrap(), 1)
            .unwrap();
        let w = WindowSampler::sequential(8).tile(Level::Base, (16, 16)).unwrap()[1];
        let b = WindowBatch::from_pyramid(p.images(), w).unwrap();
        assert_eq!(b.coords[0], [8.5 / 16.0, 0.5 / 16.0]);
        assert_eq!(b.coords[1], [9.5 / 16.0, 0.5 / 16.0]);
        assert_eq!(b.coords[8], [8.5 / 16.0, 1.5 / 16.0]);
        assert_eq!(b.image.shape(), [64, 3]);
    }
}
