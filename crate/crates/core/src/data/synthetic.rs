use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_pyramid, Image, Mask, SlidePyramid, PYRAMID_LEVELS};
use crate::error::{Error, Result};

/// Recipe for one pseudo-slide: pink textured tissue with purple,
/// finer-textured lesion blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of blob counts.
    pub blob_count: (usize, usize),
    /// Blob radius as a fraction of the shorter side.
    pub blob_radius: (f64, f64),
    /// Lattice cells per side for each background noise octave.
    pub background_cells: Vec<usize>,
    pub lesion_cells: Vec<usize>,
    pub background_palette: [[f64; 3]; 2],
    pub lesion_palette: [[f64; 3]; 2],
    /// Amplitude of per-pixel uniform noise.
    pub noise_amplitude: f64,
    pub lesion_fraction: (f64, f64),
    pub max_retries: usize,
}

impl SyntheticSpec {
    pub fn desk(seed: u64) -> Self {
        SyntheticSpec {
            seed,
            height: 128,
            width: 128,
            blob_count: (1, 3),
            blob_radius: (0.08, 0.2),
            background_cells: vec![4, 8, 16],
            lesion_cells: vec![12, 24, 48],
            background_palette: [[0.96, 0.82, 0.89], [0.80, 0.50, 0.66]],
            lesion_palette: [[0.58, 0.38, 0.72], [0.30, 0.14, 0.48]],
            noise_amplitude: 0.02,
            lesion_fraction: (0.05, 0.4),
            max_retries: 64,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 128 || self.width < 128 {
            return Err(Error::Config(format!(
                "synthetic canvas must be at least 128x128, got {}x{}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.lesion_fraction;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Config("lesion_fraction must satisfy 0 <= min <= max <= 1".into()));
        }
        if self.blob_count.0 > self.blob_count.1 || self.blob_radius.0 <= 0.0 || self.blob_radius.0 > self.blob_radius.1 {
            return Err(Error::Config("invalid blob_count or blob_radius range".into()));
        }
        if self.background_cells.contains(&0) || self.lesion_cells.contains(&0) {
            return Err(Error::Config("noise cell counts must be >= 1".into()));
        }
        Ok(())
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in `[0,1]`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let v = (r as f64 + 0.5) / h as f64 * cells as f64;
        let (i, fy) = ((v as usize).min(cells - 1), smoothstep(v - (v as usize).min(cells - 1) as f64));
        for c in 0..w {
            let u = (c as f64 + 0.5) / w as f64 * cells as f64;
            let (j, fx) = ((u as usize).min(cells - 1), smoothstep(u - (u as usize).min(cells - 1) as f64));
            let at = |a: usize, b: usize| lattice[a * n + b];
            let top = at(i, j) * (1.0 - fx) + at(i, j + 1) * fx;
            let bottom = at(i + 1, j) * (1.0 - fx) + at(i + 1, j + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Octave sum with amplitudes `2^-o`, normalized to `[0,1]`.
fn fractal_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut total = 0.0;
    for (o, &c) in cells.iter().enumerate() {
        let amp = 0.5f64.powi(o as i32);
        total += amp;
        for (acc, v) in out.iter_mut().zip(value_noise(rng, h, w, c)) {
            *acc += amp * v;
        }
    }
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn blob_mask(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let side = h.min(w) as f64;
    let count = rng.gen_range(spec.blob_count.0..=spec.blob_count.1);
    let mut field = vec![0.0; h * w];
    for _ in 0..count {
        let cy = rng.gen_range(0.1..0.9) * h as f64;
        let cx = rng.gen_range(0.1..0.9) * w as f64;
        let radius = rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1) * side;
        let (ry, rx) = (radius * rng.gen_range(0.7..1.3), radius * rng.gen_range(0.7..1.3));
        for r in 0..h {
            let dy = (r as f64 + 0.5 - cy) / ry;
            for c in 0..w {
                let dx = (c as f64 + 0.5 - cx) / rx;
                // bump = 0.5 on the ellipse of the sampled radii
                field[r * w + c] += (-(dx * dx + dy * dy) * std::f64::consts::LN_2).exp();
            }
        }
    }
    let wobble = fractal_noise(rng, h, w, &[6, 12]);
    if count == 0 {
        return vec![0; h * w];
    }
    field
        .iter()
        .zip(wobble)
        .map(|(f, n)| (f + 0.35 * (n - 0.5) > 0.5) as u8)
        .collect()
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Pseudo-slide pyramid from a spec. Bitwise reproducible per spec.
pub fn generate_synthetic(id: &str, spec: &SyntheticSpec) -> Result<SlidePyramid> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let no_blobs = spec.blob_count.1 == 0;
    let mut mask = None;
    for _ in 0..spec.max_retries.max(1) {
        let m = blob_mask(&mut rng, spec);
        let frac = m.iter().filter(|v| **v == 1).count() as f64 / (h * w) as f64;
        if no_blobs || (spec.lesion_fraction.0..=spec.lesion_fraction.1).contains(&frac) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::Data(format!(
            "seed {}: no lesion layout within fraction bounds {:?} after {} attempts",
            spec.seed, spec.lesion_fraction, spec.max_retries
        ))
    })?;

    let tissue = fractal_noise(&mut rng, h, w, &spec.background_cells);
    let lesion = fractal_noise(&mut rng, h, w, &spec.lesion_cells);
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let rgb = if mask[i] == 1 {
            lerp(spec.lesion_palette[0], spec.lesion_palette[1], lesion[i])
        } else {
            lerp(spec.background_palette[0], spec.background_palette[1], tissue[i])
        };
        for v in rgb {
            let jitter = spec.noise_amplitude * rng.gen_range(-1.0..1.0);
            data.push((v + jitter).clamp(0.0, 1.0));
        }
    }
    build_pyramid(id, Image::new(h, w, data)?, Mask::new(h, w, mask)?, PYRAMID_LEVELS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Level;

    #[test]
    fn same_seed_same_slide() {
        let a = generate_synthetic("a", &SyntheticSpec::desk(7)).unwrap();
        let b = generate_synthetic("a", &SyntheticSpec::desk(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic("a", &SyntheticSpec::desk(8)).unwrap();
        assert_ne!(a.image(Level::Base).unwrap(), c.image(Level::Base).unwrap());
    }

    #[test]
    fn lesion_fraction_within_bounds_over_100_seeds() {
        for seed in 0..100 {
            let p = generate_synthetic("s", &SyntheticSpec::desk(seed)).unwrap();
            let f = p.mask(Level::Base).unwrap().fraction();
            assert!((0.05..=0.4).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn zero_blobs_empty_mask() {
        let spec = SyntheticSpec {
            blob_count: (0, 0),
            ..SyntheticSpec::desk(1)
        };
        let p = generate_synthetic("e", &spec).unwrap();
        for l in Level::ALL {
            assert_eq!(p.mask(l).unwrap().positives(), 0);
        }
    }

    #[test]
    fn impossible_bounds_error() {
        let spec = SyntheticSpec {
            lesion_fraction: (0.95, 1.0),
            max_retries: 3,
            ..SyntheticSpec::desk(1)
        };
        assert!(matches!(generate_synthetic("x", &spec), Err(Error::Data(_))));
        let small = SyntheticSpec {
            height: 64,
            ..SyntheticSpec::desk(1)
        };
        assert!(matches!(generate_synthetic("x", &small), Err(Error::Config(_))));
    }

    #[test]
    fn lesions_are_purple() {
        let p = generate_synthetic("p", &SyntheticSpec::desk(3)).unwrap();
        let (img, m) = (p.image(Level::Base).unwrap(), p.mask(Level::Base).unwrap());
        let mean_green = |want: u8| {
            let px: Vec<f64> = (0..m.data().len())
                .filter(|i| m.data()[*i] == want)
                .map(|i| img.data()[i * 3 + 1])
                .collect();
            px.iter().sum::<f64>() / px.len() as f64
        };
        assert!(mean_green(1) + 0.2 < mean_green(0));
    }
}
