use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::Image;
use crate::error::{Error, Result};

/// Frequency content of one square grayscale patch.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub origin: (usize, usize),
    pub size: usize,
    /// `log(1 + |F|)`, DC shifted to `(size/2, size/2)`, row-major.
    pub log_magnitude: Vec<f64>,
    /// Energy `|F|²/P²` summed per integer radius band around DC.
    pub radial: Vec<f64>,
    /// `Σ|F|²/P²`.
    pub spectral_energy: f64,
    /// `Σ|patch|²`.
    pub patch_energy: f64,
}

impl SpectrumReport {
    /// Relative mismatch between spectral and spatial energy.
    pub fn parseval_error(&self) -> f64 {
        let scale = self.patch_energy.abs().max(f64::MIN_POSITIVE);
        (self.spectral_energy - self.patch_energy).abs() / scale
    }

    /// Energy in bands at radius `>= size/4`, half the Nyquist radius.
    pub fn high_band_energy(&self) -> f64 {
        self.radial.iter().skip(self.size / 4).sum()
    }
}

/// 2D FFT of a `size`×`size` row-major patch.
pub fn fft2_magnitude(patch: &[f64], size: usize, origin: (usize, usize)) -> Result<SpectrumReport> {
    if size == 0 || !size.is_power_of_two() {
        return Err(Error::Config(format!("spectrum patch side {size} is not a power of two")));
    }
    if patch.len() != size * size {
        return Err(Error::shape("fft2_magnitude", format!("{} values for a {size}x{size} patch", patch.len())));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(size);
    let mut buf: Vec<Complex<f64>> = patch.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(size) {
        fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); size];
    for c in 0..size {
        for r in 0..size {
            column[r] = buf[r * size + c];
        }
        fft.process(&mut column);
        for r in 0..size {
            buf[r * size + c] = column[r];
        }
    }

    let n = (size * size) as f64;
    let half = size / 2;
    let max_band = ((2.0 * (half * half) as f64).sqrt()).floor() as usize;
    let mut radial = vec![0.0; max_band + 1];
    let mut log_magnitude = vec![0.0; size * size];
    let mut spectral_energy = 0.0;
    for r in 0..size {
        for c in 0..size {
            let f = buf[r * size + c];
            let (sr, sc) = ((r + half) % size, (c + half) % size);
            log_magnitude[sr * size + sc] = f.norm().ln_1p();
            let e = f.norm_sqr() / n;
            spectral_energy += e;
            let (dy, dx) = (sr as f64 - half as f64, sc as f64 - half as f64);
            radial[(dy * dy + dx * dx).sqrt().floor() as usize] += e;
        }
    }
    Ok(SpectrumReport {
        origin,
        size,
        log_magnitude,
        radial,
        spectral_energy,
        patch_energy: patch.iter().map(|v| v * v).sum(),
    })
}

/// Spectrum of the centered `size`×`size` grayscale patch of `image`.
pub fn image_spectrum(image: &Image, size: usize) -> Result<SpectrumReport> {
    let (h, w) = (image.height(), image.width());
    if size > h || size > w {
        return Err(Error::Config(format!("spectrum patch {size} exceeds the {h}x{w} image")));
    }
    let origin = ((h - size) / 2, (w - size) / 2);
    fft2_magnitude(&image.gray_patch(origin.0, origin.1, size), size, origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn constant_patch_is_pure_dc() {
        let s = fft2_magnitude(&vec![0.7; 64], 8, (0, 0)).unwrap();
        assert!((s.radial[0] - s.patch_energy).abs() < 1e-12);
        assert!(s.radial[1..].iter().all(|&e| e < 1e-20));
        let peak = s.log_magnitude[4 * 8 + 4];
        assert!((peak - (0.7 * 64.0f64).ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn horizontal_sinusoid_gives_two_symmetric_peaks() {
        let p = 16;
        let k = 3.0;
        let patch: Vec<f64> = (0..p * p)
            .map(|i| (2.0 * PI * k * (i % p) as f64 / p as f64).cos())
            .collect();
        let s = fft2_magnitude(&patch, p, (0, 0)).unwrap();
        let mut order: Vec<usize> = (0..p * p).collect();
        order.sort_by(|a, b| s.log_magnitude[*b].total_cmp(&s.log_magnitude[*a]));
        let mut peaks = vec![order[0], order[1]];
        peaks.sort();
        assert_eq!(peaks, vec![8 * p + 5, 8 * p + 11]);
        assert!(s.log_magnitude[order[2]] < 1e-9);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(fft2_magnitude(&[0.0; 36], 6, (0, 0)), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn parseval_holds(values in proptest::collection::vec(-1.0f64..1.0, 256)) {
            let s = fft2_magnitude(&values, 16, (0, 0)).unwrap();
            prop_assume!(s.patch_energy > 1e-9);
            prop_assert!(s.parseval_error() < 1e-6);
            let banded: f64 = s.radial.iter().sum();
            prop_assert!((banded - s.spectral_energy).abs() <= 1e-9 * s.spectral_energy);
        }
    }
}
