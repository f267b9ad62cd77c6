use crate::error::{Error, Result};

/// Geometry of a same-padded 2-D convolution over a channels-last map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeom {
    pub fn new(
        height: usize,
        width: usize,
        kernel: usize,
        dilation: usize,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv kernel size must be odd, got {kernel}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("conv dilation must be >= 1".into()));
        }
        Ok(ConvGeom {
            height,
            width,
            kernel,
            dilation,
            c_in,
            c_out,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Rows of the kernel matrix: `k·k·c_in`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    /// Source pixel for output `(y, x)` and tap `(ky, kx)`, if inside the map.
    #[inline]
    fn tap(&self, y: usize, x: usize, ky: usize, kx: usize) -> Option<usize> {
        let half = (self.kernel / 2) as isize;
        let d = self.dilation as isize;
        let sy = y as isize + (ky as isize - half) * d;
        let sx = x as isize + (kx as isize - half) * d;
        if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
            None
        } else {
            Some(sy as usize * self.width + sx as usize)
        }
    }
}

/// Unfolds `[H·W, C]` into `[H·W, k·k·C]`, zero-filling taps that fall off the map.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch_len();
    let c = g.c_in;
    let mut cols = vec![0.0; g.pixels() * patch];
    for y in 0..g.height {
        for x in 0..g.width {
            let row = &mut cols[(y * g.width + x) * patch..][..patch];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(src) = g.tap(y, x, ky, kx) {
                        let dst = (ky * g.kernel + kx) * c;
                        row[dst..dst + c].copy_from_slice(&input[src * c..src * c + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto pixels.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch_len();
    let c = g.c_in;
    let mut out = vec![0.0; g.pixels() * c];
    for y in 0..g.height {
        for x in 0..g.width {
            let row = &cols[(y * g.width + x) * patch..][..patch];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(dst) = g.tap(y, x, ky, kx) {
                        let src = (ky * g.kernel + kx) * c;
                        for (o, v) in out[dst * c..dst * c + c].iter_mut().zip(&row[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_kernel_is_config_error() {
        assert!(matches!(
            ConvGeom::new(4, 4, 2, 1, 1, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(5, 4, 3, 2, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.pixels() * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.pixels() * g.patch_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
