//! Coordinate encoders: learnable hash grid, fixed sinusoidal features, and
//! the raw-coordinate baseline.

mod hash;

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use hash::{
    spatial_hash, table_name, EncodePlan, HashGridConfig, HashGridEncoder, LevelMode, Tap,
    HASH_PRIME_X, HASH_PRIME_Y, INIT_RANGE,
};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Which coordinate encoding a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    None,
    NerfPe,
    Hash,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::None, EncoderKind::NerfPe, EncoderKind::Hash];

    pub fn tag(self) -> &'static str {
        match self {
            EncoderKind::None => "none",
            EncoderKind::NerfPe => "nerf-pe",
            EncoderKind::Hash => "hash",
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EncoderKind::None),
            "nerf-pe" => Ok(EncoderKind::NerfPe),
            "hash" => Ok(EncoderKind::Hash),
            other => Err(Error::Config(format!("unknown encoder kind {other:?}"))),
        }
    }
}

fn check_domain(coords: &[[f64; 2]]) -> Result<()> {
    match coords
        .iter()
        .position(|c| !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]))
    {
        Some(n) => Err(Error::Domain(format!("query {n} outside [0,1]^2"))),
        None => Ok(()),
    }
}

/// `sin(2^k·π·x), cos(2^k·π·x)` for each axis and `k < n_freqs`.
///
/// Layout per row: axis 0 then axis 1; within an axis, frequency-major with
/// the sine before the cosine.
pub fn nerf_encode(coords: &[[f64; 2]], n_freqs: usize) -> Result<Tensor> {
    check_domain(coords)?;
    let width = 4 * n_freqs;
    let mut out = Vec::with_capacity(coords.len() * width);
    for c in coords {
        for x in c {
            for k in 0..n_freqs {
                let arg = (1u64 << k) as f64 * std::f64::consts::PI * x;
                out.push(arg.sin());
                out.push(arg.cos());
            }
        }
    }
    Tensor::new(vec![coords.len(), width], out)
}

/// Raw coordinates as an `[N, 2]` tensor.
pub fn identity_encode(coords: &[[f64; 2]]) -> Result<Tensor> {
    check_domain(coords)?;
    Tensor::new(vec![coords.len(), 2], coords.iter().flatten().copied().collect())
}

/// A slide's coordinate encoder. Only the hash grid carries parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum CoordEncoder {
    Identity,
    Nerf { n_freqs: usize },
    Hash(HashGridEncoder),
}

impl CoordEncoder {
    pub fn kind(&self) -> EncoderKind {
        match self {
            CoordEncoder::Identity => EncoderKind::None,
            CoordEncoder::Nerf { .. } => EncoderKind::NerfPe,
            CoordEncoder::Hash(_) => EncoderKind::Hash,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            CoordEncoder::Identity => 2,
            CoordEncoder::Nerf { n_freqs } => 4 * n_freqs,
            CoordEncoder::Hash(h) => h.width(),
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, CoordEncoder::Hash(_))
    }

    pub fn as_hash(&self) -> Option<&HashGridEncoder> {
        match self {
            CoordEncoder::Hash(h) => Some(h),
            _ => None,
        }
    }

    pub fn as_hash_mut(&mut self) -> Option<&mut HashGridEncoder> {
        match self {
            CoordEncoder::Hash(h) => Some(h),
            _ => None,
        }
    }

    pub fn encode(&self, coords: &[[f64; 2]]) -> Result<Tensor> {
        match self {
            CoordEncoder::Identity => identity_encode(coords),
            CoordEncoder::Nerf { n_freqs } => nerf_encode(coords, *n_freqs),
            CoordEncoder::Hash(h) => h.encode(coords),
        }
    }

    /// Records the encoding; returns the feature var and any table vars.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        coords: &[[f64; 2]],
        trainable: bool,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        match self {
            CoordEncoder::Hash(h) => h.encode_on_tape(tape, coords, trainable),
            other => Ok((tape.constant(other.encode(coords)?)?, Vec::new())),
        }
    }
}

/// One CSV row per coordinate: `x,y` then every feature column labelled
/// `l<level>_f<feature>` (or `f<index>` for unlevelled encoders).
pub fn dump_encoding_csv(encoder: &CoordEncoder, coords: &[[f64; 2]]) -> Result<String> {
    let feats = encoder.encode(coords)?;
    let mut out = String::from("x,y");
    match encoder {
        CoordEncoder::Hash(h) => {
            for l in 0..h.config().levels {
                for f in 0..h.config().features {
                    write!(out, ",l{l}_f{f}").unwrap();
                }
            }
        }
        other => {
            for i in 0..other.width() {
                write!(out, ",f{i}").unwrap();
            }
        }
    }
    out.push('\n');
    for (c, row) in coords.iter().zip(feats.data().chunks(encoder.width().max(1))) {
        write!(out, "{},{}", c[0], c[1]).unwrap();
        for v in row {
            write!(out, ",{v:e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nerf_at_origin() {
        let t = nerf_encode(&[[0.0, 0.0]], 3).unwrap();
        for (i, v) in t.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn nerf_width_and_half() {
        assert_eq!(nerf_encode(&[[0.1, 0.2]], 10).unwrap().shape(), &[1, 40]);
        let t = nerf_encode(&[[0.5, 0.0]], 2).unwrap();
        assert!((t.data()[0] - 1.0).abs() < 1e-15);
        assert!(t.data()[1].abs() < 1e-15);
    }

    #[test]
    fn identity_passes_through() {
        let t = identity_encode(&[[0.25, 0.75]]).unwrap();
        assert_eq!(t.data(), &[0.25, 0.75]);
        assert_eq!(CoordEncoder::Identity.width(), 2);
    }

    #[test]
    fn identity_has_no_parameters_on_tape() {
        let mut tape = Tape::new();
        let (v, tables) = CoordEncoder::Identity
            .encode_on_tape(&mut tape, &[[0.1, 0.9]], true)
            .unwrap();
        assert!(tables.is_empty());
        assert!(!tape.needs_grad(v));
    }

    #[test]
    fn kind_round_trip() {
        for k in EncoderKind::ALL {
            assert_eq!(k.tag().parse::<EncoderKind>().unwrap(), k);
        }
        assert!("siren".parse::<EncoderKind>().is_err());
    }

    #[test]
    fn csv_dump_header() {
        let enc = CoordEncoder::Hash(
            HashGridEncoder::new(
                HashGridConfig {
                    levels: 2,
                    base_resolution: 2,
                    scale: 2.0,
                    table_size: 16,
                    features: 1,
                },
                0,
            )
            .unwrap(),
        );
        let csv = dump_encoding_csv(&enc, &[[0.5, 0.5]]).unwrap();
        assert!(csv.starts_with("x,y,l0_f0,l1_f0\n0.5,0.5,"));
    }
}
