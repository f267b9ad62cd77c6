//! Multi-resolution hash grid over the unit square.
//!
//! Each level `l` lays a lattice of resolution `R_l = floor(R0·s^l)` over
//! `[0,1]²` and stores one `F`-wide feature row per lattice vertex. Coarse
//! levels whose `(R_l+1)²` vertices fit into the table capacity `T` index
//! vertices directly; finer levels share `T` rows through a spatial hash.
//! A query interpolates the four surrounding vertex rows bilinearly and the
//! per-level results are concatenated from coarse to fine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, ParamMap, Tape, Tensor, Var};

pub const HASH_PRIME_X: u64 = 1;
pub const HASH_PRIME_Y: u64 = 2_654_435_761;

/// Tables start uniform in `[-INIT_RANGE, INIT_RANGE]`.
pub const INIT_RANGE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub scale: f64,
    pub table_size: usize,
    pub features: usize,
}

impl HashGridConfig {
    /// Full-size grid: 21 levels from resolution 16, growth 1.5, 2^21 rows, 2 features.
    pub fn paper_scale() -> Self {
        HashGridConfig {
            levels: 21,
            base_resolution: 16,
            scale: 1.5,
            table_size: 1 << 21,
            features: 2,
        }
    }

    pub fn desk_scale() -> Self {
        HashGridConfig {
            levels: 12,
            base_resolution: 8,
            scale: 1.5,
            table_size: 1 << 14,
            features: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("hash grid needs at least one level".into()));
        }
        if self.base_resolution == 0 {
            return Err(Error::Config("base resolution must be >= 1".into()));
        }
        if !(self.scale > 1.0) {
            return Err(Error::Config(format!("per-level scale {} must exceed 1", self.scale)));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "table size {} is not a power of two",
                self.table_size
            )));
        }
        if self.features == 0 {
            return Err(Error::Config("features per level must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the concatenated encoding, `L·F`.
    pub fn encoded_width(&self) -> usize {
        self.levels * self.features
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.scale.powi(level as i32)).floor() as usize
    }

    pub fn level_mode(&self, level: usize) -> LevelMode {
        let r = self.resolution(level) as u128 + 1;
        if r * r <= self.table_size as u128 {
            LevelMode::Direct
        } else {
            LevelMode::Hashed
        }
    }

    /// Rows actually allocated at `level`.
    pub fn level_rows(&self, level: usize) -> usize {
        match self.level_mode(level) {
            LevelMode::Direct => (self.resolution(level) + 1).pow(2),
            LevelMode::Hashed => self.table_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelMode {
    Direct,
    Hashed,
}

/// `(v0·π1 XOR v1·π2) mod T` for a power-of-two `T`.
pub fn spatial_hash(vertex: [u64; 2], table_size: usize) -> usize {
    debug_assert!(table_size.is_power_of_two());
    let h = vertex[0].wrapping_mul(HASH_PRIME_X) ^ vertex[1].wrapping_mul(HASH_PRIME_Y);
    (h & (table_size as u64 - 1)) as usize
}

/// Per-slide learnable encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGridEncoder {
    config: HashGridConfig,
    tables: ParamMap,
    resolutions: Vec<usize>,
    modes: Vec<LevelMode>,
    mask: Vec<bool>,
}

/// Parameter name of the table for `level`.
pub fn table_name(level: usize) -> String {
    format!("level_{level:02}")
}

impl HashGridEncoder {
    pub fn new(config: HashGridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tables = ParamMap::new();
        for l in 0..config.levels {
            let rows = config.level_rows(l);
            let data = (0..rows * config.features)
                .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
                .collect();
            tables.insert(table_name(l), Tensor::new(vec![rows, config.features], data)?);
        }
        Self::from_tables(config, tables)
    }

    pub fn from_tables(config: HashGridConfig, tables: ParamMap) -> Result<Self> {
        config.validate()?;
        for l in 0..config.levels {
            let t = tables
                .get(&table_name(l))
                .ok_or_else(|| Error::Config(format!("missing table for level {l}")))?;
            if t.shape() != [config.level_rows(l), config.features] {
                return Err(Error::shape("hash_grid", format!("level {l} table {:?}", t.shape())));
            }
        }
        if tables.len() != config.levels {
            return Err(Error::Config("unexpected extra hash tables".into()));
        }
        Ok(HashGridEncoder {
            resolutions: (0..config.levels).map(|l| config.resolution(l)).collect(),
            modes: (0..config.levels).map(|l| config.level_mode(l)).collect(),
            mask: vec![true; config.levels],
            config,
            tables,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn tables(&self) -> &ParamMap {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut ParamMap {
        &mut self.tables
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn modes(&self) -> &[LevelMode] {
        &self.modes
    }

    pub fn level_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn width(&self) -> usize {
        self.config.encoded_width()
    }

    /// Copy of this encoder that zeroes every level for which `keep` is false.
    /// Output width is unchanged.
    pub fn masked(&self, keep: impl Fn(usize) -> bool) -> HashGridEncoder {
        let mut view = self.clone();
        view.mask = (0..self.config.levels).map(keep).collect();
        view
    }

    /// Index of the first hashed level, or `L` when every level is direct.
    pub fn first_hashed_level(&self) -> usize {
        self.modes
            .iter()
            .position(|m| *m == LevelMode::Hashed)
            .unwrap_or(self.config.levels)
    }

    /// Table row for a lattice vertex at `level`.
    pub fn vertex_row(&self, level: usize, vertex: [u64; 2]) -> usize {
        match self.modes[level] {
            LevelMode::Direct => {
                let side = self.resolutions[level] as u64 + 1;
                (vertex[0] + side * vertex[1]) as usize
            }
            LevelMode::Hashed => spatial_hash(vertex, self.config.table_size),
        }
    }

    /// Interpolation rows and weights for every query and level.
    pub fn plan(&self, coords: &[[f64; 2]]) -> Result<EncodePlan> {
        let levels = self.config.levels;
        let mut taps = Vec::with_capacity(coords.len() * levels * 4);
        for (n, c) in coords.iter().enumerate() {
            if !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]) {
                return Err(Error::Domain(format!(
                    "query {n} at ({}, {}) outside [0,1]^2",
                    c[0], c[1]
                )));
            }
            for l in 0..levels {
                let r = self.resolutions[l];
                let mut cell = [0u64; 2];
                let mut frac = [0.0; 2];
                for d in 0..2 {
                    let p = c[d] * r as f64;
                    // coordinate 1.0 falls into the last cell with frac = 1
                    let i = (p.floor() as usize).min(r - 1);
                    cell[d] = i as u64;
                    frac[d] = p - i as f64;
                }
                for corner in 0..4u64 {
                    let (dx, dy) = (corner & 1, corner >> 1);
                    let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
                    let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
                    let row = self.vertex_row(l, [cell[0] + dx, cell[1] + dy]);
                    taps.push(Tap {
                        row: row as u32,
                        weight: wx * wy,
                    });
                }
            }
        }
        Ok(EncodePlan {
            queries: coords.len(),
            levels,
            features: self.config.features,
            mask: self.mask.clone(),
            taps,
        })
    }

    /// Encodes without recording gradients.
    pub fn encode(&self, coords: &[[f64; 2]]) -> Result<Tensor> {
        let plan = self.plan(coords)?;
        let tables: Vec<&Tensor> = (0..self.config.levels)
            .map(|l| &self.tables[&table_name(l)])
            .collect();
        plan.forward(&tables)
    }

    /// Records the encoding on `tape`. Returns the `[N, L·F]` feature var and
    /// the per-level table vars, named as in [`HashGridEncoder::tables`].
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        coords: &[[f64; 2]],
        trainable: bool,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let plan = self.plan(coords)?;
        let mut vars = Vec::with_capacity(self.config.levels);
        for l in 0..self.config.levels {
            let name = table_name(l);
            let v = tape.leaf(self.tables[&name].clone(), trainable)?;
            vars.push((name, v));
        }
        let inputs: Vec<Var> = vars.iter().map(|(_, v)| *v).collect();
        let value = {
            let tables: Vec<&Tensor> = inputs.iter().map(|v| tape.value(*v)).collect();
            plan.forward(&tables)?
        };
        let out = tape.custom(&inputs, value, Box::new(plan))?;
        Ok((out, vars))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub row: u32,
    pub weight: f64,
}

/// Precomputed gather: `4` taps per query per level, in query-major order.
#[derive(Clone, Debug)]
pub struct EncodePlan {
    queries: usize,
    levels: usize,
    features: usize,
    mask: Vec<bool>,
    taps: Vec<Tap>,
}

impl EncodePlan {
    pub fn taps(&self, query: usize, level: usize) -> &[Tap] {
        let at = (query * self.levels + level) * 4;
        &self.taps[at..at + 4]
    }

    fn forward(&self, tables: &[&Tensor]) -> Result<Tensor> {
        let (f, width) = (self.features, self.levels * self.features);
        let mut out = vec![0.0; self.queries * width];
        for n in 0..self.queries {
            for l in 0..self.levels {
                if !self.mask[l] {
                    continue;
                }
                let dst = &mut out[n * width + l * f..n * width + (l + 1) * f];
                let table = tables[l].data();
                for tap in self.taps(n, l) {
                    let row = &table[tap.row as usize * f..][..f];
                    for (o, v) in dst.iter_mut().zip(row) {
                        *o += tap.weight * v;
                    }
                }
            }
        }
        Tensor::new(vec![self.queries, width], out)
    }
}

impl CustomOp for EncodePlan {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (f, width) = (self.features, self.levels * self.features);
        let g = grad_output.data();
        (0..self.levels)
            .map(|l| {
                if !needs_grad[l] {
                    return None;
                }
                let mut grad = Tensor::zeros(inputs[l].shape());
                if !self.mask[l] {
                    return Some(grad);
                }
                let gd = grad.data_mut();
                for n in 0..self.queries {
                    let src = &g[n * width + l * f..n * width + (l + 1) * f];
                    for tap in self.taps(n, l) {
                        // coincident rows accumulate
                        let row = &mut gd[tap.row as usize * f..][..f];
                        for (o, v) in row.iter_mut().zip(src) {
                            *o += tap.weight * v;
                        }
                    }
                }
                Some(grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HashGridConfig {
        HashGridConfig {
            levels: 4,
            base_resolution: 4,
            scale: 2.0,
            table_size: 64,
            features: 2,
        }
    }

    #[test]
    fn resolutions_and_modes() {
        let cfg = HashGridConfig::desk_scale();
        let res: Vec<_> = (0..cfg.levels).map(|l| cfg.resolution(l)).collect();
        assert_eq!(res, vec![8, 12, 18, 27, 40, 60, 91, 136, 205, 307, 461, 691]);
        for l in 0..cfg.levels {
            let direct = (res[l] + 1).pow(2) <= cfg.table_size;
            assert_eq!(cfg.level_mode(l) == LevelMode::Direct, direct);
        }
        let s = small();
        // 5²=25, 9²=81 > 64
        assert_eq!(s.level_mode(0), LevelMode::Direct);
        assert_eq!(s.level_mode(1), LevelMode::Hashed);
    }

    #[test]
    fn widths() {
        assert_eq!(HashGridConfig::paper_scale().encoded_width(), 42);
        assert_eq!(HashGridConfig::desk_scale().encoded_width(), 24);
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.table_size = 100;
        assert!(c.validate().is_err());
        let mut c = small();
        c.scale = 1.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.levels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_of_origin_is_zero() {
        assert_eq!(spatial_hash([0, 0], 1 << 14), 0);
        assert_eq!(spatial_hash([17, 4], 1 << 14), spatial_hash([17, 4], 1 << 14));
    }

    #[test]
    fn out_of_domain_rejected() {
        let enc = HashGridEncoder::new(small(), 1).unwrap();
        assert!(matches!(enc.encode(&[[1.0 + 1e-12, 0.5]]), Err(Error::Domain(_))));
        assert!(matches!(enc.encode(&[[0.5, -0.1]]), Err(Error::Domain(_))));
        assert!(enc.encode(&[[1.0, 1.0], [0.0, 0.0]]).is_ok());
    }

    #[test]
    fn masked_levels_are_zero() {
        let enc = HashGridEncoder::new(small(), 3).unwrap();
        let view = enc.masked(|l| l % 2 == 0);
        let out = view.encode(&[[0.3, 0.7]]).unwrap();
        assert_eq!(&out.data()[2..4], &[0.0, 0.0]);
        assert_eq!(&out.data()[6..8], &[0.0, 0.0]);
        assert_ne!(out.data()[0], 0.0);
    }
}
