//! Shared dual-branch decoder and the reconstruction/segmentation heads.
//!
//! All maps are channels-last `[H·W, C]` tensors for one window. Parameters
//! live in a single [`ParamMap`] under group-prefixed names:
//!
//! | group      | names                                   |
//! |------------|-----------------------------------------|
//! | `decoder`  | `decoder/conv{i}/{w,b}`, `decoder/point{i}/{w,b}`, `decoder/fuse/{w,b}` |
//! | `rec_head` | `rec_head/{in,block{i},out}/{w,b}`      |
//! | `seg_head` | `seg_head/{in,block{i},out}/{w,b}`      |
//!
//! Slide encoders are kept outside the model and use `encoder/{slide}/…`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ConvGeom, ParamMap, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_layers: usize,
    pub conv_width: usize,
    pub conv_kernel: usize,
    pub point_layers: usize,
    pub point_width: usize,
    /// Fused feature width `d_h`.
    pub hidden: usize,
    pub head_width: usize,
    /// One residual block per entry; must be strictly increasing.
    pub dilations: Vec<usize>,
    /// Zero the final 1×1 layer of both heads.
    pub zero_init_output: bool,
}

impl ModelConfig {
    /// Widths sized for full-resolution runs.
    pub fn paper_scale() -> Self {
        ModelConfig {
            conv_layers: 3,
            conv_width: 64,
            conv_kernel: 3,
            point_layers: 3,
            point_width: 64,
            hidden: 128,
            head_width: 64,
            dilations: vec![1, 2, 4],
            zero_init_output: false,
        }
    }

    /// Narrow widths for single-core CPU runs.
    pub fn desk_scale() -> Self {
        ModelConfig {
            conv_width: 16,
            point_width: 16,
            hidden: 32,
            head_width: 16,
            ..ModelConfig::paper_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.conv_layers,
            self.conv_width,
            self.point_layers,
            self.point_width,
            self.hidden,
            self.head_width,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("model layer counts and widths must be >= 1".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("model.conv_kernel must be odd".into()));
        }
        if self.dilations.is_empty() || self.dilations[0] == 0 {
            return Err(Error::Config("model.dilations must be nonempty and >= 1".into()));
        }
        if self.dilations.windows(2).any(|d| d[0] >= d[1]) {
            return Err(Error::Config(format!(
                "model.dilations must be strictly increasing, got {:?}",
                self.dilations
            )));
        }
        Ok(())
    }
}

/// Freezable parameter partition.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Encoder(String),
    Decoder,
    RecHead,
    SegHead,
}

impl ParamGroup {
    pub const GLOBAL: [ParamGroup; 3] = [ParamGroup::Decoder, ParamGroup::RecHead, ParamGroup::SegHead];

    pub fn prefix(&self) -> String {
        match self {
            ParamGroup::Encoder(slide) => format!("encoder/{slide}/"),
            ParamGroup::Decoder => "decoder/".into(),
            ParamGroup::RecHead => "rec_head/".into(),
            ParamGroup::SegHead => "seg_head/".into(),
        }
    }

    /// Group owning a parameter name.
    pub fn of(name: &str) -> Result<ParamGroup> {
        let mut parts = name.split('/');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("encoder"), Some(slide), Some(_)) if !slide.is_empty() => {
                Ok(ParamGroup::Encoder(slide.to_string()))
            }
            (Some("decoder"), Some(_), _) => Ok(ParamGroup::Decoder),
            (Some("rec_head"), Some(_), _) => Ok(ParamGroup::RecHead),
            (Some("seg_head"), Some(_), _) => Ok(ParamGroup::SegHead),
            _ => Err(Error::Invariant(format!("parameter {name} belongs to no group"))),
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Encoder(slide) => write!(f, "encoder/{slide}"),
            ParamGroup::Decoder => f.write_str("decoder"),
            ParamGroup::RecHead => f.write_str("rec_head"),
            ParamGroup::SegHead => f.write_str("seg_head"),
        }
    }
}

/// Buckets every name into its group; errors on any unowned name.
pub fn census<'a>(names: impl IntoIterator<Item = &'a String>) -> Result<BTreeMap<ParamGroup, Vec<String>>> {
    let mut out: BTreeMap<ParamGroup, Vec<String>> = BTreeMap::new();
    for name in names {
        out.entry(ParamGroup::of(name)?).or_default().push(name.clone());
    }
    Ok(out)
}

/// Tape variables for bound parameters, by name.
#[derive(Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new() -> Self {
        Bound::default()
    }

    pub fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invariant(format!("parameter {name} is not bound on the tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of all bound trainable vars, keyed by parameter name.
    pub fn gradients(&self, grads: &mut crate::numerics::Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    input_width: usize,
    params: ParamMap,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

impl Model {
    /// Fresh parameters for a decoder reading `input_width` encoded channels.
    pub fn new(config: ModelConfig, input_width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_width == 0 {
            return Err(Error::Config("encoded width must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        let k2 = config.conv_kernel * config.conv_kernel;
        let mut dense = |params: &mut ParamMap, name: String, fan_in: usize, rows: usize, cols: usize, zero: bool| {
            let w = if zero {
                Tensor::zeros(&[rows, cols])
            } else {
                kaiming_uniform(&mut rng, fan_in, &[rows, cols])
            };
            params.insert(format!("{name}/w"), w);
            params.insert(format!("{name}/b"), Tensor::zeros(&[cols]));
        };

        let mut c = input_width;
        for i in 0..config.conv_layers {
            dense(&mut params, format!("decoder/conv{i}"), k2 * c, k2 * c, config.conv_width, false);
            c = config.conv_width;
        }
        let mut c = input_width;
        for i in 0..config.point_layers {
            dense(&mut params, format!("decoder/point{i}"), c, c, config.point_width, false);
            c = config.point_width;
        }
        let fused = config.conv_width + config.point_width;
        dense(&mut params, "decoder/fuse".into(), fused, fused, config.hidden, false);

        for (head, out) in [("rec_head", 3), ("seg_head", 2)] {
            let hw = config.head_width;
            dense(&mut params, format!("{head}/in"), config.hidden, config.hidden, hw, false);
            for i in 0..config.dilations.len() {
                dense(&mut params, format!("{head}/block{i}"), k2 * hw, k2 * hw, hw, false);
            }
            dense(&mut params, format!("{head}/out"), hw, hw, out, config.zero_init_output);
        }
        Ok(Model {
            config,
            input_width,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, input_width: usize, params: ParamMap) -> Result<Self> {
        let fresh = Model::new(config, input_width, 0)?;
        let expected: BTreeSet<&String> = fresh.params.keys().collect();
        let got: BTreeSet<&String> = params.keys().collect();
        if expected != got {
            return Err(Error::Checkpoint("model parameter names do not match the config".into()));
        }
        for (name, t) in &params {
            if t.shape() != fresh.params[name].shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, config expects {:?}",
                    t.shape(),
                    fresh.params[name].shape()
                )));
            }
        }
        Ok(Model {
            config: fresh.config,
            input_width,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters of one group.
    pub fn group(&self, group: &ParamGroup) -> ParamMap {
        let prefix = group.prefix();
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// Records one group's parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, group: &ParamGroup, trainable: bool, bound: &mut Bound) -> Result<()> {
        let prefix = group.prefix();
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with(&prefix)) {
            bound.insert(name.clone(), tape.leaf(t.clone(), trainable)?);
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape, b: &Bound, name: &str, x: Var, hw: (usize, usize), dilation: usize) -> Result<Var> {
        let w = b.get(&format!("{name}/w"))?;
        let bias = b.get(&format!("{name}/b"))?;
        let k = self.config.conv_kernel;
        let c_out = tape.value(w).cols();
        let c_in = tape.value(w).rows() / (k * k);
        let geom = ConvGeom::new(hw.0, hw.1, k, dilation, c_in, c_out)?;
        tape.conv2d(x, w, bias, geom)
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.get(&format!("{name}/w"))?)?;
        tape.add_bias(y, b.get(&format!("{name}/b"))?)
    }

    /// Per-pixel MLP branch (1×1 layers, ReLU after each).
    pub fn point_branch(&self, tape: &mut Tape, b: &Bound, encoded: Var) -> Result<Var> {
        let mut x = encoded;
        for i in 0..self.config.point_layers {
            let y = self.linear(tape, b, &format!("decoder/point{i}"), x)?;
            x = tape.relu(y)?;
        }
        Ok(x)
    }

    /// Encoded `[H·W, d_z]` map to fused `[H·W, d_h]` features.
    pub fn decode(&self, tape: &mut Tape, b: &Bound, encoded: Var, hw: (usize, usize)) -> Result<Var> {
        let shape = tape.value(encoded).shape().to_vec();
        if shape != [hw.0 * hw.1, self.input_width] {
            return Err(Error::Config(format!(
                "decoder expects [{}, {}] encoded features, got {shape:?}",
                hw.0 * hw.1,
                self.input_width
            )));
        }
        let mut local = encoded;
        for i in 0..self.config.conv_layers {
            let y = self.conv(tape, b, &format!("decoder/conv{i}"), local, hw, 1)?;
            local = tape.relu(y)?;
        }
        let point = self.point_branch(tape, b, encoded)?;
        let cat = tape.concat(&[local, point], 1)?;
        let fused = self.linear(tape, b, "decoder/fuse", cat)?;
        tape.relu(fused)
    }

    /// Input projection, `h ← h + conv_d(relu(h))` per dilation, then
    /// `relu` and the 1×1 output layer. Returns logits.
    fn head_logits(&self, tape: &mut Tape, b: &Bound, head: &str, feats: Var, hw: (usize, usize)) -> Result<Var> {
        let mut h = self.linear(tape, b, &format!("{head}/in"), feats)?;
        for (i, &d) in self.config.dilations.iter().enumerate() {
            let a = tape.relu(h)?;
            let r = self.conv(tape, b, &format!("{head}/block{i}"), a, hw, d)?;
            h = tape.add(h, r)?;
        }
        let a = tape.relu(h)?;
        self.linear(tape, b, &format!("{head}/out"), a)
    }

    /// RGB in `(0,1)`, `[H·W, 3]`.
    pub fn rec_head(&self, tape: &mut Tape, b: &Bound, feats: Var, hw: (usize, usize)) -> Result<Var> {
        let logits = self.head_logits(tape, b, "rec_head", feats, hw)?;
        tape.sigmoid(logits)
    }

    /// `[background, lesion]` probabilities, `[H·W, 2]`.
    pub fn seg_head(&self, tape: &mut Tape, b: &Bound, feats: Var, hw: (usize, usize)) -> Result<Var> {
        let logits = self.head_logits(tape, b, "seg_head", feats, hw)?;
        tape.softmax(logits)
    }

    /// Gradient-free decode of an encoded window.
    pub fn decode_value(&self, encoded: Tensor, hw: (usize, usize)) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Bound::new();
        self.bind(&mut tape, &ParamGroup::Decoder, false, &mut b)?;
        let x = tape.constant(encoded)?;
        let f = self.decode(&mut tape, &b, x, hw)?;
        Ok(tape.value(f).clone())
    }

    /// Gradient-free heads on decoded features: `(rgb, probs)`.
    pub fn heads_value(&self, feats: Tensor, hw: (usize, usize)) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut b = Bound::new();
        self.bind(&mut tape, &ParamGroup::RecHead, false, &mut b)?;
        self.bind(&mut tape, &ParamGroup::SegHead, false, &mut b)?;
        let f = tape.constant(feats)?;
        let rgb = self.rec_head(&mut tape, &b, f, hw)?;
        let seg = self.seg_head(&mut tape, &b, f, hw)?;
        Ok((tape.value(rgb).clone(), tape.value(seg).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradCheckConfig, Probe};

    fn tiny() -> ModelConfig {
        ModelConfig {
            conv_layers: 2,
            conv_width: 4,
            conv_kernel: 3,
            point_layers: 2,
            point_width: 3,
            hidden: 5,
            head_width: 4,
            dilations: vec![1, 2, 4],
            zero_init_output: false,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk_scale().validate().is_ok());
        assert!(ModelConfig::paper_scale().validate().is_ok());
        let mut c = tiny();
        c.dilations = vec![1, 2, 2];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.dilations = vec![];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.conv_kernel = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn census_partitions_every_parameter() {
        let m = Model::new(tiny(), 6, 1).unwrap();
        let mut names: Vec<String> = m.params().keys().cloned().collect();
        names.push("encoder/s1/level_00".into());
        names.push("encoder/s2/level_00".into());
        let groups = census(&names).unwrap();
        assert_eq!(groups.len(), 5);
        let total: usize = groups.values().map(Vec::len).sum();
        assert_eq!(total, names.len());
        for g in ParamGroup::GLOBAL {
            assert!(!m.group(&g).is_empty(), "{g}");
        }
        assert!(census(&["stray".to_string()]).is_err());
        assert!(ParamGroup::of("encoder//x").is_err());
    }

    #[test]
    fn zero_input_zero_output() {
        let m = Model::new(tiny(), 6, 2).unwrap();
        let out = m.decode_value(Tensor::zeros(&[64, 6]), (8, 8)).unwrap();
        assert_eq!(out.shape(), [64, 5]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wrong_encoded_width_is_config_error() {
        let m = Model::new(tiny(), 6, 2).unwrap();
        let err = m.decode_value(Tensor::zeros(&[64, 4]), (8, 8)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn point_branch_commutes_with_pixel_permutation() {
        let m = Model::new(tiny(), 6, 3).unwrap();
        let x = random(&[10, 6], 4);
        let perm: Vec<usize> = vec![3, 7, 0, 9, 1, 2, 8, 5, 4, 6];
        let permuted = Tensor::new(
            vec![10, 6],
            perm.iter().flat_map(|&p| x.data()[p * 6..(p + 1) * 6].to_vec()).collect(),
        )
        .unwrap();
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let mut b = Bound::new();
            m.bind(&mut tape, &ParamGroup::Decoder, false, &mut b).unwrap();
            let v = tape.constant(input).unwrap();
            let y = m.point_branch(&mut tape, &b, v).unwrap();
            tape.value(y).clone()
        };
        let (a, p) = (run(x), run(permuted));
        let w = a.cols();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(&p.data()[i * w..(i + 1) * w], &a.data()[src * w..(src + 1) * w]);
        }
    }

    #[test]
    fn shifted_windows_agree_in_the_interior() {
        let m = Model::new(tiny(), 3, 5).unwrap();
        let (rows, cols) = (16, 12);
        let full = random(&[rows * cols, 3], 6);
        let crop = |r0: usize, h: usize| {
            Tensor::new(vec![h * cols, 3], full.data()[r0 * cols * 3..(r0 + h) * cols * 3].to_vec()).unwrap()
        };
        let h = 14;
        let a = m.decode_value(crop(0, h), (h, cols)).unwrap();
        let b = m.decode_value(crop(1, h), (h, cols)).unwrap();
        let radius = tiny().conv_layers;
        let d = a.cols();
        // row r of window b is row r+1 of window a
        for r in radius..h - 1 - radius {
            for c in radius..cols - radius {
                for k in 0..d {
                    let va = a.data()[((r + 1) * cols + c) * d + k];
                    let vb = b.data()[(r * cols + c) * d + k];
                    assert!((va - vb).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn heads_ranges_and_zero_init() {
        let m = Model::new(tiny(), 6, 7).unwrap();
        let feats = random(&[64, 5], 8);
        let (rgb, probs) = m.heads_value(feats.clone(), (8, 8)).unwrap();
        assert!(rgb.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        for row in probs.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
        }
        let (_, again) = m.heads_value(feats.clone(), (8, 8)).unwrap();
        assert!(probs.bit_eq(&again));

        let z = Model::new(ModelConfig { zero_init_output: true, ..tiny() }, 6, 7).unwrap();
        let (rgb, probs) = z.heads_value(feats, (8, 8)).unwrap();
        assert!(rgb.data().iter().all(|v| *v == 0.5));
        assert!(probs.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn rec_head_gradients_match_finite_differences() {
        let m = Model::new(tiny(), 6, 9).unwrap();
        let feats = random(&[36, 5], 10);
        let target = random(&[36, 3], 11);
        let eval = |params: &ParamMap, want_grads: bool| -> Result<(Probe, BTreeMap<String, Tensor>)> {
            let mm = Model::from_params(tiny(), 6, params.clone())?;
            let mut tape = Tape::new();
            let mut b = Bound::new();
            mm.bind(&mut tape, &ParamGroup::RecHead, true, &mut b)?;
            let f = tape.constant(feats.clone())?;
            let rgb = mm.rec_head(&mut tape, &b, f, (6, 6))?;
            let loss = crate::objectives::mse_loss(&mut tape, rgb, &target)?;
            let probe = Probe {
                loss: tape.value(loss).item(),
                signature: tape.branch_signature(),
            };
            let grads = if want_grads {
                b.gradients(&mut tape.backward(loss)?)
            } else {
                BTreeMap::new()
            };
            Ok((probe, grads))
        };
        let (_, analytic) = eval(m.params(), true).unwrap();
        let report = finite_diff_check(
            &mut |p| eval(p, false).map(|r| r.0),
            m.params(),
            &analytic,
            &|n| ParamGroup::of(n).unwrap().to_string(),
            &["decoder".to_string(), "seg_head".to_string()].into(),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
