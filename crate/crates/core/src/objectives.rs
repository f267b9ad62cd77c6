//! Training losses (recorded on the tape) and evaluation metrics.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Probability clamp used by the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;
/// Smoothing term of the soft Dice.
pub const DICE_EPS: f64 = 1e-6;

/// Channel index of the lesion class in segmentation outputs.
pub const LESION: usize = 1;

/// Scalar loss with its components. Disabled components are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub bce: f64,
    pub dice: f64,
}

/// Denominator of the soft Dice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceVariant {
    /// `Σp + Σg`
    #[default]
    Linear,
    /// `Σp² + Σg²`
    Squared,
}

struct MseOp {
    target: Rc<Vec<f64>>,
}

impl CustomOp for MseOp {
    fn name(&self) -> &'static str {
        "mse_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let scale = 2.0 * g.item() / self.target.len() as f64;
        let data = inputs[0]
            .data()
            .iter()
            .zip(self.target.iter())
            .map(|(p, t)| scale * (p - t))
            .collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), data).unwrap())]
    }
}

/// Mean squared error over every pixel and channel.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let p = tape.value(pred);
    if p.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", p.shape(), target.shape()),
        ));
    }
    let value = mse(p.data(), target.data());
    tape.custom(
        &[pred],
        Tensor::scalar(value),
        Box::new(MseOp {
            target: Rc::new(target.data().to_vec()),
        }),
    )
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

fn check_labels(op: &'static str, probs: &Tensor, labels: &[u8]) -> Result<()> {
    if probs.shape().len() != 2 || probs.shape()[1] != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::shape(
            op,
            format!("probs {:?} vs {} labels", probs.shape(), labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|l| **l > 1) {
        return Err(Error::Data(format!("non-binary label {bad}")));
    }
    Ok(())
}

struct CrossEntropyOp {
    labels: Rc<Vec<u8>>,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let n = self.labels.len() as f64;
        let mut grad = Tensor::zeros(inputs[0].shape());
        for (i, l) in self.labels.iter().enumerate() {
            let p = inputs[0].data()[2 * i + *l as usize];
            if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                grad.data_mut()[2 * i + *l as usize] = -g.item() / (p * n);
            }
        }
        vec![Some(grad)]
    }
}

/// Two-class cross-entropy `mean(-log p[label])` on a per-pixel
/// distribution `[N, 2]`, probabilities clamped to `[1e-7, 1-1e-7]`.
pub fn bce_loss(tape: &mut Tape, probs: Var, labels: &[u8]) -> Result<Var> {
    check_labels("bce_loss", tape.value(probs), labels)?;
    let p = tape.value(probs).data();
    let value = cross_entropy(p, labels);
    let clamped: Vec<bool> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let q = p[2 * i + *l as usize];
            q <= BCE_CLAMP || q >= 1.0 - BCE_CLAMP
        })
        .collect();
    tape.note_branches(clamped);
    tape.custom(
        &[probs],
        Tensor::scalar(value),
        Box::new(CrossEntropyOp {
            labels: Rc::new(labels.to_vec()),
        }),
    )
}

/// Plain-slice version of [`bce_loss`]; `probs` is `[N, 2]` row-major.
pub fn cross_entropy(probs: &[f64], labels: &[u8]) -> f64 {
    let n = labels.len().max(1) as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| -probs[2 * i + *l as usize].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP).ln())
        .sum::<f64>()
        / n
}

/// Soft Dice coefficient of lesion probabilities against binary labels.
pub fn soft_dice_coefficient(lesion: &[f64], labels: &[u8], variant: DiceVariant) -> f64 {
    let (inter, denom) = dice_sums(lesion.iter().copied(), labels, variant);
    (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
}

fn dice_sums(lesion: impl Iterator<Item = f64>, labels: &[u8], variant: DiceVariant) -> (f64, f64) {
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (p, g) in lesion.zip(labels) {
        let g = *g as f64;
        inter += p * g;
        denom += match variant {
            DiceVariant::Linear => p + g,
            DiceVariant::Squared => p * p + g * g,
        };
    }
    (inter, denom)
}

struct DiceOp {
    labels: Rc<Vec<u8>>,
    variant: DiceVariant,
}

impl CustomOp for DiceOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let probs = inputs[0].data();
        let lesion = probs.iter().skip(LESION).step_by(2).copied();
        let (inter, denom) = dice_sums(lesion, &self.labels, self.variant);
        let (num, den) = (2.0 * inter + DICE_EPS, denom + DICE_EPS);
        let mut grad = Tensor::zeros(inputs[0].shape());
        for (i, l) in self.labels.iter().enumerate() {
            let p = probs[2 * i + LESION];
            let d_denom = match self.variant {
                DiceVariant::Linear => 1.0,
                DiceVariant::Squared => 2.0 * p,
            };
            let d_ratio = (2.0 * *l as f64 * den - num * d_denom) / (den * den);
            grad.data_mut()[2 * i + LESION] = -g.item() * d_ratio;
        }
        vec![Some(grad)]
    }
}

/// `1 - (2Σpg + ε)/(Σp + Σg + ε)` on the lesion channel of `[N, 2]` probabilities.
pub fn dice_loss(tape: &mut Tape, probs: Var, labels: &[u8], variant: DiceVariant) -> Result<Var> {
    check_labels("dice_loss", tape.value(probs), labels)?;
    let lesion: Vec<f64> = tape.value(probs).data().iter().skip(LESION).step_by(2).copied().collect();
    let value = 1.0 - soft_dice_coefficient(&lesion, labels, variant);
    tape.custom(
        &[probs],
        Tensor::scalar(value),
        Box::new(DiceOp {
            labels: Rc::new(labels.to_vec()),
            variant,
        }),
    )
}

/// Hard Dice between binary masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub dice: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub level: String,
}

/// `2TP / (2TP + FP + FN)`; two empty masks score 1.
pub fn dice_metric(pred: &[bool], truth: &[bool], level: &str) -> Result<DiceReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "dice_metric",
            format!("{} vs {} pixels", pred.len(), truth.len()),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    let dice = if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    };
    Ok(DiceReport {
        dice,
        tp,
        fp,
        fn_,
        level: level.to_string(),
    })
}

/// `10·log10(1/mse)` for signals in `[0,1]`; `+inf` when the images match.
pub fn psnr(pred: &[f64], target: &[f64]) -> f64 {
    psnr_from_mse(mse(pred, target))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
