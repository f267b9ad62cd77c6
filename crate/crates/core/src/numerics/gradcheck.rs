//! Central finite-difference oracle for tape gradients.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tensor::Tensor;
use super::ParamMap;
use crate::error::{Error, Result};

/// A loss evaluation together with the branch fingerprint of the tape that
/// produced it (see [`crate::numerics::Tape::branch_signature`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub signature: u64,
}

impl Probe {
    pub fn smooth(loss: f64) -> Self {
        Probe { loss, signature: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per group.
    pub samples_per_group: usize,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_group: 24,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub frozen: bool,
    pub checked: usize,
    /// Probes discarded because `p±h` landed on different smooth pieces.
    pub kinks_skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

impl GroupReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        if self.frozen {
            self.max_abs_grad == 0.0
        } else {
            self.checked > 0 && self.max_rel_err < tolerance
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed(self.tolerance))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| !g.frozen)
            .fold(0.0_f64, |m, g| m.max(g.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `loss_fn`.
///
/// Parameters are bucketed by `group_of(name)`. Groups listed in `frozen`
/// are not probed; their report records the largest analytic gradient,
/// which must be exactly zero. A missing analytic entry counts as zero.
pub fn finite_diff_check(
    loss_fn: &mut dyn FnMut(&ParamMap) -> Result<Probe>,
    params: &ParamMap,
    analytic: &BTreeMap<String, Tensor>,
    group_of: &dyn Fn(&str) -> String,
    frozen: &BTreeSet<String>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if cfg.step <= 0.0 {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    let base = loss_fn(params)?;
    let again = loss_fn(params)?;
    if base.loss.to_bits() != again.loss.to_bits() || base.signature != again.signature {
        return Err(Error::OracleInvalid(format!(
            "loss is not deterministic: {} vs {}",
            base.loss, again.loss
        )));
    }

    let mut by_group: BTreeMap<String, Vec<&String>> = BTreeMap::new();
    for name in params.keys() {
        by_group.entry(group_of(name)).or_default().push(name);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut groups = Vec::new();
    for (group, names) in by_group {
        let grad_at = |name: &str, i: usize| analytic.get(name).map_or(0.0, |t| t.data()[i]);
        let max_abs_grad = names
            .iter()
            .filter_map(|n| analytic.get(n.as_str()))
            .fold(0.0_f64, |m, t| m.max(t.max_abs()));
        if frozen.contains(&group) {
            groups.push(GroupReport {
                group,
                frozen: true,
                checked: 0,
                kinks_skipped: 0,
                max_rel_err: 0.0,
                max_abs_grad,
            });
            continue;
        }

        // Half the probes go to coordinates with a nonzero analytic gradient,
        // the rest are uniform over the group.
        let mut active = Vec::new();
        let mut all = Vec::new();
        for name in &names {
            for i in 0..params[name.as_str()].numel() {
                all.push((name.as_str(), i));
                if grad_at(name, i) != 0.0 {
                    active.push((name.as_str(), i));
                }
            }
        }
        active.shuffle(&mut rng);
        let mut candidates: Vec<(&str, usize)> = active
            .iter()
            .copied()
            .take(cfg.samples_per_group.div_ceil(2))
            .collect();
        let extra = cfg.samples_per_group.saturating_sub(candidates.len());
        for _ in 0..extra {
            candidates.push(all[rng.gen_range(0..all.len())]);
        }
        // Spare coordinates replace probes that straddle a kink.
        let mut spares = active.into_iter().skip(cfg.samples_per_group.div_ceil(2));

        let mut report = GroupReport {
            group,
            frozen: false,
            checked: 0,
            kinks_skipped: 0,
            max_rel_err: 0.0,
            max_abs_grad,
        };
        let mut queue = candidates;
        while let Some((name, i)) = queue.pop() {
            let orig = params[name].data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + cfg.step;
            let plus = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - cfg.step;
            let minus = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            if plus.signature != base.signature || minus.signature != base.signature {
                report.kinks_skipped += 1;
                if let Some(next) = spares.next() {
                    queue.push(next);
                }
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
            let err = relative_error(grad_at(name, i), numeric, cfg.abs_floor);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
        groups.push(report);
    }
    Ok(GradCheckReport {
        groups,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_gradient_is_identity() {
        let mut params = ParamMap::new();
        params.insert(
            "a/p".into(),
            Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.01]).unwrap(),
        );
        let mut loss = |p: &ParamMap| -> Result<Probe> {
            Ok(Probe::smooth(0.5 * p["a/p"].data().iter().map(|v| v * v).sum::<f64>()))
        };
        let analytic: BTreeMap<_, _> = [("a/p".to_string(), params["a/p"].clone())].into();
        let cfg = GradCheckConfig {
            samples_per_group: 8,
            ..Default::default()
        };
        let report = finite_diff_check(
            &mut loss,
            &params,
            &analytic,
            &|n| n.split('/').next().unwrap().to_string(),
            &BTreeSet::new(),
            &cfg,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "{report:?}");
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let mut params = ParamMap::new();
        params.insert("a".into(), Tensor::scalar(1.0));
        let mut calls = 0.0;
        let mut loss = |_: &ParamMap| -> Result<Probe> {
            calls += 1.0;
            Ok(Probe::smooth(calls))
        };
        let err = finite_diff_check(
            &mut loss,
            &params,
            &BTreeMap::new(),
            &|_| "a".into(),
            &BTreeSet::new(),
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleInvalid(_)));
    }

    #[test]
    fn frozen_group_reports_zero() {
        let mut params = ParamMap::new();
        params.insert("frozen/w".into(), Tensor::scalar(2.0));
        params.insert("live/w".into(), Tensor::scalar(3.0));
        let mut loss = |p: &ParamMap| -> Result<Probe> {
            Ok(Probe::smooth(p["frozen/w"].item() * p["live/w"].item()))
        };
        let analytic: BTreeMap<_, _> = [("live/w".to_string(), Tensor::scalar(2.0))].into();
        let frozen: BTreeSet<_> = ["frozen".to_string()].into();
        let report = finite_diff_check(
            &mut loss,
            &params,
            &analytic,
            &|n| n.split('/').next().unwrap().to_string(),
            &frozen,
            &GradCheckConfig::default(),
        )
        .unwrap();
        let f = report.groups.iter().find(|g| g.group == "frozen").unwrap();
        assert!(f.frozen && f.max_abs_grad == 0.0);
        assert!(report.passed());
    }
}
