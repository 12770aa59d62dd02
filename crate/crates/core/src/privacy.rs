//! Gaussian noise for MSI payloads and label-based privacy leakage.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, ConfigErrors, Error, Result};
use crate::federation::MsiMessage;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub noise_sigma: f64,
    pub clip_norm: Option<f64>,
}

impl DpConfig {
    pub fn validate_into(&self, prefix: &str, errs: &mut ConfigErrors) {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            errs.push(format!("{prefix}.noise_sigma"), format!("must be nonnegative, got {}", self.noise_sigma));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                errs.push(format!("{prefix}.clip_norm"), format!("must be positive, got {c}"));
            }
        }
    }
}

/// Clips the payload to `clip_norm` in L2 norm, then adds i.i.d.
/// `N(0, noise_sigma^2)` to every entry.
pub fn gaussian_mechanism<R: Rng + ?Sized>(mut msg: MsiMessage, cfg: &DpConfig, rng: &mut R) -> MsiMessage {
    if let Some(c) = cfg.clip_norm {
        let norm = msg.payload.values_mut().map(|v| *v * *v).sum::<f64>().sqrt();
        if norm > c {
            let scale = c / norm;
            msg.payload.values_mut().for_each(|v| *v *= scale);
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        msg.payload.values_mut().for_each(|v| *v += noise.sample(rng));
    }
    msg
}

/// Labels a device wants augmented (target) and decoys it also reports (redundant).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSets {
    pub target: BTreeSet<usize>,
    pub redundant: BTreeSet<usize>,
}

impl LabelSets {
    pub fn new(
        target: impl IntoIterator<Item = usize>,
        redundant: impl IntoIterator<Item = usize>,
        label_count: usize,
    ) -> Result<Self> {
        let target: BTreeSet<usize> = target.into_iter().collect();
        let redundant: BTreeSet<usize> = redundant.into_iter().collect();
        if target.iter().chain(&redundant).any(|&l| l >= label_count) {
            return Err(invalid(format!("labels must lie in [0, {label_count})")));
        }
        if !target.is_disjoint(&redundant) {
            return Err(invalid("target and redundant labels overlap"));
        }
        Ok(LabelSets { target, redundant })
    }
}

/// `|L_t| / (|L_t| + |L_r|)` for device `i`.
pub fn device_helper_pl(sets: &[LabelSets], i: usize) -> Result<f64> {
    let s = sets.get(i).ok_or_else(|| invalid(format!("no device {i}")))?;
    let total = s.target.len() + s.redundant.len();
    if total == 0 {
        return Err(Error::Empty("label sets"));
    }
    Ok(s.target.len() as f64 / total as f64)
}

/// `|L_t(i)|` over the number of labels any device reports.
pub fn inter_device_pl(sets: &[LabelSets], i: usize) -> Result<f64> {
    let s = sets.get(i).ok_or_else(|| invalid(format!("no device {i}")))?;
    let union: BTreeSet<usize> = sets.iter().flat_map(|d| d.target.iter().chain(&d.redundant)).copied().collect();
    if union.is_empty() {
        return Err(Error::Empty("label union"));
    }
    Ok(s.target.len() as f64 / union.len() as f64)
}
