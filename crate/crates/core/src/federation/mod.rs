//! Round engines for the MSI-exchange protocols.
//!
//! Rounds are numbered from 1. A round is a checkpoint when `k % tau == 0`;
//! `tau = None` means no checkpoint ever happens. Every engine mutates the
//! device states in place and returns the messages it emitted, as seen by
//! their receivers after the [`Channel`].

mod distill;
mod mixing;
mod msi;
mod objective;
mod protocols;

use serde::{Deserialize, Serialize};

pub use distill::{
    distillation_regularizer, jacobian_matching, logit_matching, peer_average, teacher_matching, RegKind,
    TableAccumulator,
};
pub use mixing::{MixingMatrix, MixingSpec};
pub use msi::{Channel, Endpoint, GpdReport, Lossless, MsiKind, MsiMessage, Payload, RoundMsi, DEFAULT_ELEMENT_BITS};
pub use objective::{LocalObjective, NnTask, QuadraticObjective, Sample};
pub use protocols::{
    cd_round, csgd_round, dsgd_round, esgd_round, favg_round, fd_round, fjd_round, fsvrg_round, gadmm_round,
};

use crate::error::{invalid, ConfigErrors, Result};
use crate::nn::LabelTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Csgd,
    Esgd,
    Favg,
    Fsvrg,
    Cd,
    Fd,
    Fjd,
    Dsgd,
    Gadmm,
    /// Federated tail estimation; driven by the evt module, not by [`run_round`].
    Extfl,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 10] = [
        ProtocolKind::Csgd,
        ProtocolKind::Esgd,
        ProtocolKind::Favg,
        ProtocolKind::Fsvrg,
        ProtocolKind::Cd,
        ProtocolKind::Fd,
        ProtocolKind::Fjd,
        ProtocolKind::Dsgd,
        ProtocolKind::Gadmm,
        ProtocolKind::Extfl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Csgd => "csgd",
            ProtocolKind::Esgd => "esgd",
            ProtocolKind::Favg => "favg",
            ProtocolKind::Fsvrg => "fsvrg",
            ProtocolKind::Cd => "cd",
            ProtocolKind::Fd => "fd",
            ProtocolKind::Fjd => "fjd",
            ProtocolKind::Dsgd => "dsgd",
            ProtocolKind::Gadmm => "gadmm",
            ProtocolKind::Extfl => "extfl",
        }
    }

    /// Devices talk to each other rather than to a helper.
    pub fn is_device_device(self) -> bool {
        matches!(self, ProtocolKind::Dsgd | ProtocolKind::Gadmm)
    }

    pub fn constant_lr(self) -> bool {
        matches!(self, ProtocolKind::Fsvrg | ProtocolKind::Gadmm)
    }

    pub fn min_devices(self) -> usize {
        match self {
            ProtocolKind::Fd | ProtocolKind::Fjd | ProtocolKind::Gadmm => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How FD/FJD summarize outputs between checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulatorPolicy {
    /// Mean over all samples seen since the last checkpoint.
    #[default]
    RunningMean,
    /// Only the checkpoint round's batch.
    CheckpointOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub eta: f64,
    /// `null` disables checkpoints.
    pub tau: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub reg_kind: RegKind,
    /// 0 selects full-shard gradients.
    pub batch_size: usize,
    /// `eta / (1 + (k - 1) / lr_decay)` when set; ignored by FSVRG and GADMM.
    pub lr_decay: Option<f64>,
    pub accumulator: AccumulatorPolicy,
    /// CD also regularizes non-checkpoint steps against the stored teacher.
    pub cd_stale_teacher: bool,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// GADMM inner step size; defaults to `eta`.
    pub inner_lr: Option<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            eta: 0.1,
            tau: Some(1),
            alpha: 0.1,
            beta: 0.9,
            rho: 1.0,
            temperature: 1.0,
            reg_kind: RegKind::Mse,
            batch_size: 0,
            lr_decay: None,
            accumulator: AccumulatorPolicy::RunningMean,
            cd_stale_teacher: false,
            inner_tol: 1e-8,
            inner_max_iters: 500,
            inner_lr: None,
        }
    }
}

impl HyperParams {
    pub fn validate_into(&self, prefix: &str, errs: &mut ConfigErrors) {
        let p = |f: &str| format!("{prefix}.{f}");
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            errs.push(p("eta"), format!("must be positive, got {}", self.eta));
        }
        if self.tau == Some(0) {
            errs.push(p("tau"), "must be at least 1 (null disables checkpoints)");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            errs.push(p("alpha"), format!("must lie in [0, 1), got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            errs.push(p("beta"), format!("must lie in (0, 1], got {}", self.beta));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            errs.push(p("rho"), format!("must be positive, got {}", self.rho));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push(p("T"), format!("must be positive, got {}", self.temperature));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0) {
                errs.push(p("lr_decay"), format!("must be positive, got {d}"));
            }
        }
        if !(self.inner_tol > 0.0) {
            errs.push(p("inner_tol"), "must be positive");
        }
        if let Some(lr) = self.inner_lr {
            if !(lr > 0.0) {
                errs.push(p("inner_lr"), "must be positive");
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = ConfigErrors::default();
        self.validate_into("hyper", &mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(crate::error::Error::Config(errs))
        }
    }

    pub fn eta_at(&self, kind: ProtocolKind, k: usize) -> f64 {
        match self.lr_decay {
            Some(decay) if !kind.constant_lr() => self.eta / (1.0 + (k.saturating_sub(1)) as f64 / decay),
            _ => self.eta,
        }
    }

    pub fn is_checkpoint(&self, k: usize) -> bool {
        self.tau.is_some_and(|t| k.is_multiple_of(t))
    }
}

/// Protocol-specific device memory.
#[derive(Clone, Debug, PartialEq)]
pub enum Aux {
    None,
    /// Last global weight known to the device (ESGD, FSVRG).
    Anchor { w_hat: Vec<f64> },
    /// Stored global model (CD).
    Teacher { params: Vec<f64> },
    /// Output accumulator and most recent global table (FD, FJD).
    Distill { accumulator: TableAccumulator, global: Option<LabelTable> },
    /// Duals and neighbor copies on a chain (GADMM). `left` refers to edge
    /// `(i-1, i)`, `right` to `(i, i+1)`.
    Admm {
        lambda_left: Option<Vec<f64>>,
        lambda_right: Option<Vec<f64>>,
        left: Option<Vec<f64>>,
        right: Option<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceState {
    pub id: usize,
    pub params: Vec<f64>,
    pub aux: Aux,
}

impl DeviceState {
    /// Number of full parameter vectors the device keeps.
    pub fn stored_param_vectors(&self) -> usize {
        match self.aux {
            Aux::Teacher { .. } | Aux::Anchor { .. } => 2,
            _ => 1,
        }
    }
}

/// Devices starting from a common parameter vector.
pub fn init_devices(kind: ProtocolKind, obj: &dyn LocalObjective, init: &[f64]) -> Result<Vec<DeviceState>> {
    let m = obj.device_count();
    if m < kind.min_devices() {
        return Err(invalid(format!("{kind} needs at least {} devices, got {m}", kind.min_devices())));
    }
    if init.len() != obj.dim() {
        return Err(crate::error::Error::DimensionMismatch { expected: obj.dim(), actual: init.len() });
    }
    let table_shape = |jacobian: bool| -> Result<(usize, usize)> {
        let nn = obj.as_nn().ok_or_else(|| invalid(format!("{kind} needs a classification task")))?;
        let l = nn.label_count();
        Ok((l, if jacobian { l * nn.spec().input_dim() } else { l }))
    };
    (0..m)
        .map(|id| {
            let aux = match kind {
                ProtocolKind::Esgd | ProtocolKind::Fsvrg => Aux::Anchor { w_hat: init.to_vec() },
                ProtocolKind::Cd => Aux::Teacher { params: init.to_vec() },
                ProtocolKind::Fd | ProtocolKind::Fjd => {
                    let (l, row) = table_shape(kind == ProtocolKind::Fjd)?;
                    Aux::Distill { accumulator: TableAccumulator::new(l, row), global: None }
                }
                ProtocolKind::Gadmm => Aux::Admm {
                    lambda_left: (id > 0).then(|| vec![0.0; init.len()]),
                    lambda_right: (id + 1 < m).then(|| vec![0.0; init.len()]),
                    left: (id > 0).then(|| init.to_vec()),
                    right: (id + 1 < m).then(|| init.to_vec()),
                },
                ProtocolKind::Extfl => return Err(invalid("extfl devices are managed by the evt module")),
                _ => Aux::None,
            };
            Ok(DeviceState { id, params: init.to_vec(), aux })
        })
        .collect()
}

/// Runs round `k` of `kind`. `mixing` is required for DSGD.
pub fn run_round(
    kind: ProtocolKind,
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    mixing: Option<&MixingMatrix>,
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    match kind {
        ProtocolKind::Csgd => csgd_round(obj, devices, hp, k, channel),
        ProtocolKind::Esgd => esgd_round(obj, devices, hp, k, channel),
        ProtocolKind::Favg => favg_round(obj, devices, hp, k, channel),
        ProtocolKind::Fsvrg => fsvrg_round(obj, devices, hp, k, channel),
        ProtocolKind::Cd => cd_round(obj, devices, hp, k, channel),
        ProtocolKind::Fd => fd_round(obj, devices, hp, k, channel),
        ProtocolKind::Fjd => fjd_round(obj, devices, hp, k, channel),
        ProtocolKind::Dsgd => {
            let mix = mixing.ok_or_else(|| invalid("dsgd needs a mixing matrix"))?;
            dsgd_round(obj, devices, mix, hp, k, channel)
        }
        ProtocolKind::Gadmm => gadmm_round(obj, devices, hp, k, channel),
        ProtocolKind::Extfl => Err(invalid("extfl rounds are run by the evt module")),
    }
}
