//! Round pricing: payload sizes, link and compute delays, quantization.
//!
//! A helper-device round costs `max_i(compute_i + uplink_i) + aggregate +
//! downlink`. A device-device round costs the slowest compute plus, for each
//! exchange phase, the slowest transmission in that phase. Each transmission
//! attempt takes `bits / rate + prop_delay_s`; lost attempts are repeated
//! whole, so the attempt count is geometric in `1 - loss_prob`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, ConfigErrors, Error, Result};
use crate::federation::{Endpoint, MsiMessage, RoundMsi};
use crate::rng::SimRng;

pub fn payload_bits(msg: &MsiMessage) -> u64 {
    msg.bits()
}

/// `log2(12) / 2`, the gap between capacity and level bits.
pub const QUANT_GAP_BITS: f64 = 1.792_481_250_360_578;

/// Largest `l` with `log2(l) + log2(12)/2 <= c`, at least 1.
pub fn max_quantization_levels(c: f64) -> usize {
    if !(c > QUANT_GAP_BITS) {
        return 1;
    }
    ((c - QUANT_GAP_BITS).exp2().floor() as usize).max(1)
}

/// True when the capacity is too small for more than one level.
pub fn capacity_too_small(c: f64) -> bool {
    max_quantization_levels(c) <= 1
}

/// Bits per element needed to index `levels` levels.
pub fn level_bits(levels: usize) -> u32 {
    (levels.max(2) as f64).log2().ceil() as u32
}

/// Snaps each value to the midpoint of one of `levels` equal cells spanning
/// `[min, max]`. Returns the values and the cell width.
pub fn quantize_uniform(values: &[f64], levels: usize) -> Result<(Vec<f64>, f64)> {
    if levels == 0 {
        return Err(invalid("need at least one quantization level"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantizer input"));
    }
    if values.is_empty() {
        return Ok((Vec::new(), 0.0));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok((values.to_vec(), 0.0));
    }
    let delta = (hi - lo) / levels as f64;
    let out = values
        .iter()
        .map(|v| {
            let cell = (((v - lo) / delta).floor() as usize).min(levels - 1);
            lo + (cell as f64 + 0.5) * delta
        })
        .collect();
    Ok((out, delta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub uplink_bps: f64,
    pub downlink_bps: f64,
    pub prop_delay_s: f64,
    pub capacity_bits_per_sample: f64,
    pub loss_prob: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            uplink_bps: 1.0e6,
            downlink_bps: 1.0e7,
            prop_delay_s: 0.0,
            capacity_bits_per_sample: 32.0,
            loss_prob: 0.0,
        }
    }
}

impl LinkModel {
    pub fn validate_into(&self, prefix: &str, errs: &mut ConfigErrors) {
        let p = |f: &str| format!("{prefix}.{f}");
        for (name, v) in [
            ("uplink_bps", self.uplink_bps),
            ("downlink_bps", self.downlink_bps),
            ("capacity_bits_per_sample", self.capacity_bits_per_sample),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(p(name), format!("must be positive, got {v}"));
            }
        }
        if !(self.prop_delay_s >= 0.0 && self.prop_delay_s.is_finite()) {
            errs.push(p("prop_delay_s"), "must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.loss_prob) {
            errs.push(p("loss_prob"), format!("must lie in [0, 1), got {}", self.loss_prob));
        }
    }

    /// Number of attempts until the first success.
    pub fn sample_attempts<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.loss_prob <= 0.0 {
            return 1;
        }
        Geometric::new(1.0 - self.loss_prob).expect("validated loss_prob").sample(rng) + 1
    }

    fn transmit_time<R: Rng + ?Sized>(&self, bits: u64, rate: f64, rng: &mut R) -> f64 {
        self.sample_attempts(rng) as f64 * (bits as f64 / rate + self.prop_delay_s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum StraggleDist {
    #[default]
    None,
    Exponential {
        mean_s: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeModel {
    pub per_epoch_s: f64,
    pub straggle: StraggleDist,
    /// Helper aggregation time per round with messages.
    pub aggregate_s: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel { per_epoch_s: 0.01, straggle: StraggleDist::None, aggregate_s: 0.0 }
    }
}

impl ComputeModel {
    pub fn validate_into(&self, prefix: &str, errs: &mut ConfigErrors) {
        let p = |f: &str| format!("{prefix}.{f}");
        if !(self.per_epoch_s >= 0.0 && self.per_epoch_s.is_finite()) {
            errs.push(p("per_epoch_s"), "must be nonnegative");
        }
        if !(self.aggregate_s >= 0.0 && self.aggregate_s.is_finite()) {
            errs.push(p("aggregate_s"), "must be nonnegative");
        }
        match self.straggle {
            StraggleDist::None => {}
            StraggleDist::Exponential { mean_s } => {
                if !(mean_s > 0.0 && mean_s.is_finite()) {
                    errs.push(p("straggle.mean_s"), "must be positive");
                }
            }
            StraggleDist::Uniform { lo, hi } => {
                if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                    errs.push(p("straggle"), "need 0 <= lo <= hi");
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let jitter = match self.straggle {
            StraggleDist::None => 0.0,
            StraggleDist::Exponential { mean_s } => Exp::new(1.0 / mean_s).expect("validated mean").sample(rng),
            StraggleDist::Uniform { lo, hi } if hi > lo => rng.random_range(lo..hi),
            StraggleDist::Uniform { lo, .. } => lo,
        };
        self.per_epoch_s + jitter
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    HelperDevice,
    DeviceDevice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundTiming {
    pub compute_s: Vec<f64>,
    pub uplink_s: Vec<f64>,
    pub aggregate_s: f64,
    pub downlink_s: f64,
    pub total_s: f64,
}

/// Prices one round of `m` devices. Draws come from `rng` in a fixed order:
/// compute jitter per device, then retries per message in emission order.
pub fn price_round(
    split: Split,
    m: usize,
    msi: &RoundMsi,
    links: &LinkModel,
    compute: &ComputeModel,
    rng: &mut SimRng,
) -> RoundTiming {
    let compute_s: Vec<f64> = (0..m).map(|_| compute.sample(rng)).collect();
    let mut uplink_s = vec![0.0; m];
    let mut down_per_device = vec![0.0; m];
    let mut phases: Vec<Vec<f64>> = Vec::new();
    for msg in &msi.messages {
        let bits = msg.bits();
        match (&msg.from, &msg.to) {
            (Endpoint::Device(i), Endpoint::Helper) => uplink_s[*i] += links.transmit_time(bits, links.uplink_bps, rng),
            (Endpoint::Device(i), _) => {
                let t = links.transmit_time(bits, links.uplink_bps, rng);
                uplink_s[*i] += t;
                let p = usize::from(msg.phase);
                if phases.len() <= p {
                    phases.resize(p + 1, vec![0.0; m]);
                }
                phases[p][*i] += t;
            }
            (_, Endpoint::AllDevices) => {
                let t = links.transmit_time(bits, links.downlink_bps, rng);
                down_per_device.iter_mut().for_each(|d| *d += t);
            }
            (_, Endpoint::Device(j)) => down_per_device[*j] += links.transmit_time(bits, links.downlink_bps, rng),
            (_, Endpoint::Peers(_)) | (_, Endpoint::Helper) => {}
        }
    }
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let downlink_s = max(&down_per_device);
    match split {
        Split::HelperDevice => {
            let aggregate_s = if msi.is_empty() { 0.0 } else { compute.aggregate_s };
            let barrier = compute_s.iter().zip(&uplink_s).map(|(c, u)| c + u).fold(0.0, f64::max);
            RoundTiming { total_s: barrier + aggregate_s + downlink_s, compute_s, uplink_s, aggregate_s, downlink_s }
        }
        Split::DeviceDevice => {
            let total_s = max(&compute_s) + phases.iter().map(|p| max(p)).sum::<f64>();
            RoundTiming { total_s, compute_s, uplink_s, aggregate_s: 0.0, downlink_s: 0.0 }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{MsiKind, Payload};
    use crate::rng::stream;

    fn up(i: usize, n: usize) -> MsiMessage {
        MsiMessage::upload(i, MsiKind::Weights, Payload::Vector(vec![0.0; n]))
    }

    #[test]
    fn payload_bit_counts() {
        assert_eq!(payload_bits(&up(0, 100)), 3200);
        let table = crate::nn::LabelTable::from_rows(vec![Some(vec![0.1; 10]); 10], 10).unwrap();
        let msg = MsiMessage::upload(0, MsiKind::LogitTable, Payload::Table(table));
        assert_eq!(payload_bits(&msg), 3200);
    }

    #[test]
    fn quantization_levels() {
        assert_eq!(max_quantization_levels(5.0), 9);
        assert_eq!(max_quantization_levels(QUANT_GAP_BITS + 1.0), 2);
        assert_eq!(max_quantization_levels(1.0), 1);
        assert!(capacity_too_small(1.0));
        let mut prev = 0;
        for i in 0..200 {
            let c = 1.0 + i as f64 * 0.1;
            let l = max_quantization_levels(c);
            assert!(l >= prev);
            prev = l;
            if l > 1 {
                assert!((l as f64).log2() + QUANT_GAP_BITS <= c + 1e-12);
            }
        }
    }

    #[test]
    fn quantizer_edge_cases() {
        let (q, d) = quantize_uniform(&[3.0, 3.0], 4).unwrap();
        assert_eq!(q, vec![3.0, 3.0]);
        assert_eq!(d, 0.0);
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let (q, d) = quantize_uniform(&xs, 1_000_000).unwrap();
        assert!((d - 1e-6).abs() < 1e-18);
        assert!(xs.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(quantize_uniform(&[f64::NAN], 4).is_err());
    }

    #[test]
    fn quantizer_distortion_matches_uniform_model() {
        let mut rng = stream(2, "quant-test");
        let xs: Vec<f64> = (0..200_000).map(|_| rng.random::<f64>()).collect();
        let (q, d) = quantize_uniform(&xs, 16).unwrap();
        let mse = xs.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xs.len() as f64;
        assert!((mse / (d * d / 12.0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn single_upload_takes_one_second() {
        let mut msi = RoundMsi::default();
        msi.push(up(0, 100));
        let links = LinkModel { uplink_bps: 3200.0, ..LinkModel::default() };
        let compute = ComputeModel { per_epoch_s: 0.0, ..ComputeModel::default() };
        let t = price_round(Split::HelperDevice, 1, &msi, &links, &compute, &mut stream(0, "t"));
        assert_eq!(t.total_s, 1.0);
    }

    #[test]
    fn geometric_retries_average_two_attempts() {
        let links = LinkModel { loss_prob: 0.5, ..LinkModel::default() };
        let mut rng = stream(3, "retry");
        let n = 10_000;
        let mean = (0..n).map(|_| links.sample_attempts(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.03, "{mean}");
    }

    #[test]
    fn barrier_takes_the_slowest_device() {
        let mut msi = RoundMsi::default();
        msi.push(up(0, 10));
        msi.push(up(1, 10));
        let links = LinkModel { uplink_bps: 320.0, ..LinkModel::default() };
        let compute = ComputeModel {
            per_epoch_s: 0.0,
            straggle: StraggleDist::Uniform { lo: 0.0, hi: 5.0 },
            aggregate_s: 0.0,
        };
        let t = price_round(Split::HelperDevice, 2, &msi, &links, &compute, &mut stream(4, "s"));
        let slow = t.compute_s.iter().copied().fold(0.0, f64::max);
        assert_eq!(t.total_s, slow + 1.0);
        assert!(t.total_s > t.compute_s.iter().sum::<f64>() / 2.0 + 1.0);
    }

    #[test]
    fn halving_uplink_rate_doubles_uplink_time() {
        let mut msi = RoundMsi::default();
        msi.push(up(0, 50));
        msi.push(up(1, 70));
        let fast = LinkModel { uplink_bps: 1000.0, ..LinkModel::default() };
        let slow = LinkModel { uplink_bps: 500.0, ..fast.clone() };
        let c = ComputeModel::default();
        let a = price_round(Split::HelperDevice, 2, &msi, &fast, &c, &mut stream(5, "h"));
        let b = price_round(Split::HelperDevice, 2, &msi, &slow, &c, &mut stream(5, "h"));
        for (x, y) in a.uplink_s.iter().zip(&b.uplink_s) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn device_device_sums_phases() {
        let mut msi = RoundMsi::default();
        msi.push(MsiMessage::to_peers(0, vec![1], MsiKind::Weights, Payload::Vector(vec![0.0; 10]), 0));
        msi.push(MsiMessage::to_peers(2, vec![1], MsiKind::Weights, Payload::Vector(vec![0.0; 20]), 0));
        msi.push(MsiMessage::to_peers(1, vec![0, 2], MsiKind::Weights, Payload::Vector(vec![0.0; 10]), 1));
        let links = LinkModel { uplink_bps: 320.0, ..LinkModel::default() };
        let c = ComputeModel { per_epoch_s: 0.5, ..ComputeModel::default() };
        let t = price_round(Split::DeviceDevice, 3, &msi, &links, &c, &mut stream(6, "d"));
        assert_eq!(t.total_s, 0.5 + 2.0 + 1.0);
    }
}
