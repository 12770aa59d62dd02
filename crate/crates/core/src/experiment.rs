//! Runs a configured experiment round by round and records metrics.

use std::sync::Arc;

use crate::blockfl::{apply_malfunction, miner_of, simulate_block_round, BlockFlConfig, BlockRoundOutcome};
use crate::config::{DataSource, ExperimentConfig, FitMethod, PartitionMode};
use crate::datagen::{gen_blobs, load_csv, partition_iid, partition_label_skew, share_fraction, Dataset};
use crate::error::{invalid, Error, Result};
use crate::evt::{
    gpd_device_report, gpd_loglik_grad, simulate_queues, ExceedanceSet, FederatedGpdState, WassersteinProblem,
};
use crate::federation::{
    init_devices, run_round, Channel, GpdReport, LocalObjective, MsiKind, MsiMessage, NnTask, Payload, ProtocolKind,
    RoundMsi, Sample,
};
use crate::metrics::MetricsRecord;
use crate::netsim::{level_bits, max_quantization_levels, price_round, quantize_uniform, RoundTiming, Split};
use crate::nn::{evaluate_raw, loss_raw, Batch, ModelSpec, ParamVector};
use crate::privacy::{gaussian_mechanism, DpConfig};
use crate::rng::{derive_seed, stream, SimRng};

/// Quantizes and then perturbs MSI on its way to the receiver. Uplink
/// messages (device to helper or peers) are always eligible; downlink ones
/// only when `downlink` is set. Noise is added by devices, so only to uplinks.
pub struct EdgeChannel {
    levels: Option<usize>,
    downlink: bool,
    dp: Option<DpConfig>,
    rng: SimRng,
}

impl EdgeChannel {
    pub fn new(levels: Option<usize>, downlink: bool, dp: Option<DpConfig>, rng: SimRng) -> Self {
        EdgeChannel { levels, downlink, dp, rng }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let q = &cfg.quantization;
        let levels =
            q.enabled.then(|| q.levels.unwrap_or_else(|| max_quantization_levels(cfg.links.capacity_bits_per_sample)));
        let dp = (cfg.dp.noise_sigma > 0.0 || cfg.dp.clip_norm.is_some()).then(|| cfg.dp.clone());
        EdgeChannel::new(levels, q.downlink, dp, stream(cfg.seed, "channel"))
    }

    pub fn is_transparent(&self) -> bool {
        self.levels.is_none() && self.dp.is_none()
    }
}

impl Channel for EdgeChannel {
    fn transmit(&mut self, mut msg: MsiMessage) -> MsiMessage {
        if matches!(msg.payload, Payload::Gpd(_)) {
            return msg;
        }
        let up = msg.is_uplink();
        if let Some(levels) = self.levels {
            if up || self.downlink {
                if let Ok((q, _)) = quantize_uniform(&msg.payload.values(), levels) {
                    for (slot, v) in msg.payload.values_mut().zip(q) {
                        *slot = v;
                    }
                    msg.element_bits = level_bits(levels);
                }
            }
        }
        if up {
            if let Some(dp) = &self.dp {
                msg = gaussian_mechanism(msg, dp, &mut self.rng);
            }
        }
        msg
    }
}

/// Training task, held-out batch and initial weights built from a config.
pub struct Prepared {
    pub task: NnTask,
    pub test: Option<Batch>,
    pub init: Vec<f64>,
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    match cfg.data.source.as_ref().ok_or_else(|| invalid("data.source is required"))? {
        DataSource::Blobs { labels, per_class, dim, separation } => {
            let train = gen_blobs(*labels, *per_class, *dim, *separation, cfg.seed)?;
            let test = (cfg.data.test_per_class > 0)
                .then(|| gen_blobs(*labels, cfg.data.test_per_class, *dim, *separation, derive_seed(cfg.seed, "test-data", &[])))
                .transpose()?;
            Ok((train, test))
        }
        DataSource::Csv { path, test_path, label_count } => {
            let train = load_csv(path, *label_count)?;
            let lc = label_count.or(Some(train.label_count()));
            let test = test_path.as_ref().map(|p| load_csv(p, lc)).transpose()?;
            Ok((train, test))
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let spec: ModelSpec = cfg.model.clone().ok_or_else(|| invalid("model is required"))?;
    let (train, test) = load_data(cfg)?;
    let m = cfg.data.devices;
    let mut plan = match cfg.data.partition {
        PartitionMode::Iid => partition_iid(&train, m, cfg.seed)?,
        PartitionMode::LabelSkew { labels_per_device } => partition_label_skew(&train, m, labels_per_device, cfg.seed)?,
    };
    if cfg.data.p_share > 0.0 {
        plan = share_fraction(&train, &plan, cfg.data.p_share, cfg.seed)?;
    }
    let test = test.map(|t| t.full_batch()).transpose()?;
    let task = NnTask::new(spec.clone(), Arc::new(train), plan.assignments, cfg.protocol.hyper.batch_size, cfg.seed)?;
    let init = ParamVector::glorot(spec, &mut stream(cfg.seed, "init")).into_values();
    Ok(Prepared { task, test, init })
}

/// Shard-weighted training loss and device-averaged test metrics.
struct Evaluator {
    spec: ModelSpec,
    shards: Vec<Option<Batch>>,
    sizes: Vec<f64>,
    test: Option<Batch>,
}

impl Evaluator {
    fn new(p: &Prepared) -> Self {
        let m = p.task.device_count();
        let shards: Vec<Option<Batch>> = (0..m).map(|i| p.task.batch(i, Sample::Full)).collect();
        let sizes = (0..m).map(|i| p.task.shard(i).len() as f64).collect();
        Evaluator { spec: p.task.spec().clone(), shards, sizes, test: p.test.clone() }
    }

    /// Each device's own model on its own shard.
    fn train_loss<V: AsRef<[f64]>>(&self, params: &[V]) -> Option<f64> {
        let total: f64 = self.sizes.iter().sum();
        if total == 0.0 {
            return None;
        }
        let mut acc = 0.0;
        for ((w, shard), n) in params.iter().zip(&self.shards).zip(&self.sizes) {
            if let Some(b) = shard {
                acc += n * loss_raw(&self.spec, w.as_ref(), b);
            }
        }
        Some(acc / total)
    }

    fn test<V: AsRef<[f64]>>(&self, params: &[V]) -> (Option<f64>, Option<f64>) {
        let Some(t) = &self.test else { return (None, None) };
        let (mut loss, mut acc) = (0.0, 0.0);
        for w in params {
            let (l, a) = evaluate_raw(&self.spec, w.as_ref(), t);
            loss += l;
            acc += a;
        }
        let m = params.len() as f64;
        (Some(loss / m), Some(acc / m))
    }
}

/// Records plus the state needed to check runs against the protocol engines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub final_params: Vec<Vec<f64>>,
    pub timings: Vec<RoundTiming>,
    pub messages: Vec<RoundMsi>,
}

/// Runs the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    Ok(run_experiment_detailed(cfg)?.records)
}

pub fn run_experiment_detailed(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(b) = &cfg.blockfl {
        return Ok(run_blockfl(b, cfg)?.output);
    }
    if cfg.protocol.kind == ProtocolKind::Extfl {
        return run_extfl(cfg);
    }
    let prepared = prepare(cfg)?;
    let eval = Evaluator::new(&prepared);
    let kind = cfg.protocol.kind;
    let hp = &cfg.protocol.hyper;
    let m = prepared.task.device_count();
    let mixing = (kind == ProtocolKind::Dsgd).then(|| cfg.protocol.mixing.build(m)).transpose()?;
    let split = if kind.is_device_device() { Split::DeviceDevice } else { Split::HelperDevice };
    let mut devices = init_devices(kind, &prepared.task, &prepared.init)?;
    let mut channel = EdgeChannel::from_config(cfg);
    let mut price_rng = stream(cfg.seed, "pricing");
    let mut out = RunOutput { records: Vec::new(), final_params: Vec::new(), timings: Vec::new(), messages: Vec::new() };
    let (mut time, mut up, mut down) = (0.0, 0u64, 0u64);
    for k in 1..=cfg.rounds {
        let msi = run_round(kind, &prepared.task, &mut devices, mixing.as_ref(), hp, k, &mut channel)?;
        let timing = price_round(split, m, &msi, &cfg.links, &cfg.compute, &mut price_rng);
        time += timing.total_s;
        up += msi.uplink_bits();
        down += msi.downlink_bits();
        let params: Vec<&[f64]> = devices.iter().map(|d| d.params.as_slice()).collect();
        let (test_loss, test_acc) = eval.test(&params);
        out.records.push(MetricsRecord {
            round: k,
            sim_time_s: time,
            cum_bits_up: up,
            cum_bits_down: down,
            train_loss: eval.train_loss(&params),
            test_loss,
            test_acc,
            forks: None,
            protocol: kind.name().to_string(),
        });
        out.timings.push(timing);
        out.messages.push(msi);
    }
    out.final_params = devices.into_iter().map(|d| d.params).collect();
    Ok(out)
}

/// Federated tail fit over simulated device queues.
fn run_extfl(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let evt = cfg.evt.as_ref().ok_or_else(|| invalid("evt config is required for extfl"))?;
    let m = cfg.data.devices;
    let queues = simulate_queues(m, evt.arrival_rate, evt.service_rate, evt.horizon, derive_seed(cfg.seed, "evt", &[]))?;
    let sets: Vec<ExceedanceSet> =
        queues.traces.iter().enumerate().map(|(i, t)| ExceedanceSet::from_trace(t, evt.threshold, i)).collect();
    let pooled: Vec<f64> = sets.iter().flat_map(|s| s.samples.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::Empty("exceedances over the threshold"));
    }
    let problems: Vec<Option<WassersteinProblem>> = match evt.method {
        FitMethod::Mle => vec![None; m],
        FitMethod::Wasserstein => {
            sets.iter().map(|s| (!s.is_empty()).then(|| WassersteinProblem::new(&s.samples, &evt.grid)).transpose()).collect::<Result<_>>()?
        }
    };
    let mut state = FederatedGpdState::new(evt.init, evt.lr);
    let mut channel = EdgeChannel::from_config(cfg);
    let mut price_rng = stream(cfg.seed, "pricing");
    let mut out = RunOutput { records: Vec::new(), final_params: Vec::new(), timings: Vec::new(), messages: Vec::new() };
    let (mut time, mut up, mut down) = (0.0, 0u64, 0u64);
    for k in 1..=cfg.rounds {
        let global = state.params;
        let mut msi = RoundMsi::default();
        let mut reports = Vec::with_capacity(m);
        for (i, set) in sets.iter().enumerate() {
            let report = match &problems[i] {
                None => gpd_device_report(set, &global)?,
                Some(prob) => {
                    let grad = match prob.value_grad(&global) {
                        Ok((_, g)) => [-g[0], -g[1]],
                        Err(_) => [f64::NAN, f64::NAN],
                    };
                    GpdReport { sigma: global.sigma, xi: global.xi, grad, count: set.len() }
                }
            };
            let msg = channel.transmit(MsiMessage::upload(i, MsiKind::GpdGradient, Payload::Gpd(report)));
            msi.push(msg);
            reports.push(report);
        }
        let next = state.advance(&reports)?;
        let summary = GpdReport { sigma: next.sigma, xi: next.xi, grad: [0.0, 0.0], count: pooled.len() };
        msi.push(channel.transmit(MsiMessage::broadcast(MsiKind::GpdGradient, Payload::Gpd(summary))));
        let timing = price_round(Split::HelperDevice, m, &msi, &cfg.links, &cfg.compute, &mut price_rng);
        time += timing.total_s;
        up += msi.uplink_bits();
        down += msi.downlink_bits();
        let (ll, _) = gpd_loglik_grad(&pooled, &next)?;
        out.records.push(MetricsRecord {
            round: k,
            sim_time_s: time,
            cum_bits_up: up,
            cum_bits_down: down,
            train_loss: ll.is_finite().then_some(-ll),
            test_loss: None,
            test_acc: None,
            forks: None,
            protocol: ProtocolKind::Extfl.name().to_string(),
        });
        out.timings.push(timing);
        out.messages.push(msi);
    }
    out.final_params = vec![vec![state.params.sigma, state.params.xi]];
    Ok(out)
}

/// Result of a blockchain-assisted run.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockFlOutcome {
    pub output: RunOutput,
    /// Block round per checkpoint, in order.
    pub blocks: Vec<BlockRoundOutcome>,
    /// First simulated time at which the training loss reached the target.
    pub completion_latency_s: Option<f64>,
}

/// Weight-exchanging FL through miners. At each checkpoint every device
/// uploads its weights to miner `i mod N_M`; the block carries all of them,
/// each miner computes the sample-weighted average (possibly distorted by
/// a malfunction) and serves it to its own devices. Losses are reported for
/// the undistorted average.
pub(crate) fn run_blockfl(bcfg: &BlockFlConfig, cfg: &ExperimentConfig) -> Result<BlockFlOutcome> {
    bcfg.validate()?;
    let prepared = prepare(cfg)?;
    let eval = Evaluator::new(&prepared);
    let task = &prepared.task;
    let hp = &cfg.protocol.hyper;
    let m = task.device_count();
    let sizes: Vec<f64> = (0..m).map(|i| task.sample_count(i) as f64).collect();
    let total: f64 = sizes.iter().sum();
    let weights: Vec<f64> =
        if total > 0.0 { sizes.iter().map(|n| n / total).collect() } else { vec![1.0 / m as f64; m] };
    let mut params: Vec<Vec<f64>> = vec![prepared.init.clone(); m];
    let mut honest = prepared.init.clone();
    let mut channel = EdgeChannel::from_config(cfg);
    let mut price_rng = stream(cfg.seed, "pricing");
    let mut block_rng = stream(cfg.seed, "blocks");
    let mut fault_rng = stream(cfg.seed, "malfunction");
    let mut out = RunOutput { records: Vec::new(), final_params: Vec::new(), timings: Vec::new(), messages: Vec::new() };
    let mut blocks = Vec::new();
    let (mut time, mut up, mut down, mut forks) = (0.0, 0u64, 0u64, 0u64);
    for k in 1..=cfg.rounds {
        let eta = hp.eta_at(ProtocolKind::Favg, k);
        for (i, w) in params.iter_mut().enumerate() {
            let (_, g) = task.loss_grad(i, w, Sample::MiniBatch { round: k });
            w.iter_mut().zip(&g).for_each(|(a, b)| *a -= eta * b);
        }
        let mut msi = RoundMsi::default();
        let mut block_s = 0.0;
        if hp.is_checkpoint(k) {
            let mut avg = vec![0.0; honest.len()];
            for (i, w) in params.iter().enumerate() {
                let got = channel.transmit(MsiMessage::upload(i, MsiKind::Weights, Payload::Vector(w.clone())));
                for (a, v) in avg.iter_mut().zip(got.payload.values()) {
                    *a += weights[i] * v;
                }
                msi.push(got);
            }
            let (copies, _) = apply_malfunction(&avg, bcfg.n_miners, bcfg.malfunction.as_ref(), &mut fault_rng);
            for (i, w) in params.iter_mut().enumerate() {
                let got = channel.transmit(MsiMessage::to_device(
                    i,
                    MsiKind::Weights,
                    Payload::Vector(copies[miner_of(i, bcfg.n_miners)].clone()),
                ));
                *w = got.payload.values();
                msi.push(got);
            }
            honest = avg;
            let block = simulate_block_round(bcfg, &mut block_rng);
            block_s = block.total_s;
            forks += u64::from(block.forked);
            blocks.push(block);
        }
        let timing = price_round(Split::HelperDevice, m, &msi, &cfg.links, &cfg.compute, &mut price_rng);
        time += timing.total_s + block_s;
        up += msi.uplink_bits();
        down += msi.downlink_bits();
        let reported: Vec<&[f64]> =
            if hp.is_checkpoint(k) { vec![honest.as_slice(); m] } else { params.iter().map(|w| w.as_slice()).collect() };
        let (test_loss, test_acc) = eval.test(&reported);
        out.records.push(MetricsRecord {
            round: k,
            sim_time_s: time,
            cum_bits_up: up,
            cum_bits_down: down,
            train_loss: eval.train_loss(&reported),
            test_loss,
            test_acc,
            forks: Some(forks),
            protocol: ProtocolKind::Favg.name().to_string(),
        });
        out.timings.push(timing);
        out.messages.push(msi);
    }
    out.final_params = params;
    let completion_latency_s = cfg.target_loss.and_then(|t| crate::metrics::completion_latency(&out.records, t));
    Ok(BlockFlOutcome { output: out, blocks, completion_latency_s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;
    use crate::federation::Lossless;

    fn base(kind: &str, extra: &str) -> ExperimentConfig {
        let text = format!(
            r#"{{
                "model": {{"layer_widths": [2, 8, 3]}},
                "data": {{"source": {{"kind": "blobs", "labels": 3, "per_class": 30, "dim": 2}}, "devices": 3, "test_per_class": 10}},
                "protocol": {{"kind": "{kind}", "hyper": {{"eta": 0.2}}}},
                "rounds": 6{extra}
            }}"#
        );
        parse_config_str(&text).unwrap()
    }

    #[test]
    fn zero_rounds_is_empty() {
        let mut cfg = base("favg", "");
        cfg.rounds = 0;
        assert!(run_experiment(&cfg).unwrap().is_empty());
    }

    #[test]
    fn deterministic_and_monotone() {
        for kind in ["csgd", "esgd", "favg", "fsvrg", "cd", "fd", "fjd", "dsgd", "gadmm"] {
            let cfg = base(kind, r#", "links": {"loss_prob": 0.2}, "compute": {"straggle": {"kind": "exponential", "mean_s": 0.1}}"#);
            let a = run_experiment(&cfg).unwrap();
            assert_eq!(a, run_experiment(&cfg).unwrap(), "{kind}");
            for w in a.windows(2) {
                assert!(w[1].sim_time_s >= w[0].sim_time_s);
                assert!(w[1].cum_bits_up >= w[0].cum_bits_up && w[1].cum_bits_down >= w[0].cum_bits_down);
            }
            assert_eq!(a.len(), 6);
        }
    }

    #[test]
    fn cumulative_bits_match_message_log() {
        let cfg = base("fsvrg", "");
        let out = run_experiment_detailed(&cfg).unwrap();
        let up: u64 = out.messages.iter().flat_map(|m| &m.messages).filter(|m| m.is_uplink()).map(crate::netsim::payload_bits).sum();
        let down: u64 = out.messages.iter().flat_map(|m| &m.messages).filter(|m| !m.is_uplink()).map(crate::netsim::payload_bits).sum();
        let last = out.records.last().unwrap();
        assert_eq!((last.cum_bits_up, last.cum_bits_down), (up, down));
    }

    #[test]
    fn plain_channel_reproduces_protocol_engine() {
        for kind in ["favg", "fd", "dsgd"] {
            let cfg = base(kind, "");
            let out = run_experiment_detailed(&cfg).unwrap();
            let p = prepare(&cfg).unwrap();
            let pk = cfg.protocol.kind;
            let mix = (pk == ProtocolKind::Dsgd).then(|| cfg.protocol.mixing.build(3).unwrap());
            let mut devs = init_devices(pk, &p.task, &p.init).unwrap();
            for k in 1..=cfg.rounds {
                run_round(pk, &p.task, &mut devs, mix.as_ref(), &cfg.protocol.hyper, k, &mut Lossless).unwrap();
            }
            let want: Vec<Vec<f64>> = devs.into_iter().map(|d| d.params).collect();
            assert_eq!(out.final_params, want, "{kind}");
        }
    }

    #[test]
    fn halving_uplink_rate_doubles_uplink_time() {
        let cfg = base("favg", "");
        let mut slow = cfg.clone();
        slow.links.uplink_bps /= 2.0;
        let a = run_experiment_detailed(&cfg).unwrap();
        let b = run_experiment_detailed(&slow).unwrap();
        for (ta, tb) in a.timings.iter().zip(&b.timings) {
            for (x, y) in ta.uplink_s.iter().zip(&tb.uplink_s) {
                assert!((y - 2.0 * x).abs() <= 1e-12 * y);
            }
        }
    }

    #[test]
    fn quantized_uplink_uses_level_bits() {
        let cfg = base("favg", r#", "quantization": {"enabled": true}, "links": {"capacity_bits_per_sample": 5}"#);
        let out = run_experiment_detailed(&cfg).unwrap();
        for msg in out.messages.iter().flat_map(|m| &m.messages) {
            let want = if msg.is_uplink() { level_bits(9) } else { 32 };
            assert_eq!(msg.element_bits, want);
        }
    }

    #[test]
    fn extfl_run_fits_tail() {
        let text = r#"{"data": {"devices": 4}, "protocol": {"kind": "extfl"},
            "evt": {"arrival_rate": 0.4, "service_rate": 0.5, "horizon": 20000, "threshold": 3}, "rounds": 30}"#;
        let cfg = parse_config_str(text).unwrap();
        let recs = run_experiment(&cfg).unwrap();
        assert_eq!(recs.len(), 30);
        assert_eq!(recs[0].cum_bits_up, 4 * 5 * 32);
        let first = recs[0].train_loss.unwrap();
        let last = recs.last().unwrap().train_loss.unwrap();
        assert!(last < first);
    }

    #[test]
    fn blockfl_degenerate_chain_adds_pure_mining() {
        let mut cfg = base("favg", "");
        cfg.blockfl = Some(BlockFlConfig { t_bp_s: 0.0, rollback_s: 0.0, t_wait_s: 0.0, ..BlockFlConfig::default() });
        let b = cfg.blockfl.clone().unwrap();
        let run = run_blockfl(&b, &cfg).unwrap();
        let fl: f64 = run.output.timings.iter().map(|t| t.total_s).sum();
        let mining: f64 = run.blocks.iter().map(|o| o.mining_s).sum();
        let last = run.output.records.last().unwrap().sim_time_s;
        assert!((last - (fl + mining)).abs() < 1e-9 * last);
        assert_eq!(run, run_blockfl(&b, &cfg).unwrap());
        assert_eq!(run.output.records.last().unwrap().forks, Some(0));
    }
}
