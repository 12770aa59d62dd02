use nalgebra::{DMatrix, DVector};

use super::distill::{jacobian_matching, logit_matching, peer_average, teacher_matching, RegKind};
use super::mixing::MixingMatrix;
use super::msi::{Channel, MsiKind, MsiMessage, Payload, RoundMsi};
use super::objective::{LocalObjective, NnTask, Sample};
use super::{AccumulatorPolicy, Aux, DeviceState, HyperParams, ProtocolKind};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, Batch, LabelTable, ParamVector};

fn check_devices(obj: &dyn LocalObjective, devices: &[DeviceState]) -> Result<()> {
    if devices.is_empty() {
        return Err(Error::Empty("device set"));
    }
    if devices.len() != obj.device_count() {
        return Err(invalid(format!("{} device states for {} shards", devices.len(), obj.device_count())));
    }
    for (i, d) in devices.iter().enumerate() {
        if d.id != i {
            return Err(invalid(format!("device at position {i} has id {}", d.id)));
        }
        if d.params.len() != obj.dim() {
            return Err(Error::DimensionMismatch { expected: obj.dim(), actual: d.params.len() });
        }
    }
    Ok(())
}

fn nn_task(obj: &dyn LocalObjective, kind: ProtocolKind) -> Result<&NnTask> {
    obj.as_nn().ok_or_else(|| invalid(format!("{kind} needs a classification task")))
}

/// Elementwise mean in device order. A single vector is returned unchanged.
fn mean<V: AsRef<[f64]>>(vs: &[V]) -> Vec<f64> {
    let mut acc = vs[0].as_ref().to_vec();
    for v in &vs[1..] {
        for (a, b) in acc.iter_mut().zip(v.as_ref()) {
            *a += b;
        }
    }
    if vs.len() > 1 {
        let m = vs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
    }
    acc
}

fn sgd(w: &mut [f64], g: &[f64], eta: f64) {
    for (wi, gi) in w.iter_mut().zip(g) {
        *wi -= eta * gi;
    }
}

fn add_into(g: &mut [f64], r: &[f64]) {
    for (a, b) in g.iter_mut().zip(r) {
        *a += b;
    }
}

fn minibatch_grads(obj: &dyn LocalObjective, devices: &[DeviceState], k: usize) -> Vec<Vec<f64>> {
    devices.iter().map(|d| obj.loss_grad(d.id, &d.params, Sample::MiniBatch { round: k }).1).collect()
}

fn vector_of(msg: &MsiMessage) -> Vec<f64> {
    msg.payload.as_vector().expect("vector payload").to_vec()
}

fn upload_vectors(
    channel: &mut dyn Channel,
    msi: &mut RoundMsi,
    kind: MsiKind,
    vectors: impl IntoIterator<Item = Vec<f64>>,
) -> Vec<Vec<f64>> {
    vectors
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let got = channel.transmit(MsiMessage::upload(i, kind, Payload::Vector(v)));
            let out = vector_of(&got);
            msi.push(got);
            out
        })
        .collect()
}

fn broadcast_vector(channel: &mut dyn Channel, msi: &mut RoundMsi, kind: MsiKind, v: Vec<f64>) -> Vec<f64> {
    let got = channel.transmit(MsiMessage::broadcast(kind, Payload::Vector(v)));
    let out = vector_of(&got);
    msi.push(got);
    out
}

/// Helper-side averaged gradient step shared by CSGD and FAvg checkpoints.
fn averaged_gradient_step(
    grads: Vec<Vec<f64>>,
    devices: &mut [DeviceState],
    eta: f64,
    channel: &mut dyn Channel,
    msi: &mut RoundMsi,
) {
    let received = upload_vectors(channel, msi, MsiKind::Gradient, grads);
    let g_bar = broadcast_vector(channel, msi, MsiKind::Gradient, mean(&received));
    for d in devices.iter_mut() {
        sgd(&mut d.params, &g_bar, eta);
    }
}

/// Fully synchronous SGD: every device applies the mean gradient.
pub fn csgd_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    check_devices(obj, devices)?;
    let eta = hp.eta_at(ProtocolKind::Csgd, k);
    let grads = minibatch_grads(obj, devices, k);
    let mut msi = RoundMsi::default();
    averaged_gradient_step(grads, devices, eta, channel, &mut msi);
    Ok(msi)
}

/// Elastic averaging: `w <- (1 - alpha) w - eta g + alpha w_hat` with
/// `w_hat <- (1 - beta) w_hat + beta mean(w)`.
pub fn esgd_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    check_devices(obj, devices)?;
    let prev = match &devices[0].aux {
        Aux::Anchor { w_hat } => w_hat.clone(),
        _ => return Err(invalid("esgd device state lacks an anchor")),
    };
    let eta = hp.eta_at(ProtocolKind::Esgd, k);
    let grads = minibatch_grads(obj, devices, k);
    let mut msi = RoundMsi::default();
    let received = upload_vectors(channel, &mut msi, MsiKind::Weights, devices.iter().map(|d| d.params.clone()));
    let w_bar = mean(&received);
    let w_hat: Vec<f64> = prev.iter().zip(&w_bar).map(|(p, m)| (1.0 - hp.beta) * p + hp.beta * m).collect();
    let w_hat = broadcast_vector(channel, &mut msi, MsiKind::Weights, w_hat);
    let a = hp.alpha;
    for (d, g) in devices.iter_mut().zip(&grads) {
        for ((w, gi), h) in d.params.iter_mut().zip(g).zip(&w_hat) {
            *w = (1.0 - a) * *w - eta * gi + a * h;
        }
        d.aux = Aux::Anchor { w_hat: w_hat.clone() };
    }
    Ok(msi)
}

/// Federated averaging: mean-gradient step at checkpoints, local SGD between.
pub fn favg_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    check_devices(obj, devices)?;
    let eta = hp.eta_at(ProtocolKind::Favg, k);
    let grads = minibatch_grads(obj, devices, k);
    let mut msi = RoundMsi::default();
    if hp.is_checkpoint(k) {
        averaged_gradient_step(grads, devices, eta, channel, &mut msi);
    } else {
        for (d, g) in devices.iter_mut().zip(&grads) {
            sgd(&mut d.params, g, eta);
        }
    }
    Ok(msi)
}

/// Federated SVRG. At checkpoints the helper refreshes `w_hat` from the
/// uploaded weights, collects full-shard gradients at `w_hat`, and devices
/// take the variance-reduced step `w - eta (g_bar(w_hat) + g(w) - g(w_hat))`.
pub fn fsvrg_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    check_devices(obj, devices)?;
    let eta = hp.eta_at(ProtocolKind::Fsvrg, k);
    let mut msi = RoundMsi::default();
    if !hp.is_checkpoint(k) {
        let grads = minibatch_grads(obj, devices, k);
        for (d, g) in devices.iter_mut().zip(&grads) {
            sgd(&mut d.params, g, eta);
        }
        return Ok(msi);
    }
    let prev = match &devices[0].aux {
        Aux::Anchor { w_hat } => w_hat.clone(),
        _ => return Err(invalid("fsvrg device state lacks an anchor")),
    };
    let received = upload_vectors(channel, &mut msi, MsiKind::Weights, devices.iter().map(|d| d.params.clone()));
    let counts: Vec<f64> = (0..devices.len()).map(|i| obj.sample_count(i) as f64).collect();
    let total: f64 = counts.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / devices.len() as f64; devices.len()]
    };
    let mut w_hat = prev.clone();
    for (j, h) in w_hat.iter_mut().enumerate() {
        let delta: f64 = received.iter().zip(&weights).map(|(w, p)| p * (w[j] - prev[j])).sum();
        *h += delta;
    }
    let w_hat = broadcast_vector(channel, &mut msi, MsiKind::Weights, w_hat);
    let anchor_grads: Vec<Vec<f64>> = devices.iter().map(|d| obj.loss_grad(d.id, &w_hat, Sample::Full).1).collect();
    let received = upload_vectors(channel, &mut msi, MsiKind::Gradient, anchor_grads);
    let g_bar = broadcast_vector(channel, &mut msi, MsiKind::Gradient, mean(&received));
    let sample = Sample::MiniBatch { round: k };
    for d in devices.iter_mut() {
        let g_w = obj.loss_grad(d.id, &d.params, sample).1;
        let g_hat = obj.loss_grad(d.id, &w_hat, sample).1;
        for (((w, gb), a), b) in d.params.iter_mut().zip(&g_bar).zip(&g_w).zip(&g_hat) {
            *w -= eta * (gb + (a - b));
        }
        d.aux = Aux::Anchor { w_hat: w_hat.clone() };
    }
    Ok(msi)
}

/// Co-distillation. At checkpoints devices upload weights, store the
/// broadcast average as teacher, and take a step regularized toward the
/// teacher's temperature-softmax outputs on their own batch.
pub fn cd_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    check_devices(obj, devices)?;
    let nn = nn_task(obj, ProtocolKind::Cd)?;
    let eta = hp.eta_at(ProtocolKind::Cd, k);
    let checkpoint = hp.is_checkpoint(k);
    let mut msi = RoundMsi::default();
    if checkpoint {
        let received = upload_vectors(channel, &mut msi, MsiKind::Weights, devices.iter().map(|d| d.params.clone()));
        let avg = broadcast_vector(channel, &mut msi, MsiKind::Weights, mean(&received));
        for d in devices.iter_mut() {
            d.aux = Aux::Teacher { params: avg.clone() };
        }
    }
    let regularize = checkpoint || hp.cd_stale_teacher;
    let sample = Sample::MiniBatch { round: k };
    for d in devices.iter_mut() {
        let teacher = match &d.aux {
            Aux::Teacher { params } => params,
            _ => return Err(invalid("cd device state lacks a teacher")),
        };
        let Some(batch) = nn.batch(d.id, sample) else { continue };
        let (_, mut g) = nn::loss_grad_raw(nn.spec(), &d.params, &batch);
        if regularize {
            let (_, r) = teacher_matching(nn.spec(), &d.params, teacher, &batch, hp.temperature, hp.reg_kind)?;
            add_into(&mut g, &r);
        }
        sgd(&mut d.params, &g, eta);
    }
    Ok(msi)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TableKind {
    Logit,
    Jacobian,
}

fn output_rows(nn: &NnTask, w: &[f64], batch: &Batch, t: f64, kind: TableKind) -> Result<Vec<Vec<f64>>> {
    let p = ParamVector::new(nn.spec().clone(), w.to_vec())?;
    match kind {
        TableKind::Logit => nn::softmax_outputs(&p, batch, t),
        TableKind::Jacobian => nn::jacobian_outputs(&p, batch, t),
    }
}

fn distill_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
    table: TableKind,
) -> Result<RoundMsi> {
    let proto = if table == TableKind::Logit { ProtocolKind::Fd } else { ProtocolKind::Fjd };
    check_devices(obj, devices)?;
    if devices.len() < 2 {
        return Err(invalid(format!("{proto} needs at least 2 devices")));
    }
    if table == TableKind::Jacobian && hp.reg_kind != RegKind::Mse {
        return Err(invalid("fjd supports only the mse regularizer"));
    }
    let nn = nn_task(obj, proto)?;
    let eta = hp.eta_at(proto, k);
    let checkpoint = hp.is_checkpoint(k);
    let sample = Sample::MiniBatch { round: k };
    let batches: Vec<Option<Batch>> = devices.iter().map(|d| nn.batch(d.id, sample)).collect();

    for (d, batch) in devices.iter_mut().zip(&batches) {
        let Aux::Distill { accumulator, .. } = &mut d.aux else {
            return Err(invalid(format!("{proto} device state lacks an accumulator")));
        };
        if hp.accumulator == AccumulatorPolicy::CheckpointOnly {
            if !checkpoint {
                continue;
            }
            accumulator.reset();
        }
        if let Some(b) = batch {
            for (y, row) in b.labels().iter().zip(output_rows(nn, &d.params, b, hp.temperature, table)?) {
                accumulator.add(*y, &row);
            }
        }
    }

    let mut msi = RoundMsi::default();
    if checkpoint {
        let kind = if table == TableKind::Logit { MsiKind::LogitTable } else { MsiKind::JacobianTable };
        let mut received: Vec<LabelTable> = Vec::with_capacity(devices.len());
        for d in devices.iter_mut() {
            let Aux::Distill { accumulator, .. } = &mut d.aux else { unreachable!() };
            let local = accumulator.mean_table();
            accumulator.reset();
            let got = channel.transmit(MsiMessage::upload(d.id, kind, Payload::Table(local)));
            received.push(got.payload.as_table().expect("table payload").clone());
            msi.push(got);
        }
        for d in devices.iter_mut() {
            let global = peer_average(&received, d.id)?;
            let got = channel.transmit(MsiMessage::to_device(d.id, kind, Payload::Table(global)));
            let table = got.payload.as_table().expect("table payload").clone();
            msi.push(got);
            if let Aux::Distill { global, .. } = &mut d.aux {
                *global = Some(table);
            }
        }
    }

    for (d, batch) in devices.iter_mut().zip(&batches) {
        let Some(b) = batch else { continue };
        let (_, mut g) = nn::loss_grad_raw(nn.spec(), &d.params, b);
        if let Aux::Distill { global: Some(target), .. } = &d.aux {
            let (_, r) = match table {
                TableKind::Logit => logit_matching(nn.spec(), &d.params, b, target, hp.temperature, hp.reg_kind)?,
                TableKind::Jacobian => jacobian_matching(nn.spec(), &d.params, b, target, hp.temperature)?,
            };
            add_into(&mut g, &r);
        }
        sgd(&mut d.params, &g, eta);
    }
    Ok(msi)
}

/// Federated distillation: per-label output tables are exchanged at
/// checkpoints; each device regularizes toward the mean of its peers' tables.
pub fn fd_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    distill_round(obj, devices, hp, k, channel, TableKind::Logit)
}

/// As [`fd_round`] with per-label input-Jacobian tables.
pub fn fjd_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    distill_round(obj, devices, hp, k, channel, TableKind::Jacobian)
}

/// Decentralized SGD: `w_i <- sum_j a_ji w_j / sum_j a_ji - eta g(w_i)`.
pub fn dsgd_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    mixing: &MixingMatrix,
    hp: &HyperParams,
    k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    check_devices(obj, devices)?;
    let m = devices.len();
    if mixing.size() != m {
        return Err(invalid(format!("mixing matrix is {0}x{0} for {m} devices", mixing.size())));
    }
    let eta = hp.eta_at(ProtocolKind::Dsgd, k);
    let grads = minibatch_grads(obj, devices, k);
    let mut msi = RoundMsi::default();
    let mut heard: Vec<Option<Vec<f64>>> = vec![None; m];
    for d in devices.iter() {
        let peers = mixing.neighbors(d.id);
        if peers.is_empty() {
            continue;
        }
        let got = channel.transmit(MsiMessage::to_peers(d.id, peers, MsiKind::Weights, Payload::Vector(d.params.clone()), 0));
        heard[d.id] = Some(vector_of(&got));
        msi.push(got);
    }
    let mixed: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut acc: Option<Vec<f64>> = None;
            let mut norm = 0.0;
            for j in 0..m {
                let a = mixing.get(j, i);
                if a == 0.0 {
                    continue;
                }
                let wj = if j == i { &devices[i].params } else { heard[j].as_ref().expect("linked device sent") };
                norm += a;
                match &mut acc {
                    Some(s) => s.iter_mut().zip(wj).for_each(|(x, y)| *x += a * y),
                    None => acc = Some(wj.iter().map(|y| a * y).collect()),
                }
            }
            acc.expect("positive diagonal").into_iter().map(|x| x / norm).collect()
        })
        .collect();
    for ((d, w), g) in devices.iter_mut().zip(mixed).zip(&grads) {
        d.params = w;
        sgd(&mut d.params, g, eta);
    }
    Ok(msi)
}

struct AdmmView<'a> {
    lambda_left: Option<&'a [f64]>,
    lambda_right: Option<&'a [f64]>,
    left: Option<&'a [f64]>,
    right: Option<&'a [f64]>,
}

fn admm_view(d: &DeviceState) -> Result<AdmmView<'_>> {
    match &d.aux {
        Aux::Admm { lambda_left, lambda_right, left, right } => Ok(AdmmView {
            lambda_left: lambda_left.as_deref(),
            lambda_right: lambda_right.as_deref(),
            left: left.as_deref(),
            right: right.as_deref(),
        }),
        _ => Err(invalid("gadmm device state lacks dual variables")),
    }
}

/// Minimizes `f_i(w) - lambda_left'w + lambda_right'w + rho/2 (|w - left|^2 + |w - right|^2)`.
fn admm_solve(obj: &dyn LocalObjective, d: &DeviceState, hp: &HyperParams) -> Result<Vec<f64>> {
    let v = admm_view(d)?;
    let n = d.params.len();
    let rho = hp.rho;
    let links = usize::from(v.left.is_some()) + usize::from(v.right.is_some());
    let mut rhs_extra = vec![0.0; n];
    if let Some(l) = v.lambda_left {
        add_into(&mut rhs_extra, l);
    }
    if let Some(l) = v.lambda_right {
        rhs_extra.iter_mut().zip(l).for_each(|(a, b)| *a -= b);
    }
    for nb in [v.left, v.right].into_iter().flatten() {
        rhs_extra.iter_mut().zip(nb).for_each(|(a, b)| *a += rho * b);
    }
    if let Some((a, b)) = obj.quadratic(d.id) {
        let lhs = a + DMatrix::identity(n, n) * (links as f64 * rho);
        let rhs = b + DVector::from_vec(rhs_extra);
        let sol = lhs.lu().solve(&rhs).ok_or_else(|| invalid("gadmm local system is singular"))?;
        return Ok(sol.iter().copied().collect());
    }
    let lr = hp.inner_lr.unwrap_or(hp.eta);
    let mut w = d.params.clone();
    for _ in 0..hp.inner_max_iters {
        let (_, mut g) = obj.loss_grad(d.id, &w, Sample::Full);
        for ((gi, wi), r) in g.iter_mut().zip(&w).zip(&rhs_extra) {
            *gi += links as f64 * rho * wi - r;
        }
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gadmm inner gradient"));
        }
        if norm <= hp.inner_tol {
            break;
        }
        sgd(&mut w, &g, lr);
    }
    Ok(w)
}

fn chain_neighbors(i: usize, m: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(2);
    if i > 0 {
        v.push(i - 1);
    }
    if i + 1 < m {
        v.push(i + 1);
    }
    v
}

/// Group ADMM on a chain. Even positions (0-based) are heads and update
/// first; odd positions then update with the fresh head values; every
/// device finally applies `lambda_e += rho (w_i - w_{i+1})` to its edges.
pub fn gadmm_round(
    obj: &dyn LocalObjective,
    devices: &mut [DeviceState],
    hp: &HyperParams,
    _k: usize,
    channel: &mut dyn Channel,
) -> Result<RoundMsi> {
    check_devices(obj, devices)?;
    let m = devices.len();
    if m < 2 {
        return Err(invalid("gadmm needs at least 2 devices"));
    }
    let mut msi = RoundMsi::default();
    for phase in 0..2u8 {
        let group: Vec<usize> = (0..m).filter(|i| i % 2 == usize::from(phase)).collect();
        let solved: Vec<Vec<f64>> = group.iter().map(|&i| admm_solve(obj, &devices[i], hp)).collect::<Result<_>>()?;
        for (&i, w) in group.iter().zip(solved) {
            devices[i].params = w;
            let peers = chain_neighbors(i, m);
            let got = channel.transmit(MsiMessage::to_peers(
                i,
                peers.clone(),
                MsiKind::Weights,
                Payload::Vector(devices[i].params.clone()),
                phase,
            ));
            let heard = vector_of(&got);
            msi.push(got);
            for j in peers {
                if let Aux::Admm { left, right, .. } = &mut devices[j].aux {
                    if j + 1 == i {
                        *right = Some(heard.clone());
                    } else {
                        *left = Some(heard.clone());
                    }
                }
            }
        }
    }
    let rho = hp.rho;
    for d in devices.iter_mut() {
        let w = d.params.clone();
        if let Aux::Admm { lambda_left, lambda_right, left, right } = &mut d.aux {
            if let (Some(lam), Some(r)) = (lambda_right.as_mut(), right.as_ref()) {
                lam.iter_mut().zip(&w).zip(r).for_each(|((l, a), b)| *l += rho * (a - b));
            }
            if let (Some(lam), Some(l)) = (lambda_left.as_mut(), left.as_ref()) {
                lam.iter_mut().zip(l).zip(&w).for_each(|((x, a), b)| *x += rho * (a - b));
            }
        }
    }
    Ok(msi)
}
