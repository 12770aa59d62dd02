//! Tail modeling with the generalized Pareto distribution.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::federation::GpdReport;
use crate::rng::substream;

/// Shape values this close to zero use the exponential limit.
const XI_ZERO: f64 = 1e-8;
const SIGMA_MIN: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpdParams {
    pub sigma: f64,
    pub xi: f64,
}

impl GpdParams {
    pub fn new(sigma: f64, xi: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && xi.is_finite()) {
            return Err(invalid(format!("need sigma > 0 and finite xi, got ({sigma}, {xi})")));
        }
        Ok(GpdParams { sigma, xi })
    }

    /// Upper end of the support (infinite for `xi >= 0`).
    pub fn upper(&self) -> f64 {
        if self.xi < 0.0 {
            -self.sigma / self.xi
        } else {
            f64::INFINITY
        }
    }

    fn project(self) -> Self {
        GpdParams { sigma: self.sigma.max(SIGMA_MIN), xi: self.xi }
    }

    fn dist(&self, o: &GpdParams) -> f64 {
        ((self.sigma - o.sigma).powi(2) + (self.xi - o.xi).powi(2)).sqrt()
    }
}

/// Survival function `(1 + xi x / sigma)^(-1/xi)`, 0 beyond the support.
fn survival(x: f64, p: &GpdParams) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if p.xi.abs() < XI_ZERO {
        return (-x / p.sigma).exp();
    }
    let t = 1.0 + p.xi * x / p.sigma;
    if t <= 0.0 {
        0.0
    } else {
        (-t.ln() / p.xi).exp()
    }
}

/// `d survival / d(sigma, xi)`.
fn survival_grad(x: f64, p: &GpdParams) -> [f64; 2] {
    if x <= 0.0 {
        return [0.0, 0.0];
    }
    let s = survival(x, p);
    if s == 0.0 {
        return [0.0, 0.0];
    }
    let (sg, xi) = (p.sigma, p.xi);
    if xi.abs() < XI_ZERO {
        return [s * x / (sg * sg), s * x * x / (2.0 * sg * sg)];
    }
    let t = 1.0 + xi * x / sg;
    [s * x / (sg * sg * t), s * (t.ln() / (xi * xi) - x / (sg * xi * t))]
}

/// GPD distribution function. Saturates at 1 past the support end.
pub fn gpd_cdf(x: f64, p: &GpdParams) -> f64 {
    1.0 - survival(x, p)
}

/// `exp(G(x - m) - 1)` with `G` continued below zero, so `xi = 0` gives
/// the Gumbel form `exp(-exp(-(x - m) / sigma))`.
pub fn gev_cdf(x: f64, m: f64, p: &GpdParams) -> f64 {
    let z = x - m;
    let g = if p.xi.abs() < XI_ZERO {
        1.0 - (-z / p.sigma).exp()
    } else {
        let t = 1.0 + p.xi * z / p.sigma;
        if t <= 0.0 {
            return if p.xi > 0.0 { 0.0 } else { 1.0 };
        }
        1.0 - (-t.ln() / p.xi).exp()
    };
    (g - 1.0).exp()
}

/// Log density and its gradient at one point; `None` outside the support.
fn log_density_grad(x: f64, p: &GpdParams) -> Option<(f64, [f64; 2])> {
    if x < 0.0 {
        return None;
    }
    let (sg, xi) = (p.sigma, p.xi);
    if xi.abs() < XI_ZERO {
        let ld = -sg.ln() - x / sg;
        return Some((ld, [-1.0 / sg + x / (sg * sg), x * x / (2.0 * sg * sg) - x / sg]));
    }
    let u = xi * x / sg;
    if 1.0 + u <= 0.0 {
        return None;
    }
    let lt = u.ln_1p();
    let t = 1.0 + u;
    let ld = -sg.ln() - (1.0 / xi + 1.0) * lt;
    let d_sigma = -1.0 / sg + (1.0 + xi) * x / (sg * sg * t);
    let d_xi = lt / (xi * xi) - (1.0 / xi + 1.0) * x / (sg * t);
    Some((ld, [d_sigma, d_xi]))
}

/// Mean log density of `samples` and its gradient in `(sigma, xi)`. A sample
/// outside the support gives `-inf` and a zero gradient.
pub fn gpd_loglik_grad(samples: &[f64], p: &GpdParams) -> Result<(f64, [f64; 2])> {
    if samples.is_empty() {
        return Err(Error::Empty("exceedance samples"));
    }
    let mut ll = 0.0;
    let mut g = [0.0, 0.0];
    for &x in samples {
        match log_density_grad(x, p) {
            Some((l, d)) => {
                ll += l;
                g[0] += d[0];
                g[1] += d[1];
            }
            None => return Ok((f64::NEG_INFINITY, [0.0, 0.0])),
        }
    }
    let n = samples.len() as f64;
    Ok((ll / n, [g[0] / n, g[1] / n]))
}

/// Inverse-CDF draws.
pub fn sample_gpd<R: Rng + ?Sized>(p: &GpdParams, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if p.xi.abs() < XI_ZERO {
                -p.sigma * (-u).ln_1p()
            } else {
                p.sigma / p.xi * ((-p.xi * (-u).ln_1p()).exp() - 1.0)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpdFit {
    pub params: GpdParams,
    /// Mean log-likelihood (MLE) or entropic Wasserstein distance.
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn norm2(g: [f64; 2]) -> f64 {
    (g[0] * g[0] + g[1] * g[1]).sqrt()
}

const MAX_HALVINGS: usize = 60;

/// Projected gradient ascent on the mean log-likelihood with backtracking.
/// A start outside the support is returned unchanged with objective `-inf`.
pub fn fit_gpd_mle(samples: &[f64], init: GpdParams, steps: usize, lr: f64) -> Result<GpdFit> {
    if !(lr > 0.0) {
        return Err(invalid("learning rate must be positive"));
    }
    let mut p = GpdParams::new(init.sigma, init.xi)?;
    let (mut ll, mut g) = gpd_loglik_grad(samples, &p)?;
    let mut step = lr;
    let mut it = 0;
    while it < steps && ll.is_finite() && norm2(g) > 1e-12 {
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = GpdParams { sigma: p.sigma + step * g[0], xi: p.xi + step * g[1] }.project();
            let (ll2, g2) = gpd_loglik_grad(samples, &cand)?;
            let gain = g[0] * (cand.sigma - p.sigma) + g[1] * (cand.xi - p.xi);
            if ll2.is_finite() && ll2 >= ll + 1e-4 * gain {
                p = cand;
                ll = ll2;
                g = g2;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        it += 1;
        if !accepted {
            break;
        }
        step = (step * 2.0).min(lr * 1e3);
    }
    Ok(GpdFit { params: p, objective: ll, grad_norm: norm2(g), iterations: it })
}

/// Values above `threshold` minus the threshold, from one device.
#[derive(Clone, Debug, PartialEq)]
pub struct ExceedanceSet {
    pub threshold: f64,
    pub samples: Vec<f64>,
    pub owner: usize,
}

impl ExceedanceSet {
    pub fn from_trace(trace: &QueueTrace, threshold: f64, owner: usize) -> Self {
        let samples =
            trace.iter().map(|&q| q as f64).filter(|&q| q > threshold).map(|q| q - threshold).collect();
        ExceedanceSet { threshold, samples, owner }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Device side of a federated round: gradient of the local mean
/// log-likelihood at the broadcast parameters. Non-finite gradients signal
/// that the parameters left the local support.
pub fn gpd_device_report(set: &ExceedanceSet, global: &GpdParams) -> Result<GpdReport> {
    let grad = if set.is_empty() {
        [0.0, 0.0]
    } else {
        let (ll, g) = gpd_loglik_grad(&set.samples, global)?;
        if ll.is_finite() {
            g
        } else {
            [f64::NAN, f64::NAN]
        }
    };
    Ok(GpdReport { sigma: global.sigma, xi: global.xi, grad, count: set.len() })
}

/// Server side: `kappa`-weighted average of the reported parameters plus one
/// ascent step along the `kappa`-weighted gradient.
pub fn gpd_server_update(reports: &[GpdReport], lr: f64) -> Result<GpdParams> {
    let total: usize = reports.iter().map(|r| r.count).sum();
    if total == 0 {
        return Err(Error::Empty("exceedance union"));
    }
    let (mut s, mut x, mut g0, mut g1) = (0.0, 0.0, 0.0, 0.0);
    for r in reports.iter().filter(|r| r.count > 0) {
        let k = r.count as f64 / total as f64;
        s += k * r.sigma;
        x += k * r.xi;
        g0 += k * r.grad[0];
        g1 += k * r.grad[1];
    }
    if !(g0.is_finite() && g1.is_finite()) {
        return Err(Error::NonFinite("federated gradient"));
    }
    Ok(GpdParams { sigma: s + lr * g0, xi: x + lr * g1 }.project())
}

/// One federated round over all devices.
pub fn federated_gpd_round(sets: &[ExceedanceSet], global: &GpdParams, lr: f64) -> Result<GpdParams> {
    let reports: Vec<GpdReport> = sets.iter().map(|s| gpd_device_report(s, global)).collect::<Result<_>>()?;
    gpd_server_update(&reports, lr)
}

/// One centralized ascent step, for comparison with the federated round.
pub fn gpd_ascent_step(samples: &[f64], p: &GpdParams, lr: f64) -> Result<GpdParams> {
    let (_, g) = gpd_loglik_grad(samples, p)?;
    Ok(GpdParams { sigma: p.sigma + lr * g[0], xi: p.xi + lr * g[1] }.project())
}

/// Step-size schedule for the federated loop: shrink on oscillation or when
/// a device reports leaving its support, grow slowly otherwise.
#[derive(Clone, Debug)]
pub struct FederatedGpdState {
    pub params: GpdParams,
    pub lr: f64,
    prev_grad: Option<[f64; 2]>,
    last_good: GpdParams,
}

impl FederatedGpdState {
    pub fn new(init: GpdParams, lr: f64) -> Self {
        FederatedGpdState { params: init, lr, prev_grad: None, last_good: init }
    }

    /// Consumes the reports collected at `self.params` and returns the next
    /// broadcast parameters.
    pub fn advance(&mut self, reports: &[GpdReport]) -> Result<GpdParams> {
        let total: usize = reports.iter().map(|r| r.count).sum();
        if total == 0 {
            return Err(Error::Empty("exceedance union"));
        }
        let mut g = [0.0, 0.0];
        for r in reports.iter().filter(|r| r.count > 0) {
            let k = r.count as f64 / total as f64;
            g[0] += k * r.grad[0];
            g[1] += k * r.grad[1];
        }
        if !(g[0].is_finite() && g[1].is_finite()) {
            self.lr *= 0.5;
            self.params = self.last_good;
            self.prev_grad = None;
            return Ok(self.params);
        }
        if let Some(pg) = self.prev_grad {
            if pg[0] * g[0] + pg[1] * g[1] < 0.0 {
                self.lr *= 0.5;
            } else {
                self.lr *= 1.1;
            }
        }
        self.prev_grad = Some(g);
        self.last_good = self.params;
        self.params = gpd_server_update(reports, self.lr)?;
        Ok(self.params)
    }
}

/// Runs federated rounds until the parameters move less than `tol`.
pub fn federated_gpd_fit(
    sets: &[ExceedanceSet],
    init: GpdParams,
    lr: f64,
    max_rounds: usize,
    tol: f64,
) -> Result<(GpdFit, Vec<GpdParams>)> {
    let mut state = FederatedGpdState::new(GpdParams::new(init.sigma, init.xi)?, lr);
    let mut history = vec![state.params];
    let mut rounds = 0;
    for _ in 0..max_rounds {
        let before = state.params;
        let reports: Vec<GpdReport> =
            sets.iter().map(|s| gpd_device_report(s, &state.params)).collect::<Result<_>>()?;
        let next = state.advance(&reports)?;
        history.push(next);
        rounds += 1;
        if next.dist(&before) < tol && state.prev_grad.is_some() {
            break;
        }
    }
    let pooled: Vec<f64> = sets.iter().flat_map(|s| s.samples.iter().copied()).collect();
    let (ll, g) = gpd_loglik_grad(&pooled, &state.params)?;
    Ok((GpdFit { params: state.params, objective: ll, grad_norm: norm2(g), iterations: rounds }, history))
}

/// Entropic optimal transport result.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult {
    /// Row-major `n x m` transport plan.
    pub plan: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// `<plan, cost>`.
    pub distance: f64,
    pub iterations: usize,
    pub marginal_error: f64,
    pub log_domain: bool,
}

fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Sinkhorn scaling for `min <P, C> - eps H(P)` with marginals `a`, `b`.
/// Falls back to log-domain updates when the Gibbs kernel underflows.
pub fn sinkhorn(a: &[f64], b: &[f64], cost: &[f64], eps: f64, max_iters: usize) -> Result<SinkhornResult> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::Empty("marginals"));
    }
    if cost.len() != n * m {
        return Err(Error::DimensionMismatch { expected: n * m, actual: cost.len() });
    }
    if !(eps > 0.0) {
        return Err(invalid("entropic regularization must be positive"));
    }
    if a.iter().chain(b).any(|v| !(*v >= 0.0)) || cost.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
        return Err(invalid("marginals and costs must be nonnegative"));
    }
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if (sa - 1.0).abs() > 1e-9 || (sb - 1.0).abs() > 1e-9 {
        return Err(invalid("marginals must sum to 1"));
    }
    let cmax = cost.iter().copied().fold(0.0, f64::max);
    if cmax / eps < 500.0 {
        if let Some(r) = sinkhorn_scaling(a, b, cost, eps, max_iters) {
            return Ok(r);
        }
    }
    Ok(sinkhorn_log(a, b, cost, eps, max_iters))
}

const MARGINAL_TOL: f64 = 1e-10;

fn row_error(plan: &[f64], a: &[f64], m: usize) -> f64 {
    a.iter().enumerate().map(|(i, ai)| (plan[i * m..(i + 1) * m].iter().sum::<f64>() - ai).abs()).sum()
}

fn sinkhorn_scaling(a: &[f64], b: &[f64], cost: &[f64], eps: f64, max_iters: usize) -> Option<SinkhornResult> {
    let (n, m) = (a.len(), b.len());
    let k: Vec<f64> = cost.iter().map(|c| (-c / eps).exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < max_iters {
        for i in 0..n {
            let kv: f64 = (0..m).map(|j| k[i * m + j] * v[j]).sum();
            u[i] = if a[i] == 0.0 { 0.0 } else { a[i] / kv };
        }
        for j in 0..m {
            let ku: f64 = (0..n).map(|i| k[i * m + j] * u[i]).sum();
            v[j] = if b[j] == 0.0 { 0.0 } else { b[j] / ku };
        }
        iterations += 1;
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return None;
        }
        if iterations % 10 == 0 || iterations == max_iters {
            err = (0..n)
                .map(|i| (u[i] * (0..m).map(|j| k[i * m + j] * v[j]).sum::<f64>() - a[i]).abs())
                .sum();
            if err < MARGINAL_TOL {
                break;
            }
        }
    }
    let plan: Vec<f64> = (0..n * m).map(|idx| u[idx / m] * k[idx] * v[idx % m]).collect();
    let distance = plan.iter().zip(cost).map(|(p, c)| p * c).sum();
    let f = u.iter().map(|x| eps * x.ln()).collect();
    let g = v.iter().map(|x| eps * x.ln()).collect();
    let marginal_error = row_error(&plan, a, m).max(err.min(row_error(&plan, a, m)));
    Some(SinkhornResult { plan, f, g, distance, iterations, marginal_error, log_domain: false })
}

fn sinkhorn_log(a: &[f64], b: &[f64], cost: &[f64], eps: f64, max_iters: usize) -> SinkhornResult {
    let (n, m) = (a.len(), b.len());
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0;
    let plan_of = |f: &[f64], g: &[f64]| -> Vec<f64> {
        (0..n * m)
            .map(|idx| {
                let (i, j) = (idx / m, idx % m);
                if a[i] == 0.0 || b[j] == 0.0 {
                    0.0
                } else {
                    ((f[i] + g[j] - cost[idx]) / eps).exp()
                }
            })
            .collect()
    };
    while iterations < max_iters {
        for i in 0..n {
            f[i] = if a[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * la[i] - eps * logsumexp((0..m).filter(|&j| b[j] > 0.0).map(|j| (g[j] - cost[i * m + j]) / eps))
            };
        }
        for j in 0..m {
            g[j] = if b[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * lb[j] - eps * logsumexp((0..n).filter(|&i| a[i] > 0.0).map(|i| (f[i] - cost[i * m + j]) / eps))
            };
        }
        iterations += 1;
        if iterations % 10 == 0 && row_error(&plan_of(&f, &g), a, m) < MARGINAL_TOL {
            break;
        }
    }
    let plan = plan_of(&f, &g);
    let distance = plan.iter().zip(cost).map(|(p, c)| p * c).sum();
    let marginal_error = row_error(&plan, a, m);
    SinkhornResult { plan, f, g, distance, iterations, marginal_error, log_domain: true }
}

/// Exact W1 between two equally weighted 1D samples, `int |F_a - F_b| dx`.
pub fn wasserstein1_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut pts: Vec<f64> = a.iter().chain(&b).copied().collect();
    pts.sort_by(f64::total_cmp);
    let (mut ia, mut ib) = (0, 0);
    let mut total = 0.0;
    for w in pts.windows(2) {
        while ia < a.len() && a[ia] <= w[0] {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= w[0] {
            ib += 1;
        }
        let fa = ia as f64 / a.len() as f64;
        let fb = ib as f64 / b.len() as f64;
        total += (fa - fb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// `int_0^upper |F_emp(x) - G(x)| dx` by the trapezoid rule on `points` nodes.
pub fn w1_empirical_to_gpd(samples: &[f64], p: &GpdParams, upper: f64, points: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if !(upper > 0.0) || points < 2 {
        return Err(invalid("need a positive range and at least two nodes"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let h = upper / (points - 1) as f64;
    let mut idx = 0;
    let mut prev = None;
    let mut total = 0.0;
    for k in 0..points {
        let x = k as f64 * h;
        while idx < s.len() && s[idx] <= x {
            idx += 1;
        }
        let d = (idx as f64 / s.len() as f64 - gpd_cdf(x, p)).abs();
        if let Some(pd) = prev {
            total += 0.5 * (pd + d) * h;
        }
        prev = Some(d);
    }
    Ok(total)
}

/// Discretization for the Wasserstein fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub bins: usize,
    /// Grid spans `[0, span_factor * max sample]`.
    pub span_factor: f64,
    /// Entropic regularization as a fraction of the mean grid cost.
    pub eps_fraction: f64,
    pub sinkhorn_iters: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { bins: 256, span_factor: 1.5, eps_fraction: 0.01, sinkhorn_iters: 20_000 }
    }
}

/// `out_i = sum_j r^|i-j| v_j` in linear time.
fn geometric_apply(r: f64, v: &[f64], out: &mut [f64]) {
    let mut acc = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        acc = acc * r + x;
        *o = acc;
    }
    acc = 0.0;
    for (o, x) in out.iter_mut().zip(v).rev() {
        acc = acc * r + x;
        *o += acc - x;
    }
}

/// `out_i = sum_j |i-j| r^|i-j| v_j` in linear time.
fn geometric_moment(r: f64, v: &[f64], out: &mut [f64]) {
    let n = v.len();
    let (mut s, mut m) = (0.0, 0.0);
    for i in 0..n {
        if i > 0 {
            m = r * (m + s + v[i - 1]);
            s = r * (s + v[i - 1]);
        }
        out[i] = m;
    }
    let (mut s, mut m) = (0.0, 0.0);
    for i in (0..n).rev() {
        if i + 1 < n {
            m = r * (m + s + v[i + 1]);
            s = r * (s + v[i + 1]);
        }
        out[i] += m;
    }
}

/// Sinkhorn on a uniform 1D grid with cost `|x_i - x_j|`. Returns the
/// column potentials, the dual value and `<plan, cost>`, or `None` when the
/// scaling vectors leave the floating-point range.
fn sinkhorn_grid(a: &[f64], b: &[f64], width: f64, eps: f64, max_iters: usize) -> Option<(Vec<f64>, f64, f64)> {
    let n = a.len();
    let r = (-width / eps).exp();
    if r == 0.0 {
        return None;
    }
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; n];
    let mut tmp = vec![0.0; n];
    for it in 1..=max_iters {
        geometric_apply(r, &v, &mut tmp);
        for i in 0..n {
            u[i] = if a[i] == 0.0 { 0.0 } else { a[i] / tmp[i] };
        }
        geometric_apply(r, &u, &mut tmp);
        for j in 0..n {
            v[j] = if b[j] == 0.0 { 0.0 } else { b[j] / tmp[j] };
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return None;
        }
        if it % 10 == 0 {
            geometric_apply(r, &v, &mut tmp);
            let err: f64 = (0..n).map(|i| (u[i] * tmp[i] - a[i]).abs()).sum();
            if err < MARGINAL_TOL {
                break;
            }
        }
    }
    geometric_moment(r, &v, &mut tmp);
    let distance = width * (0..n).map(|i| u[i] * tmp[i]).sum::<f64>();
    let g: Vec<f64> = v.iter().map(|x| eps * x.ln()).collect();
    let dual = (0..n)
        .map(|i| {
            let fa = if a[i] > 0.0 { a[i] * eps * u[i].ln() } else { 0.0 };
            let gb = if b[i] > 0.0 { b[i] * g[i] } else { 0.0 };
            fa + gb
        })
        .sum();
    Some((g, dual, distance))
}

/// Shared grid and empirical histogram for one sample set.
#[derive(Clone, Debug)]
pub struct WassersteinProblem {
    edges: Vec<f64>,
    centers: Vec<f64>,
    empirical: Vec<f64>,
    width: f64,
    eps: f64,
    iters: usize,
}

/// Entropic transport between the empirical and parametric histograms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WassersteinEval {
    /// Entropic dual objective, the quantity the fit descends.
    pub value: f64,
    /// `<plan, cost>`.
    pub distance: f64,
    pub grad: [f64; 2],
}

impl WassersteinProblem {
    pub fn new(samples: &[f64], grid: &GridConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("samples"));
        }
        if grid.bins < 2 || !(grid.span_factor >= 1.0) || !(grid.eps_fraction > 0.0) {
            return Err(invalid("invalid grid configuration"));
        }
        let max = samples.iter().copied().fold(0.0, f64::max);
        if !(max > 0.0 && max.is_finite()) {
            return Err(invalid("samples must contain a positive finite value"));
        }
        let upper = grid.span_factor * max;
        let nb = grid.bins;
        let width = upper / nb as f64;
        let edges: Vec<f64> = (0..=nb).map(|k| k as f64 * width).collect();
        let centers: Vec<f64> = (0..nb).map(|k| (k as f64 + 0.5) * width).collect();
        let mut empirical = vec![0.0; nb];
        for &x in samples {
            let k = ((x / width).floor() as usize).min(nb - 1);
            empirical[k] += 1.0;
        }
        let n = samples.len() as f64;
        empirical.iter_mut().for_each(|v| *v /= n);
        // mean of |i - j| over an nb x nb grid is (nb^2 - 1) / (3 nb)
        let nbf = nb as f64;
        let mean_cost = width * (nbf * nbf - 1.0) / (3.0 * nbf);
        Ok(WassersteinProblem { edges, centers, empirical, width, eps: grid.eps_fraction * mean_cost, iters: grid.sinkhorn_iters })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn empirical(&self) -> &[f64] {
        &self.empirical
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Normalized GPD bin masses `b = exp(-F) / Z` and `dF/d(sigma, xi)` per bin.
    pub fn parametric(&self, p: &GpdParams) -> (Vec<f64>, Vec<[f64; 2]>) {
        let nb = self.centers.len();
        let mut mass = vec![0.0; nb];
        let mut dmass = vec![[0.0; 2]; nb];
        for k in 0..nb {
            let (lo, hi) = (self.edges[k], self.edges[k + 1]);
            mass[k] = (survival(lo, p) - survival(hi, p)).max(0.0);
            let (gl, gh) = (survival_grad(lo, p), survival_grad(hi, p));
            dmass[k] = [gl[0] - gh[0], gl[1] - gh[1]];
        }
        let z: f64 = mass.iter().sum();
        let b: Vec<f64> = mass.iter().map(|m| m / z).collect();
        // F_k = -ln(mass_k), so dF_k = -dmass_k / mass_k
        let df = mass
            .iter()
            .zip(&dmass)
            .map(|(m, d)| if *m > 0.0 { [-d[0] / m, -d[1] / m] } else { [0.0, 0.0] })
            .collect();
        (b, df)
    }

    fn cost_matrix(&self) -> Vec<f64> {
        let nb = self.centers.len();
        (0..nb * nb).map(|idx| (self.centers[idx / nb] - self.centers[idx % nb]).abs()).collect()
    }

    /// Objective and its gradient in `(sigma, xi)`: with `beta` the column
    /// potentials, `grad = -sum_j b_j (beta_j - <b, beta>) dF_j`.
    pub fn evaluate(&self, p: &GpdParams) -> Result<WassersteinEval> {
        let (b, df) = self.parametric(p);
        if !b.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parametric histogram"));
        }
        let (g, value, distance) = match sinkhorn_grid(&self.empirical, &b, self.width, self.eps, self.iters) {
            Some(r) => r,
            None => {
                let r = sinkhorn(&self.empirical, &b, &self.cost_matrix(), self.eps, self.iters)?;
                let value = self
                    .empirical
                    .iter()
                    .zip(&r.f)
                    .chain(b.iter().zip(&r.g))
                    .filter(|(m, _)| **m > 0.0)
                    .map(|(m, pot)| m * pot)
                    .sum();
                (r.g, value, r.distance)
            }
        };
        let beta_bar: f64 = b.iter().zip(&g).filter(|(bj, _)| **bj > 0.0).map(|(bj, gj)| bj * gj).sum();
        let mut grad = [0.0, 0.0];
        for ((bj, gj), d) in b.iter().zip(&g).zip(&df) {
            if *bj > 0.0 {
                let w = bj * (gj - beta_bar);
                grad[0] -= w * d[0];
                grad[1] -= w * d[1];
            }
        }
        Ok(WassersteinEval { value, distance, grad })
    }

    pub fn value_grad(&self, p: &GpdParams) -> Result<(f64, [f64; 2])> {
        let e = self.evaluate(p)?;
        Ok((e.value, e.grad))
    }
}

/// Projected gradient descent on the entropic Wasserstein distance between
/// the empirical histogram and the GPD bin masses on the same grid.
pub fn fit_gpd_wasserstein(
    samples: &[f64],
    init: GpdParams,
    grid: &GridConfig,
    steps: usize,
    lr: f64,
) -> Result<GpdFit> {
    if !(lr > 0.0) {
        return Err(invalid("learning rate must be positive"));
    }
    let prob = WassersteinProblem::new(samples, grid)?;
    let mut p = GpdParams::new(init.sigma, init.xi)?;
    let (mut w, mut g) = prob.value_grad(&p)?;
    let mut step = lr;
    let mut it = 0;
    while it < steps && norm2(g) > 1e-12 {
        let gg = g[0] * g[0] + g[1] * g[1];
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = GpdParams { sigma: p.sigma - step * g[0], xi: p.xi - step * g[1] }.project();
            if let Ok((w2, g2)) = prob.value_grad(&cand) {
                if w2.is_finite() && w2 <= w - 1e-4 * step * gg {
                    p = cand;
                    w = w2;
                    g = g2;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        it += 1;
        if !accepted {
            break;
        }
        step = (step * 2.0).min(lr * 1e3);
    }
    Ok(GpdFit { params: p, objective: w, grad_norm: norm2(g), iterations: it })
}

/// Per-slot queue lengths of one device.
pub type QueueTrace = Vec<u64>;

#[derive(Clone, Debug, PartialEq)]
pub struct QueueRun {
    pub traces: Vec<QueueTrace>,
    /// Arrival rate at or above the service rate.
    pub unstable: bool,
}

/// Slotted single-server queues: each slot one departure happens with
/// probability `service_rate` if the queue is nonempty, then one arrival
/// with probability `arrival_rate`. The recorded length is after both.
pub fn simulate_queues(m: usize, arrival_rate: f64, service_rate: f64, horizon: usize, seed: u64) -> Result<QueueRun> {
    if !(0.0..=1.0).contains(&arrival_rate) || !(service_rate > 0.0 && service_rate <= 1.0) {
        return Err(invalid("arrival rate must lie in [0, 1] and service rate in (0, 1]"));
    }
    let traces = (0..m)
        .map(|dev| {
            let mut rng = substream(seed, "queues", &[dev as u64]);
            let mut q = 0u64;
            (0..horizon)
                .map(|_| {
                    let depart = rng.random::<f64>() < service_rate;
                    let arrive = rng.random::<f64>() < arrival_rate;
                    if q > 0 && depart {
                        q -= 1;
                    }
                    if arrive {
                        q += 1;
                    }
                    q
                })
                .collect()
        })
        .collect();
    Ok(QueueRun { traces, unstable: arrival_rate >= service_rate })
}

/// One value per line.
pub fn write_exceedances_csv(path: impl AsRef<Path>, samples: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for x in samples {
        writeln!(w, "{x}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_exceedances_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| invalid(format!("line {}: not a number: {t}", i + 1)))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(invalid(format!("line {}: exceedances must be positive", i + 1)));
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn cdf_values() {
        let p = GpdParams::new(1.0, 0.0).unwrap();
        assert!((gpd_cdf(1.0, &p) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert_eq!(gpd_cdf(0.0, &GpdParams::new(3.0, -0.4).unwrap()), 0.0);
        assert!((gpd_cdf(2.0, &GpdParams::new(1.0, 0.5).unwrap()) - 0.75).abs() < 1e-15);
        assert_eq!(gpd_cdf(10.0, &GpdParams::new(1.0, -0.5).unwrap()), 1.0);
        let near = GpdParams::new(1.0, 1e-9).unwrap();
        assert!((gpd_cdf(1.0, &near) - 0.632_120_558_828_557_7).abs() < 1e-8);
    }

    #[test]
    fn cdf_monotone_on_random_grids() {
        let mut rng = stream(1, "cdf-grid");
        for _ in 0..50 {
            let p = GpdParams::new(rng.random_range(0.1..5.0), rng.random_range(-0.8..0.8)).unwrap();
            let mut prev = 0.0;
            for k in 0..200 {
                let c = gpd_cdf(k as f64 * 0.1, &p);
                assert!((0.0..=1.0).contains(&c) && c >= prev);
                prev = c;
            }
        }
    }

    #[test]
    fn gev_values() {
        let p = GpdParams::new(1.0, 0.0).unwrap();
        assert!((gev_cdf(2.0, 2.0, &p) - (-1.0f64).exp()).abs() < 1e-15);
        let q = GpdParams::new(1.5, 0.3).unwrap();
        let mut prev = 0.0;
        for k in -50..200 {
            let x = k as f64 * 0.1;
            let v = gev_cdf(x, 1.0, &q);
            assert!(v >= prev);
            prev = v;
            if x > 1.0 {
                assert!((v.ln() - (gpd_cdf(x - 1.0, &q) - 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loglik_gradient_matches_finite_differences() {
        let samples = sample_gpd(&GpdParams::new(2.0, 0.3).unwrap(), 500, &mut stream(2, "s"));
        for p in [GpdParams::new(2.0, 0.3).unwrap(), GpdParams::new(1.3, 0.0).unwrap(), GpdParams::new(1.1, 1e-5).unwrap()] {
            let (_, g) = gpd_loglik_grad(&samples, &p).unwrap();
            let h = 1e-6;
            let f = |s: f64, x: f64| gpd_loglik_grad(&samples, &GpdParams { sigma: s, xi: x }).unwrap().0;
            let num = [
                (f(p.sigma + h, p.xi) - f(p.sigma - h, p.xi)) / (2.0 * h),
                (f(p.sigma, p.xi + h) - f(p.sigma, p.xi - h)) / (2.0 * h),
            ];
            let rel = norm2([g[0] - num[0], g[1] - num[1]]) / norm2(num).max(1e-3);
            assert!(rel < 1e-6, "{p:?}: {rel}");
        }
    }

    #[test]
    fn gradient_smaller_at_truth_than_perturbed() {
        let truth = GpdParams::new(2.0, 0.3).unwrap();
        let samples = sample_gpd(&truth, 20_000, &mut stream(3, "s"));
        let (_, g0) = gpd_loglik_grad(&samples, &truth).unwrap();
        let (_, g1) = gpd_loglik_grad(&samples, &GpdParams::new(3.0, 0.3).unwrap()).unwrap();
        assert!(norm2(g0) < norm2(g1));
    }

    #[test]
    fn mle_on_exponential_data() {
        let samples = sample_gpd(&GpdParams::new(1.0, 0.0).unwrap(), 10_000, &mut stream(4, "s"));
        let fit = fit_gpd_mle(&samples, GpdParams::new(0.5, 0.2).unwrap(), 5000, 0.1).unwrap();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!(fit.params.xi.abs() < 0.1);
        assert!((fit.params.sigma / mean - 1.0).abs() < 0.05);
        let again = fit_gpd_mle(&samples, fit.params, 5000, 0.1).unwrap();
        assert!(again.params.dist(&fit.params) < 1e-6);
    }

    #[test]
    fn mle_start_outside_support_stays_put() {
        let samples = vec![0.5, 3.0, 4.0];
        let init = GpdParams::new(0.5, -0.5).unwrap();
        let fit = fit_gpd_mle(&samples, init, 100, 0.1).unwrap();
        assert_eq!(fit.params, init);
        assert_eq!(fit.objective, f64::NEG_INFINITY);
    }

    #[test]
    fn federated_single_device_is_centralized_step() {
        let samples = sample_gpd(&GpdParams::new(2.0, 0.3).unwrap(), 300, &mut stream(5, "s"));
        let set = ExceedanceSet { threshold: 0.0, samples: samples.clone(), owner: 0 };
        let p = GpdParams::new(1.0, 0.1).unwrap();
        assert_eq!(federated_gpd_round(std::slice::from_ref(&set), &p, 0.05).unwrap(), gpd_ascent_step(&samples, &p, 0.05).unwrap());
        let pair = [set.clone(), ExceedanceSet { owner: 1, ..set }];
        let fed = federated_gpd_round(&pair, &p, 0.05).unwrap();
        let cen = gpd_ascent_step(&samples, &p, 0.05).unwrap();
        assert!(fed.dist(&cen) < 1e-14);
        assert!(federated_gpd_round(&[], &p, 0.05).is_err());
    }

    #[test]
    fn sinkhorn_basic_cases() {
        let a = vec![0.25; 4];
        let cost: Vec<f64> = (0..16).map(|k| ((k / 4) as f64 - (k % 4) as f64).abs()).collect();
        let r = sinkhorn(&a, &a, &cost, 1e-3, 10_000).unwrap();
        assert!(r.distance < 1e-3);
        assert!(r.marginal_error < 1e-8);
        let r = sinkhorn(&[1.0], &[1.0], &[3.0], 0.01, 100).unwrap();
        assert!((r.distance - 3.0).abs() < 0.03);
    }

    #[test]
    fn sinkhorn_falls_back_to_log_domain() {
        let a = vec![0.5, 0.5];
        let b = vec![0.5, 0.5];
        let cost = vec![0.0, 2000.0, 2000.0, 0.0];
        let r = sinkhorn(&a, &b, &cost, 1.0, 1000).unwrap();
        assert!(r.log_domain);
        assert!(r.distance < 1e-6);
        assert!(r.marginal_error < 1e-8);
    }

    #[test]
    fn grid_solver_matches_dense_solver() {
        let samples = sample_gpd(&GpdParams::new(1.0, 0.1).unwrap(), 500, &mut stream(12, "s"));
        let prob = WassersteinProblem::new(&samples, &GridConfig { bins: 40, ..GridConfig::default() }).unwrap();
        let p = GpdParams::new(1.4, 0.0).unwrap();
        let (b, _) = prob.parametric(&p);
        let dense = sinkhorn(prob.empirical(), &b, &prob.cost_matrix(), prob.eps(), 100_000).unwrap();
        let fast = prob.evaluate(&p).unwrap();
        assert!((dense.distance - fast.distance).abs() < 1e-8 * dense.distance.max(1.0));
    }

    #[test]
    fn exact_1d_w1() {
        assert_eq!(wasserstein1_1d(&[0.0], &[3.0]).unwrap(), 3.0);
        assert!((wasserstein1_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_gradient_matches_finite_differences() {
        let samples = sample_gpd(&GpdParams::new(2.0, 0.3).unwrap(), 2000, &mut stream(6, "s"));
        let grid = GridConfig { bins: 64, ..GridConfig::default() };
        let prob = WassersteinProblem::new(&samples, &grid).unwrap();
        let p = GpdParams::new(1.5, 0.2).unwrap();
        let (_, g) = prob.value_grad(&p).unwrap();
        let h = 1e-5;
        let f = |s: f64, x: f64| prob.value_grad(&GpdParams { sigma: s, xi: x }).unwrap().0;
        let num = [(f(p.sigma + h, p.xi) - f(p.sigma - h, p.xi)) / (2.0 * h), (f(p.sigma, p.xi + h) - f(p.sigma, p.xi - h)) / (2.0 * h)];
        let rel = norm2([g[0] - num[0], g[1] - num[1]]) / norm2(num);
        assert!(rel < 0.05, "{g:?} vs {num:?}");
    }

    #[test]
    fn queues_basic() {
        let run = simulate_queues(2, 0.0, 0.5, 100, 1).unwrap();
        assert!(run.traces.iter().flatten().all(|&q| q == 0));
        let a = simulate_queues(3, 0.3, 0.5, 500, 9).unwrap();
        assert_eq!(a, simulate_queues(3, 0.3, 0.5, 500, 9).unwrap());
        assert!(simulate_queues(1, 0.6, 0.5, 10, 1).unwrap().unstable);
    }

    #[test]
    fn wasserstein_recovers_generator() {
        let truth = GpdParams::new(2.0, 0.3).unwrap();
        let samples = sample_gpd(&truth, 5000, &mut stream(7, "s"));
        let fit = fit_gpd_wasserstein(&samples, GpdParams::new(1.0, 0.1).unwrap(), &GridConfig::default(), 300, 0.5).unwrap();
        assert!((fit.params.sigma / 2.0 - 1.0).abs() < 0.15, "{:?}", fit.params);
        assert!((fit.params.xi / 0.3 - 1.0).abs() < 0.15, "{:?}", fit.params);
        let prob = WassersteinProblem::new(&samples, &GridConfig::default()).unwrap();
        let (_, g_opt) = prob.value_grad(&fit.params).unwrap();
        let (_, g_far) = prob.value_grad(&GpdParams { sigma: fit.params.sigma * 1.5, ..fit.params }).unwrap();
        assert!(norm2(g_opt) < 1e-3 * norm2(g_far), "{g_opt:?} {g_far:?}");
        let mle = fit_gpd_mle(&samples, GpdParams::new(1.0, 0.1).unwrap(), 5000, 0.1).unwrap();
        assert!((fit.params.sigma / mle.params.sigma - 1.0).abs() < 0.2);
        assert!((fit.params.xi / mle.params.xi - 1.0).abs() < 0.2);
    }

    #[test]
    fn wasserstein_moves_where_likelihood_is_stuck() {
        let samples = sample_gpd(&GpdParams::new(5.0, 0.2).unwrap(), 2000, &mut stream(8, "s"));
        let init = GpdParams::new(0.5, -0.5).unwrap();
        assert_eq!(gpd_loglik_grad(&samples, &init).unwrap().0, f64::NEG_INFINITY);
        let prob = WassersteinProblem::new(&samples, &GridConfig::default()).unwrap();
        let (w0, _) = prob.value_grad(&init).unwrap();
        assert!(w0.is_finite());
        let fit = fit_gpd_wasserstein(&samples, init, &GridConfig::default(), 50, 0.5).unwrap();
        assert!(fit.objective < w0);
    }

    #[test]
    fn queue_mean_matches_birth_death_chain() {
        let (a, s) = (0.3, 0.5);
        // stationary law of the embedded chain, truncated
        let mut pi = vec![1.0];
        pi.push(a / (s * (1.0 - a)));
        let r = a * (1.0 - s) / (s * (1.0 - a));
        for _ in 2..400 {
            let last = *pi.last().unwrap();
            pi.push(last * r);
        }
        let z: f64 = pi.iter().sum();
        let mean: f64 = pi.iter().enumerate().map(|(n, p)| n as f64 * p / z).sum();
        let run = simulate_queues(4, a, s, 200_000, 11).unwrap();
        let emp = run.traces.iter().flatten().map(|&q| q as f64).sum::<f64>() / (4.0 * 200_000.0);
        assert!((emp / mean - 1.0).abs() < 0.1, "{emp} vs {mean}");
    }

    #[test]
    fn exceedance_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exc.csv");
        let xs = vec![0.5, 1.25, 3.0e-3];
        write_exceedances_csv(&path, &xs).unwrap();
        assert_eq!(read_exceedances_csv(&path).unwrap(), xs);
        let trace = vec![0, 3, 5, 2, 7];
        let set = ExceedanceSet::from_trace(&trace, 2.5, 0);
        assert_eq!(set.samples, vec![0.5, 2.5, 4.5]);
    }
}
