//! Generalization-error bounds. Logarithms are natural.

use crate::error::{check_dim, invalid, Error, Result};

fn check_common(n: f64, eps: f64, eps_max: f64) -> Result<()> {
    if !(n >= 1.0 && n.is_finite()) {
        return Err(invalid(format!("n must be at least 1, got {n}")));
    }
    if !(eps > 0.0 && eps <= eps_max) {
        return Err(invalid(format!("eps must lie in (0, {eps_max}], got {eps}")));
    }
    Ok(())
}

/// `sqrt((ln|H| + ln(1/eps)) / (2n))`.
pub fn ge_finite_h(hsize: f64, n: f64, eps: f64) -> Result<f64> {
    check_common(n, eps, 1.0)?;
    if !(hsize >= 1.0 && hsize.is_finite()) {
        return Err(invalid(format!("hypothesis count must be at least 1, got {hsize}")));
    }
    Ok(((hsize.ln() + (1.0 / eps).ln()) / (2.0 * n)).sqrt())
}

/// Finite-H bound with `ln|H|` given directly, for spaces too large for f64.
pub fn ge_finite_h_ln(ln_hsize: f64, n: f64, eps: f64) -> Result<f64> {
    check_common(n, eps, 1.0)?;
    if !(ln_hsize >= 0.0 && ln_hsize.is_finite()) {
        return Err(invalid(format!("ln|H| must be nonnegative, got {ln_hsize}")));
    }
    Ok(((ln_hsize + (1.0 / eps).ln()) / (2.0 * n)).sqrt())
}

/// `sqrt((VC + ln(4/eps)) / n)`. `eps` may reach 4, where the log term vanishes.
pub fn ge_pac_vc(vc: f64, n: f64, eps: f64) -> Result<f64> {
    check_common(n, eps, 4.0)?;
    if !(vc >= 1.0 && vc.is_finite()) {
        return Err(invalid(format!("VC dimension must be at least 1, got {vc}")));
    }
    Ok(((vc + (4.0 / eps).ln()) / n).sqrt())
}

/// `sqrt((KL(q||p) + ln(1/eps)) / (2n))`.
pub fn ge_pac_bayes(kl: f64, n: f64, eps: f64) -> Result<f64> {
    check_common(n, eps, 1.0)?;
    if !(kl >= 0.0 && kl.is_finite()) {
        return Err(invalid(format!("KL must be nonnegative, got {kl}")));
    }
    Ok(((kl + (1.0 / eps).ln()) / (2.0 * n)).sqrt())
}

/// `ln|H|` for a network whose weights each take `2^bits_per_weight` values.
pub fn ln_hypothesis_count(param_count: usize, bits_per_weight: u32) -> f64 {
    param_count as f64 * f64::from(bits_per_weight) * std::f64::consts::LN_2
}

/// KL divergence between diagonal Gaussians `q` and `p`.
pub fn kl_diag_gaussians(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> Result<f64> {
    check_dim(mu_q.len(), var_q.len())?;
    check_dim(mu_q.len(), mu_p.len())?;
    check_dim(mu_q.len(), var_p.len())?;
    if var_q.iter().chain(var_p).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(invalid("variances must be positive"));
    }
    let kl: f64 = (0..mu_q.len())
        .map(|i| {
            let r = var_q[i] / var_p[i];
            let d = mu_q[i] - mu_p[i];
            0.5 * (r + d * d / var_p[i] - 1.0 - r.ln())
        })
        .sum();
    if !kl.is_finite() {
        return Err(Error::NonFinite("kl"));
    }
    Ok(kl.max(0.0))
}

/// Binary KL divergence `kl(a || b)` between Bernoulli means.
pub fn kl_bernoulli(a: f64, b: f64) -> f64 {
    let term = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
    term(a, b) + term(1.0 - a, 1.0 - b)
}

/// Whether `kl(emp || true) <= (KL(q||p) + ln((n + 1) / eps)) / n` holds for
/// losses in `[0, 1]`.
pub fn seeger_holds(emp_loss: f64, true_loss: f64, kl_qp: f64, n: f64, eps: f64) -> Result<bool> {
    check_common(n, eps, 1.0)?;
    if !(0.0..=1.0).contains(&emp_loss) || !(0.0..=1.0).contains(&true_loss) {
        return Err(invalid("losses must lie in [0, 1]"));
    }
    let rhs = (kl_qp + ((n + 1.0) / eps).ln()) / n;
    Ok(kl_bernoulli(emp_loss, true_loss) <= rhs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    pub n: f64,
    pub eps: f64,
    pub finite_h: f64,
    pub pac_vc: f64,
    pub pac_bayes: f64,
}

/// All three bounds at one `(n, eps)`.
pub fn bound_report(n: f64, eps: f64, hsize: f64, vc: f64, kl: f64) -> Result<BoundReport> {
    Ok(BoundReport {
        n,
        eps,
        finite_h: ge_finite_h(hsize, n, eps)?,
        pac_vc: ge_pac_vc(vc, n, eps)?,
        pac_bayes: ge_pac_bayes(kl, n, eps)?,
    })
}
