use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::measure::FloatMeasure;
use crate::poisson::{log_z, solve_alpha, PoissonTail, ALPHA_TOL};

/// R(theta | rho) = sum_j theta_j log(theta_j / rho_j), with 0 log 0 = 0.
/// rho is evaluated through its exact log pmf, so theta may put mass beyond
/// the reference truncation point.
pub fn relative_entropy(theta: &FloatMeasure, rho: &PoissonTail) -> Result<f64> {
    let mut acc = 0.0;
    for (&j, &w) in theta.entries() {
        if w == 0.0 {
            continue;
        }
        if j < rho.b {
            return Err(Error::precondition(format!(
                "theta puts mass on {j}, below the reference floor {}",
                rho.b
            )));
        }
        acc += w * (w.ln() - rho.log_prob(j));
    }
    Ok(acc)
}

/// g(alpha, b, c) = log Z_b(alpha) - c log alpha - (log Z_b(a*) - c log a*)
/// where a* solves gamma_b(a*) = c. This is the amount by which switching
/// the reference parameter from a* to alpha raises the relative entropy of
/// every mean-c measure.
pub fn g_shift(b: u64, alpha: f64, c: f64) -> Result<f64> {
    let a_star = solve_alpha(b, c, ALPHA_TOL)?.alpha;
    Ok(log_z(b, alpha)? - c * alpha.ln() - (log_z(b, a_star)? - c * a_star.ln()))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ShiftCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Evaluates both sides of R(theta | rho_{b,alpha}) =
/// R(theta | rho_{b,a*(c)}) + g(alpha, b, c), which holds whenever theta has
/// mean exactly c.
pub fn entropy_shift(theta: &FloatMeasure, b: u64, alpha: f64, c: f64) -> Result<ShiftCheck> {
    if (theta.mean() - c).abs() > 1e-9 {
        return Err(Error::precondition(format!(
            "shift identity needs mean c = {c}, measure has mean {}",
            theta.mean()
        )));
    }
    let a_star = solve_alpha(b, c, ALPHA_TOL)?.alpha;
    let lhs = relative_entropy(theta, &PoissonTail::new(b, alpha)?)?;
    let rhs = relative_entropy(theta, &PoissonTail::new(b, a_star)?)? + g_shift(b, alpha, c)?;
    Ok(ShiftCheck { lhs, rhs, gap: lhs - rhs })
}

#[derive(Debug, Clone, Serialize)]
pub struct MinEntropy {
    pub value: f64,
    pub minimizer: PoissonTail,
}

/// Minimum of R(theta | rho_{b,alpha}) over measures with mean c and support
/// in {b, b+1, ...}. By the shift identity the minimum is g(alpha, b, c),
/// attained only at the solved-parameter family.
pub fn min_entropy_over_mean_c(b: u64, alpha: f64, c: f64) -> Result<MinEntropy> {
    let a_star = solve_alpha(b, c, ALPHA_TOL)?.alpha;
    Ok(MinEntropy { value: g_shift(b, alpha, c)?, minimizer: PoissonTail::new(b, a_star)? })
}

/// sum_j theta_j log(theta_j j!) over a support/probability pair, 0 log 0 = 0.
pub fn factorial_entropy(support: &[u64], probs: &[f64]) -> f64 {
    support
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&j, &p)| p * (p.ln() + ln_gamma(j as f64 + 1.0)))
        .sum()
}

/// Minimum of sum theta_j log(theta_j j!) over mean-c measures supported on
/// {b, b+1, ...}: the stationarity condition forces theta_j proportional to
/// alpha^j / j!, and the mean constraint picks alpha = a*(c). The value is
/// c log a* - log Z_b(a*).
pub fn min_factorial_entropy(b: u64, c: f64) -> Result<MinEntropy> {
    let a_star = solve_alpha(b, c, ALPHA_TOL)?.alpha;
    Ok(MinEntropy {
        value: c * a_star.ln() - log_z(b, a_star)?,
        minimizer: PoissonTail::new(b, a_star)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TiltedFamily {
    pub support: Vec<u64>,
    pub beta: f64,
    pub probs: Vec<f64>,
}

impl TiltedFamily {
    pub fn objective(&self) -> f64 {
        factorial_entropy(&self.support, &self.probs)
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(&j, &p)| j as f64 * p).sum()
    }
}

fn check_support(support: &[u64]) -> Result<()> {
    if support.is_empty() {
        return Err(Error::precondition("empty support"));
    }
    if !support.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::precondition("support must be strictly increasing"));
    }
    Ok(())
}

/// The member of the family beta^j / j! (normalized over the given finite
/// support) whose mean is c. The mean is strictly increasing in beta and
/// spans the open interval (min support, max support), so c must lie
/// strictly inside; a single-point support works only when c is that point.
pub fn tilt_on_support(support: &[u64], c: f64) -> Result<TiltedFamily> {
    check_support(support)?;
    let lo_j = support[0] as f64;
    let hi_j = *support.last().unwrap() as f64;
    if support.len() == 1 {
        if (c - lo_j).abs() < 1e-9 {
            return Ok(TiltedFamily { support: support.to_vec(), beta: 1.0, probs: vec![1.0] });
        }
        return Err(Error::precondition(format!(
            "single-point support {{{lo_j}}} cannot carry mean {c}"
        )));
    }
    if !(c > lo_j && c < hi_j) {
        return Err(Error::precondition(format!(
            "mean {c} outside the reachable open interval ({lo_j}, {hi_j})"
        )));
    }
    let probs_at = |t: f64| -> Vec<f64> {
        let logs: Vec<f64> =
            support.iter().map(|&j| j as f64 * t - ln_gamma(j as f64 + 1.0)).collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = ws.iter().sum();
        ws.iter().map(|w| w / total).collect()
    };
    let mean_at = |t: f64| -> f64 {
        support.iter().zip(probs_at(t)).map(|(&j, p)| j as f64 * p).sum()
    };
    let mut t_lo = 0.0;
    while mean_at(t_lo) >= c {
        t_lo -= 1.0;
    }
    let mut t_hi = 0.0;
    while mean_at(t_hi) <= c {
        t_hi += 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (t_lo + t_hi);
        if mean_at(mid) < c {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
        if t_hi - t_lo < 1e-15 * (1.0 + t_hi.abs()) {
            break;
        }
    }
    let t = 0.5 * (t_lo + t_hi);
    Ok(TiltedFamily { support: support.to_vec(), beta: t.exp(), probs: probs_at(t) })
}

#[derive(Debug, Clone, Serialize)]
pub struct PgdReport {
    pub support: Vec<u64>,
    pub probs: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
}

/// Euclidean projection onto {theta >= eta, sum theta = 1, sum j theta = c}.
/// The projection has the form theta_j = max(eta, y_j + lambda + mu j); the
/// total is increasing in lambda for fixed mu, and after solving for lambda
/// the mean is nondecreasing in mu, so both multipliers fall to bisection.
fn project_floored(y: &[f64], support: &[u64], c: f64, eta: f64) -> Vec<f64> {
    let n = y.len();
    let total_for = |mu: f64, lambda: f64| -> f64 {
        (0..n).map(|i| (y[i] + lambda + mu * support[i] as f64).max(eta)).sum()
    };
    let solve_lambda = |mu: f64| -> f64 {
        let mut lo = (0..n)
            .map(|i| eta - y[i] - mu * support[i] as f64)
            .fold(f64::INFINITY, f64::min)
            - 1.0;
        let mut hi = (0..n)
            .map(|i| 1.0 - y[i] - mu * support[i] as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        for _ in 0..90 {
            let mid = 0.5 * (lo + hi);
            if total_for(mu, mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let mean_for = |mu: f64| -> f64 {
        let lambda = solve_lambda(mu);
        (0..n)
            .map(|i| support[i] as f64 * (y[i] + lambda + mu * support[i] as f64).max(eta))
            .sum()
    };
    let mut mu_lo = -1.0;
    while mean_for(mu_lo) >= c {
        mu_lo *= 2.0;
    }
    let mut mu_hi = 1.0;
    while mean_for(mu_hi) <= c {
        mu_hi *= 2.0;
    }
    for _ in 0..90 {
        let mid = 0.5 * (mu_lo + mu_hi);
        if mean_for(mid) < c {
            mu_lo = mid;
        } else {
            mu_hi = mid;
        }
    }
    let mu = 0.5 * (mu_lo + mu_hi);
    let lambda = solve_lambda(mu);
    (0..n).map(|i| (y[i] + lambda + mu * support[i] as f64).max(eta)).collect()
}

/// Projected gradient descent for the factorial-entropy objective on the
/// floored polytope {theta >= eta, sum theta = 1, mean = c}. The Hessian is
/// diag(1/theta_j), bounded by 1/eta on the feasible set, so the fixed step
/// eta is 1/L. Independent of the closed-form route: only the objective and
/// its gradient are used.
pub fn pgd_factorial_entropy(
    support: &[u64],
    c: f64,
    eta: f64,
    max_iter: u32,
) -> Result<PgdReport> {
    check_support(support)?;
    let n = support.len();
    if n < 2 {
        return Err(Error::precondition("need at least two support points"));
    }
    if !(eta > 0.0 && eta * (n as f64) < 1.0) {
        return Err(Error::precondition("floor eta must satisfy 0 < eta * |support| < 1"));
    }
    let lo_j = support[0] as f64;
    let hi_j = *support.last().unwrap() as f64;
    let spread_lo: f64 = support.iter().map(|&j| j as f64 - lo_j).sum::<f64>() * eta + lo_j;
    let spread_hi: f64 = hi_j - support.iter().map(|&j| hi_j - j as f64).sum::<f64>() * eta;
    if !(c > spread_lo && c < spread_hi) {
        return Err(Error::precondition(format!(
            "mean {c} unreachable on the floored polytope ({spread_lo}, {spread_hi})"
        )));
    }
    let uniform = vec![1.0 / n as f64; n];
    let mut theta = project_floored(&uniform, support, c, eta);
    let step = eta;
    let mut iterations = 0;
    for _ in 0..max_iter {
        let y: Vec<f64> = (0..n)
            .map(|i| {
                theta[i]
                    - step * (theta[i].ln() + 1.0 + ln_gamma(support[i] as f64 + 1.0))
            })
            .collect();
        let next = project_floored(&y, support, c, eta);
        iterations += 1;
        let delta = theta
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        theta = next;
        if delta < 1e-14 {
            break;
        }
    }
    let objective = factorial_entropy(support, &theta);
    Ok(PgdReport { support: support.to_vec(), probs: theta, objective, iterations })
}
