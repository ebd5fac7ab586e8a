use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::Zero;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::counting::{card_delta, card_omega, enumerate_admissible, ln_biguint};
use crate::entropy::{g_shift, relative_entropy};
use crate::error::{Error, Result};
use crate::measure::{prohorov_distance, FloatMeasure};
use crate::occupancy::Occupancy;
use crate::params::{CapChoice, ModelParams};
use crate::poisson::{log_z, solve_alpha, PoissonTail, ALPHA_TOL};

/// Log of a positive rational, as log(numerator) - log(denominator) through
/// big-integer mantissa extraction; accurate even when both sides overflow
/// floats.
pub fn ln_bigrational(q: &BigRational) -> Result<f64> {
    if q <= &BigRational::zero() {
        return Err(Error::precondition(format!("log of non-positive rational {q}")));
    }
    Ok(ln_biguint(q.numer().magnitude()) - ln_biguint(q.denom().magnitude()))
}

/// The conditioned Poisson family at the solved parameter alpha_b(c): the
/// reference measure of every entropy statement below.
pub fn reference_family(params: &ModelParams) -> Result<PoissonTail> {
    let alpha = solve_alpha(params.b, params.c_f64(), ALPHA_TOL)?.alpha;
    PoissonTail::new(params.b, alpha)
}

/// P(Theta = theta_nu) = card(Delta_nu) / card(Omega) as an exact rational.
pub fn exact_probability(nu: &Occupancy, params: &ModelParams, budget: u64) -> Result<BigRational> {
    let delta = card_delta(nu, params)?;
    let omega = card_omega(params, budget)?.card_omega;
    Ok(BigRational::new(BigInt::from(delta), BigInt::from(omega)))
}

/// Every admissible vector with its exact probability; the values sum to 1.
pub fn exact_probabilities(
    params: &ModelParams,
    budget: u64,
) -> Result<Vec<(Occupancy, BigRational)>> {
    let atoms = enumerate_admissible(params, budget)?;
    let deltas: Vec<BigUint> =
        atoms.iter().map(|nu| card_delta(nu, params)).collect::<Result<_>>()?;
    let omega: BigUint = deltas.iter().sum();
    let omega = BigInt::from(omega);
    Ok(atoms
        .into_iter()
        .zip(deltas)
        .map(|(nu, d)| (nu, BigRational::new(BigInt::from(d), omega.clone())))
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct LdeResidualRow {
    pub n: u64,
    pub nu_id: String,
    /// (1/N) log P(Theta = theta_nu), from exact big-integer counts.
    pub exact_logprob_over_n: f64,
    /// R(theta_nu | rho_{b, alpha_b(c)}).
    pub entropy: f64,
    /// The local estimate's defect: the two terms cancel as N grows.
    pub residual: f64,
}

/// One row per admissible vector: (1/N) log P(Theta = theta_nu) plus the
/// relative entropy of theta_nu against the solved reference family.
pub fn lde_rows(params: &ModelParams, budget: u64) -> Result<Vec<LdeResidualRow>> {
    let rho = reference_family(params)?;
    let atoms = enumerate_admissible(params, budget)?;
    let deltas: Vec<BigUint> =
        atoms.iter().map(|nu| card_delta(nu, params)).collect::<Result<_>>()?;
    let ln_omega = ln_biguint(&deltas.iter().sum::<BigUint>());
    atoms
        .par_iter()
        .zip(&deltas)
        .map(|(nu, delta)| {
            let theta = nu.to_measure(params)?.to_float();
            let entropy = relative_entropy(&theta, &rho)?;
            let lp = (ln_biguint(delta) - ln_omega) / params.n as f64;
            Ok(LdeResidualRow {
                n: params.n,
                nu_id: nu.id(),
                exact_logprob_over_n: lp,
                entropy,
                residual: lp + entropy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LdeSweepEntry {
    pub n: u64,
    pub m: u64,
    pub max_abs_residual: f64,
    pub rows: Vec<LdeResidualRow>,
}

/// Runs [`lde_rows`] along an N schedule with the support cap derived from
/// each N; the per-N maximum |residual| is the uniform-convergence witness.
pub fn lde_sweep(
    b: u64,
    c_num: u64,
    c_den: u64,
    n_list: &[u64],
    cap: CapChoice,
    budget: u64,
) -> Result<Vec<LdeSweepEntry>> {
    n_list
        .iter()
        .map(|&n| {
            let params = ModelParams::new(b, c_num, c_den, n, cap.of(n))?;
            let rows = lde_rows(&params, budget)?;
            let max_abs_residual =
                rows.iter().map(|r| r.residual.abs()).fold(0.0f64, f64::max);
            Ok(LdeSweepEntry { n, m: params.m, max_abs_residual, rows })
        })
        .collect()
}

/// f(alpha, b, c, K) = log Z_b(alpha) - c log alpha + c log K - c, the
/// N-free part of the single-class log-cardinality expansion.
pub fn f_shift(b: u64, alpha: f64, c: f64, k: u64) -> Result<f64> {
    Ok(log_z(b, alpha)? - c * alpha.ln() + c * (k as f64).ln() - c)
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaResidualRow {
    pub n: u64,
    pub nu_id: Option<String>,
    pub lhs: f64,
    pub rhs_closed_form: f64,
    pub zeta_or_eta: f64,
}

/// zeta_hat(nu) = (1/N) log card(Delta_nu) - (-R(theta_nu | rho_{b,alpha}) +
/// f(alpha, b, c, K)). The value does not depend on the supplied alpha: the
/// alpha-dependence of R and of f cancels through the entropy shift identity.
pub fn lemma41_check(nu: &Occupancy, params: &ModelParams, alpha: f64) -> Result<LemmaResidualRow> {
    let delta = card_delta(nu, params)?;
    let theta = nu.to_measure(params)?.to_float();
    let entropy = relative_entropy(&theta, &PoissonTail::new(params.b, alpha)?)?;
    let lhs = ln_biguint(&delta) / params.n as f64;
    let rhs_closed_form = -entropy + f_shift(params.b, alpha, params.c_f64(), params.k)?;
    Ok(LemmaResidualRow {
        n: params.n,
        nu_id: Some(nu.id()),
        lhs,
        rhs_closed_form,
        zeta_or_eta: lhs - rhs_closed_form,
    })
}

/// eta_hat = (1/N) log card(Omega) - (f(alpha, b, c, K) - g(alpha, b, c)),
/// using that the minimum of R over mean-c measures is g. Also
/// alpha-independent, by the same cancellation.
pub fn lemma42_check(params: &ModelParams, alpha: f64, budget: u64) -> Result<LemmaResidualRow> {
    let report = card_omega(params, budget)?;
    let c = params.c_f64();
    let rhs_closed_form =
        f_shift(params.b, alpha, c, params.k)? - g_shift(params.b, alpha, c)?;
    let lhs = report.log_card_omega / params.n as f64;
    Ok(LemmaResidualRow {
        n: params.n,
        nu_id: None,
        lhs,
        rhs_closed_form,
        zeta_or_eta: lhs - rhs_closed_form,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BallRow {
    pub n: u64,
    pub m: u64,
    pub n_admissible: u64,
    pub n_in_ball: u64,
    /// min R(theta_nu | rho_{alpha_b(c)}) over atoms inside the ball.
    pub min_entropy: Option<f64>,
    /// (1/N) log P(Theta in ball), None when no atom qualifies.
    pub log_prob_over_n: Option<f64>,
}

struct BallScan {
    in_ball: BigUint,
    omega: BigUint,
    n_admissible: u64,
    n_in_ball: u64,
    min_entropy: Option<f64>,
}

fn scan_ball(
    params: &ModelParams,
    center: &FloatMeasure,
    radius: f64,
    budget: u64,
) -> Result<BallScan> {
    let rho = reference_family(params)?;
    let mut scan = BallScan {
        in_ball: BigUint::zero(),
        omega: BigUint::zero(),
        n_admissible: 0,
        n_in_ball: 0,
        min_entropy: None,
    };
    for nu in enumerate_admissible(params, budget)? {
        let delta = card_delta(&nu, params)?;
        scan.n_admissible += 1;
        let theta = nu.to_measure(params)?.to_float();
        if prohorov_distance(&theta, center) < radius {
            scan.n_in_ball += 1;
            scan.in_ball += &delta;
            let r = relative_entropy(&theta, &rho)?;
            scan.min_entropy = Some(scan.min_entropy.map_or(r, |m: f64| m.min(r)));
        }
        scan.omega += delta;
    }
    Ok(scan)
}

/// For each N in the schedule: the smallest relative entropy among the
/// admissible atoms lying inside the prohorov ball around `center`, together
/// with the exact ball probability in log scale. The minimum is
/// non-increasing in N (richer atom sets), approaching the infimum over the
/// ball, while -(1/N) log P approaches the same value from the estimate.
pub fn ball_infimum_limit(
    center: &FloatMeasure,
    radius: f64,
    b: u64,
    c_num: u64,
    c_den: u64,
    n_list: &[u64],
    cap: CapChoice,
    budget: u64,
) -> Result<Vec<BallRow>> {
    if !(radius > 0.0) {
        return Err(Error::precondition("radius must be positive"));
    }
    n_list
        .iter()
        .map(|&n| {
            let params = ModelParams::new(b, c_num, c_den, n, cap.of(n))?;
            let scan = scan_ball(&params, center, radius, budget)?;
            let log_prob_over_n = if scan.in_ball.is_zero() {
                None
            } else {
                Some(
                    (ln_biguint(&scan.in_ball) - ln_biguint(&scan.omega)) / params.n as f64,
                )
            };
            Ok(BallRow {
                n,
                m: params.m,
                n_admissible: scan.n_admissible,
                n_in_ball: scan.n_in_ball,
                min_entropy: scan.min_entropy,
                log_prob_over_n,
            })
        })
        .collect()
}

/// Exact P(Theta in B(rho_{alpha_b(c)}, epsilon)) by summing the qualifying
/// atoms; tends to 1 along the N schedule for any fixed epsilon.
pub fn equilibrium_ball_mass(
    params: &ModelParams,
    epsilon: f64,
    budget: u64,
) -> Result<BigRational> {
    if !(epsilon > 0.0) {
        return Err(Error::precondition("epsilon must be positive"));
    }
    let center = reference_family(params)?.to_measure();
    let scan = scan_ball(params, &center, epsilon, budget)?;
    Ok(BigRational::new(BigInt::from(scan.in_ball), BigInt::from(scan.omega)))
}

/// log n! - (n log n - n); between 1 and 2 log N for every 1 <= n <= N.
pub fn weak_stirling_gap(n: u64) -> f64 {
    let nf = n as f64;
    ln_gamma(nf + 1.0) - (nf * nf.ln() - nf)
}
