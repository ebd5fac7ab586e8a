use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::measure::FloatMeasure;

/// Tail mass below which an infinite-support reference measure is truncated.
pub const TAIL_TOL: f64 = 1e-15;

/// Default absolute tolerance on gamma_mean(b, alpha) - c for the solver.
pub const ALPHA_TOL: f64 = 1e-12;

/// log of Z_b(alpha) = e^alpha - sum_{j<b} alpha^j/j!, the normalizer of a
/// Poisson(alpha) conditioned on {b, b+1, ...}.
///
/// Subtracting the head from e^alpha cancels catastrophically once the tail
/// is small, so for alpha <= b the tail series sum_{j>=b} alpha^j/j! is
/// summed directly (factored at its first term, with compensation); the
/// subtraction form is kept for alpha > b where the head is harmless.
pub fn log_z(b: u64, alpha: f64) -> Result<f64> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::precondition(format!("alpha must be positive, got {alpha}")));
    }
    if b == 0 {
        return Ok(alpha);
    }
    if alpha > b as f64 {
        // head mass of Poisson(alpha): sum_{j<b} e^-alpha alpha^j / j!
        let mut term = (-alpha).exp();
        let mut head = 0.0;
        for j in 0..b {
            head += term;
            term *= alpha / (j + 1) as f64;
        }
        Ok(alpha + (-head).ln_1p())
    } else {
        // sum_{j>=b} alpha^j/j! = (alpha^b/b!) * s with s summed by Kahan.
        let mut s = 1.0f64;
        let mut comp = 0.0f64;
        let mut term = 1.0f64;
        let mut j = b + 1;
        loop {
            term *= alpha / j as f64;
            if term < s * 1e-18 {
                break;
            }
            let y = term - comp;
            let t = s + y;
            comp = (t - s) - y;
            s = t;
            j += 1;
        }
        Ok(b as f64 * alpha.ln() - ln_gamma(b as f64 + 1.0) + s.ln())
    }
}

/// Mean of the conditioned Poisson: gamma_b(alpha) = alpha Z_{b-1}/Z_b.
/// Strictly increasing in alpha, with limit b at 0+ and +infinity at
/// +infinity; gamma_0 is the identity.
pub fn gamma_mean(b: u64, alpha: f64) -> Result<f64> {
    if b == 0 {
        return Ok(alpha);
    }
    Ok(alpha * (log_z(b - 1, alpha)? - log_z(b, alpha)?).exp())
}

/// Poisson(alpha) conditioned on {b, b+1, ...}, truncated where the tail
/// mass of the unconditioned Poisson drops below [`TAIL_TOL`].
#[derive(Debug, Clone, Serialize)]
pub struct PoissonTail {
    pub b: u64,
    pub alpha: f64,
    pub log_z: f64,
    pub truncation_j: u64,
}

impl PoissonTail {
    pub fn new(b: u64, alpha: f64) -> Result<Self> {
        let log_z = log_z(b, alpha)?;
        Ok(PoissonTail { b, alpha, log_z, truncation_j: poisson_tail_cutoff(alpha, b) })
    }

    pub fn log_prob(&self, j: u64) -> f64 {
        debug_assert!(j >= self.b);
        j as f64 * self.alpha.ln() - ln_gamma(j as f64 + 1.0) - self.log_z
    }

    pub fn prob(&self, j: u64) -> f64 {
        self.log_prob(j).exp()
    }

    /// Truncation of the family as a float measure; total 1 - O(TAIL_TOL),
    /// deliberately not renormalized.
    pub fn to_measure(&self) -> FloatMeasure {
        FloatMeasure::from_entries_truncated(
            self.b,
            (self.b..=self.truncation_j).map(|j| (j, self.prob(j))),
        )
    }

    pub fn mean_truncated(&self) -> f64 {
        (self.b..=self.truncation_j).map(|j| j as f64 * self.prob(j)).sum()
    }
}

/// Smallest J beyond which the Poisson(alpha) upper tail is below TAIL_TOL,
/// from the Chernoff bound P(X >= J) <= exp(-alpha) (e alpha / J)^J.
fn poisson_tail_cutoff(alpha: f64, b: u64) -> u64 {
    let mut j = alpha.ceil().max(1.0) as u64;
    let target = TAIL_TOL.ln();
    loop {
        j += 1;
        let jf = j as f64;
        if -alpha + jf * (1.0 + alpha.ln() - jf.ln()) < target {
            return j.max(b + 1);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Bisection,
    FixedPointDecreasing,
    FixedPointIncreasing,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaSolveReport {
    pub alpha: f64,
    pub iterations: u32,
    pub method: SolveMethod,
    /// |gamma_b(alpha) - c| at the returned point.
    pub residual: f64,
    pub bracket: (f64, f64),
}

/// The unique alpha with gamma_b(alpha) = c, for c > b. For b = 0 this is c
/// itself. Otherwise bisection on [max(c - b, 1e-8), c]: the root lies
/// strictly inside because gamma_b(alpha) > alpha everywhere (upper end) and
/// gamma_b(alpha) < alpha + b (lower end), and monotonicity of gamma_b makes
/// the bracket shrink onto it. The bracket is driven down to machine width
/// so independent solvers land on the same float; `tol` is a guarantee the
/// final residual is checked against, not a stopping shortcut.
pub fn solve_alpha(b: u64, c: f64, tol: f64) -> Result<AlphaSolveReport> {
    if !(c > b as f64) {
        return Err(Error::precondition(format!("need c > b, got c = {c}, b = {b}")));
    }
    if !(tol > 0.0) {
        return Err(Error::precondition("tolerance must be positive"));
    }
    if b == 0 {
        return Ok(AlphaSolveReport {
            alpha: c,
            iterations: 0,
            method: SolveMethod::Bisection,
            residual: 0.0,
            bracket: (c, c),
        });
    }
    let mut lo = (c - b as f64).max(1e-8);
    let mut hi = c;
    let bracket = (lo, hi);
    let mut iterations = 0;
    while iterations < 200 && hi - lo > f64::EPSILON * hi {
        let mid = 0.5 * (lo + hi);
        iterations += 1;
        if gamma_mean(b, mid)? < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let residual = (gamma_mean(b, alpha)? - c).abs();
    if residual > tol {
        return Err(Error::Check(format!(
            "bisection exhausted at alpha = {alpha} with residual {residual} > {tol}"
        )));
    }
    Ok(AlphaSolveReport { alpha, iterations, method: SolveMethod::Bisection, residual, bracket })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterateDirection {
    FromAbove,
    FromBelow,
}

/// Iterates of x -> c(1 - e^{-x}) targeting the b = 1 parameter. Started at
/// c the sequence decreases; started at log c it increases; both limits are
/// the root of gamma_1(alpha) = c. The full trace is returned so callers can
/// check the two-sided bracketing step by step.
pub fn iterate_alpha1_trace(
    c: f64,
    direction: IterateDirection,
    max_iter: u32,
) -> Result<Vec<f64>> {
    if !(c > 1.0) {
        return Err(Error::precondition(format!("need c > 1, got {c}")));
    }
    let mut x = match direction {
        IterateDirection::FromAbove => c,
        IterateDirection::FromBelow => c.ln(),
    };
    let mut trace = vec![x];
    for _ in 0..max_iter {
        let next = c * (1.0 - (-x).exp());
        match direction {
            IterateDirection::FromAbove if next >= x => return Ok(trace),
            IterateDirection::FromBelow if next <= x => return Ok(trace),
            _ => {}
        }
        trace.push(next);
        x = next;
    }
    Ok(trace)
}

pub fn iterate_alpha1(
    c: f64,
    direction: IterateDirection,
    max_iter: u32,
) -> Result<AlphaSolveReport> {
    let trace = iterate_alpha1_trace(c, direction, max_iter)?;
    let alpha = *trace.last().unwrap();
    let first = trace[0];
    Ok(AlphaSolveReport {
        alpha,
        iterations: (trace.len() - 1) as u32,
        method: match direction {
            IterateDirection::FromAbove => SolveMethod::FixedPointDecreasing,
            IterateDirection::FromBelow => SolveMethod::FixedPointIncreasing,
        },
        residual: (gamma_mean(1, alpha)? - c).abs(),
        bracket: (first.min(alpha), first.max(alpha)),
    })
}

/// Largest deviation over b <= j <= upper between the conditioned-family
/// components and a plain Poisson(alpha_b(c)) pmf renormalized to {>= b}.
/// The two agree identically in exact arithmetic.
pub fn conditioned_poisson_check(b: u64, c: f64, upper: u64) -> Result<f64> {
    if b == 0 {
        return Err(Error::precondition("conditioning is trivial for b = 0"));
    }
    let alpha = solve_alpha(b, c, ALPHA_TOL)?.alpha;
    let tail = PoissonTail::new(b, alpha)?;
    let pmf = |j: u64| (-alpha + j as f64 * alpha.ln() - ln_gamma(j as f64 + 1.0)).exp();
    let head: f64 = (0..b).map(pmf).sum();
    let denom = 1.0 - head;
    let mut worst = 0.0f64;
    for j in b..=upper.max(b) {
        worst = worst.max((tail.prob(j) - pmf(j) / denom).abs());
    }
    Ok(worst)
}

/// True when the solved parameter strictly decreases from b to b + 1 at the
/// same density c; requires c > b + 1 so both problems are well posed.
pub fn alpha_monotone_in_b(b: u64, c: f64) -> Result<bool> {
    if !(c > (b + 1) as f64) {
        return Err(Error::precondition(format!("need c > b + 1, got c = {c}, b = {b}")));
    }
    let low = solve_alpha(b, c, ALPHA_TOL)?.alpha;
    let high = solve_alpha(b + 1, c, ALPHA_TOL)?.alpha;
    Ok(high < low)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_z_matches_direct_values() {
        assert_eq!(log_z(0, 1.0).unwrap(), 1.0);
        let e_minus_1 = std::f64::consts::E - 1.0;
        assert!((log_z(1, 1.0).unwrap() - e_minus_1.ln()).abs() < 1e-14);
    }

    #[test]
    fn log_z_small_alpha_leading_term() {
        // Z_2(alpha) ~ alpha^2/2 as alpha -> 0.
        let alpha = 1e-4f64;
        let lead = 2.0 * alpha.ln() - 2.0f64.ln();
        assert!((log_z(2, alpha).unwrap() - lead).abs() < 1e-4);
    }

    #[test]
    fn gamma_mean_limits() {
        assert_eq!(gamma_mean(0, 7.25).unwrap(), 7.25);
        // gamma_b(0+) = b
        assert!((gamma_mean(1, 1e-6).unwrap() - 1.0).abs() < 1e-5);
        assert!((gamma_mean(3, 1e-6).unwrap() - 3.0).abs() < 1e-5);
        // gamma grows without bound
        assert!(gamma_mean(2, 80.0).unwrap() > 70.0);
    }

    #[test]
    fn gamma_mean_strictly_increasing_on_grid() {
        for b in 1..=5u64 {
            let mut prev = -f64::INFINITY;
            for i in 0..100 {
                let alpha = 0.05 + 0.35 * i as f64;
                let g = gamma_mean(b, alpha).unwrap();
                assert!(g > prev, "gamma_{b} not increasing at alpha = {alpha}");
                prev = g;
            }
        }
    }

    #[test]
    fn solver_identity_for_b0() {
        let r = solve_alpha(0, 3.5, ALPHA_TOL).unwrap();
        assert_eq!(r.alpha, 3.5);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn solver_b1_c2_value_and_bounds() {
        let r = solve_alpha(1, 2.0, ALPHA_TOL).unwrap();
        assert!(r.residual <= ALPHA_TOL);
        assert!((r.alpha - 1.5936).abs() < 1e-3);
        // c - 1 < alpha < c(1 - e^-c)
        assert!(r.alpha > 1.0);
        assert!(r.alpha < 2.0 * (1.0 - (-2.0f64).exp()));
    }

    #[test]
    fn fixed_point_first_steps() {
        let above = iterate_alpha1_trace(2.0, IterateDirection::FromAbove, 500).unwrap();
        assert_eq!(above[0], 2.0);
        assert!((above[1] - 2.0 * (1.0 - (-2.0f64).exp())).abs() < 1e-15);
        let below = iterate_alpha1_trace(2.0, IterateDirection::FromBelow, 500).unwrap();
        assert!((below[0] - 2.0f64.ln()).abs() < 1e-15);
        assert!((below[1] - 1.0).abs() < 1e-15); // c(1 - e^{-log c}) = c - 1
    }

    #[test]
    fn three_solvers_agree() {
        for c in [1.5, 2.0, 3.0, 10.0] {
            let bis = solve_alpha(1, c, ALPHA_TOL).unwrap().alpha;
            let dec = iterate_alpha1(c, IterateDirection::FromAbove, 10_000).unwrap().alpha;
            let inc = iterate_alpha1(c, IterateDirection::FromBelow, 10_000).unwrap().alpha;
            assert!((bis - dec).abs() < 1e-12, "c = {c}: {bis} vs {dec}");
            assert!((bis - inc).abs() < 1e-12, "c = {c}: {bis} vs {inc}");
        }
    }

    #[test]
    fn iterations_bracket_the_root() {
        for c in [1.5, 2.0, 3.0, 10.0] {
            let root = solve_alpha(1, c, ALPHA_TOL).unwrap().alpha;
            let above = iterate_alpha1_trace(c, IterateDirection::FromAbove, 10_000).unwrap();
            let below = iterate_alpha1_trace(c, IterateDirection::FromBelow, 10_000).unwrap();
            for x in above {
                assert!(x >= root - 1e-13);
            }
            for x in below {
                assert!(x <= root + 1e-13);
            }
        }
    }

    #[test]
    fn solved_alpha_respects_analytic_bounds() {
        // c - b < alpha < c, and the refined lower bound where it is positive.
        for b in 1..=5u64 {
            for c in [b as f64 + 0.5, b as f64 + 1.0, (2 * b + 1) as f64, 10.0] {
                if c <= b as f64 {
                    continue;
                }
                let alpha = solve_alpha(b, c, ALPHA_TOL).unwrap().alpha;
                assert!(alpha < c);
                assert!(alpha > c - b as f64);
                let refined = c * (1.0 - 2.0f64.powi(b as i32) * (-(c - b as f64) / 2.0).exp());
                if refined > 0.0 {
                    assert!(alpha > refined, "b={b} c={c}: {alpha} <= {refined}");
                }
            }
        }
    }

    #[test]
    fn alpha_over_c_tends_to_one() {
        for b in 1..=3u64 {
            let mut prev = f64::INFINITY;
            for c in [10.0, 20.0, 40.0] {
                let gap = (solve_alpha(b, c, ALPHA_TOL).unwrap().alpha / c - 1.0).abs();
                assert!(gap < prev);
                prev = gap;
            }
        }
    }

    #[test]
    fn conditioning_identity_tiny() {
        assert!(conditioned_poisson_check(1, 2.0, 30).unwrap() < 1e-12);
        assert!(conditioned_poisson_check(3, 5.0, 40).unwrap() < 1e-12);
    }

    #[test]
    fn alpha_decreases_in_b() {
        assert!(alpha_monotone_in_b(0, 2.0).unwrap());
        assert!(alpha_monotone_in_b(1, 3.0).unwrap());
        assert!(alpha_monotone_in_b(2, 4.0).unwrap());
    }

    #[test]
    fn truncation_keeps_mass_and_mean() {
        for (b, c) in [(1u64, 2.0f64), (2, 3.0), (0, 2.0)] {
            let alpha = solve_alpha(b, c, ALPHA_TOL).unwrap().alpha;
            let tail = PoissonTail::new(b, alpha).unwrap();
            let mass = tail.to_measure().total();
            assert!((mass - 1.0).abs() < 1e-12);
            assert!((tail.mean_truncated() - c).abs() < 1e-10);
        }
    }

    /// Composite-Simpson evaluation of e^alpha/(b-1)! int_0^alpha x^{b-1}e^-x dx,
    /// an independent route to Z_b through the lower incomplete gamma integral.
    fn log_z_quadrature(b: u64, alpha: f64) -> f64 {
        let f = |x: f64| (b as f64 - 1.0) * x.ln() - x;
        let panels = 40_000usize;
        let h = alpha / panels as f64;
        // log-domain Simpson: sum weights w_i * exp(f(x_i)) scaled stably.
        let mut max_f = f64::NEG_INFINITY;
        let xs: Vec<f64> = (0..=panels).map(|i| i as f64 * h).collect();
        for (i, &x) in xs.iter().enumerate() {
            if i == 0 && b == 1 {
                max_f = max_f.max(-x);
            } else if i > 0 {
                max_f = max_f.max(f(x));
            }
        }
        let eval = |x: f64| {
            if x == 0.0 {
                if b == 1 { (0.0f64 - max_f).exp() } else { 0.0 }
            } else {
                (f(x) - max_f).exp()
            }
        };
        let mut acc = eval(xs[0]) + eval(xs[panels]);
        for (i, &x) in xs.iter().enumerate().skip(1).take(panels - 1) {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * eval(x);
        }
        let log_integral = max_f + (acc * h / 3.0).ln();
        alpha + log_integral - ln_gamma(b as f64)
    }

    #[test]
    fn series_matches_incomplete_gamma_integral() {
        for b in 1..=6u64 {
            for &alpha in &[0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 25.0, 50.0] {
                let series = log_z(b, alpha).unwrap();
                let quad = log_z_quadrature(b, alpha);
                assert!(
                    (series - quad).abs() < 1e-10,
                    "b={b} alpha={alpha}: {series} vs {quad}"
                );
            }
        }
    }
}
