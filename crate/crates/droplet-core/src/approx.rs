use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::Rng;
use serde::Serialize;

use crate::counting::enumerate_admissible;
use crate::entropy::relative_entropy;
use crate::error::{Error, Result};
use crate::lde::reference_family;
use crate::measure::{prohorov_distance, FloatMeasure, Measure};
use crate::occupancy::Occupancy;
use crate::params::{CapChoice, ModelParams};
use crate::poisson::PoissonTail;

fn rat(n: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Rounding a mean-c measure onto the admissible lattice: floors on the
/// interior of the support window, the two lowest classes solved from the
/// conservation laws, everything past the window folded into the two
/// unknowns.
#[derive(Debug, Clone, Serialize)]
pub struct ApproximationReport {
    pub n: u64,
    pub m: u64,
    /// Smallest support point of the target.
    pub j_star: u64,
    /// The solved count at j_star came out nonpositive: N is too small for
    /// this target and no vector is produced.
    pub below_threshold: bool,
    pub nu: Option<Occupancy>,
    /// Target mass at or beyond j_star + m.
    pub beta_m: f64,
    /// Target first moment at or beyond j_star + m.
    pub gamma_m: f64,
    pub prohorov_to_target: Option<f64>,
    /// |R(nu/N | rho) - R(theta | rho)| against the solved reference family.
    pub entropy_gap: Option<f64>,
}

/// Maps a mean-c target onto an admissible vector for the given N: classes
/// j_star+2 .. j_star+m-1 get floor(N theta_j), classes outside the window
/// get zero, and the counts at j_star and j_star+1 are the unique solution
/// of the two conservation equations. Both conservation laws then hold
/// exactly by construction; the count at any class other than j_star+1
/// never exceeds N theta_j, which is checked here in rational arithmetic.
pub fn build_approximation(theta: &Measure, params: &ModelParams) -> Result<ApproximationReport> {
    let c = params.c_rational();
    if theta.mean() != c {
        return Err(Error::precondition(format!(
            "target mean {} differs from c = {}",
            theta.mean(),
            c
        )));
    }
    if theta.floor() < params.b {
        return Err(Error::precondition(format!(
            "target floor {} below model floor {}",
            theta.floor(),
            params.b
        )));
    }
    let j_star = theta
        .min_support()
        .ok_or_else(|| Error::precondition("target has empty support"))?;
    let (n, k, m) = (params.n, params.k, params.m);
    let window_hi = j_star + m - 1;

    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    let mut s0 = n as i128;
    let mut s1 = k as i128;
    for j in j_star + 2..=window_hi {
        let count = (rat(n) * theta.weight(j)).floor().to_integer();
        let count = count.to_u64().expect("floor of N theta_j fits u64");
        if count > 0 {
            counts.insert(j, count);
            s0 -= count as i128;
            s1 -= (j * count) as i128;
        }
    }
    let nu_next = s1 - j_star as i128 * s0;
    let nu_star = s0 - nu_next;
    if nu_next < 0 {
        return Err(Error::Check(format!(
            "conservation solve gave negative count {nu_next} at class {}",
            j_star + 1
        )));
    }

    let tail: Vec<(u64, &BigRational)> = theta
        .entries()
        .range(j_star + m..)
        .map(|(&j, w)| (j, w))
        .collect();
    let beta_m: BigRational = tail.iter().map(|(_, w)| (*w).clone()).sum();
    let gamma_m: BigRational = tail.iter().map(|(j, w)| rat(*j) * *w).sum();
    let beta_f = beta_m.to_f64().unwrap_or(f64::NAN);
    let gamma_f = gamma_m.to_f64().unwrap_or(f64::NAN);

    if nu_star <= 0 {
        return Ok(ApproximationReport {
            n,
            m,
            j_star,
            below_threshold: true,
            nu: None,
            beta_m: beta_f,
            gamma_m: gamma_f,
            prohorov_to_target: None,
            entropy_gap: None,
        });
    }

    counts.insert(j_star, nu_star as u64);
    if nu_next > 0 {
        counts.insert(j_star + 1, nu_next as u64);
    }
    let nu = Occupancy::new(counts)?;
    nu.validate(params)?;
    for (&j, &count) in nu.entries() {
        if j != j_star + 1 && rat(count) > rat(n) * theta.weight(j) {
            return Err(Error::Check(format!(
                "count at class {j} exceeds N theta_j"
            )));
        }
    }

    let theta_n = nu.to_measure(params)?.to_float();
    let target = theta.to_float();
    let rho = reference_family(params)?;
    let gap =
        (relative_entropy(&theta_n, &rho)? - relative_entropy(&target, &rho)?).abs();
    Ok(ApproximationReport {
        n,
        m,
        j_star,
        below_threshold: false,
        nu: Some(nu),
        beta_m: beta_f,
        gamma_m: gamma_f,
        prohorov_to_target: Some(prohorov_distance(&theta_n, &target)),
        entropy_gap: Some(gap),
    })
}

/// The two-sided bound on the count at j_star and the three-sided bound on
/// the count at j_star+1, evaluated in exact rational arithmetic:
///
///   N theta_{j*}  >=  nu_{j*}  >=  N(theta_{j*} + (j*+1) beta_m - gamma_m) - m^2
///   N(theta_{j*+1} + gamma_m - j* beta_m) + m^2  >=  nu_{j*+1}
///       >=  N(theta_{j*+1} + gamma_m - j* beta_m)  >=  N theta_{j*+1}
pub fn lemma_b3_bounds(report: &ApproximationReport, theta: &Measure) -> Result<bool> {
    let nu = report
        .nu
        .as_ref()
        .ok_or_else(|| Error::precondition("report is below threshold"))?;
    let (n, m, j_star) = (report.n, report.m, report.j_star);
    let beta: BigRational = theta
        .entries()
        .range(j_star + m..)
        .map(|(_, w)| w.clone())
        .sum();
    let gamma: BigRational = theta
        .entries()
        .range(j_star + m..)
        .map(|(&j, w)| rat(j) * w)
        .sum();
    let m2 = rat(m * m);
    let n_rat = rat(n);

    let nu_star = rat(nu.count(j_star));
    let star_hi = &n_rat * theta.weight(j_star) >= nu_star;
    let star_lo = nu_star
        >= &n_rat * theta.weight(j_star) + &n_rat * rat(j_star + 1) * &beta
            - &n_rat * &gamma
            - &m2;

    let nu_next = rat(nu.count(j_star + 1));
    let mid = &n_rat * theta.weight(j_star + 1) + &n_rat * &gamma - &n_rat * rat(j_star) * &beta;
    let next_hi = &mid + &m2 >= nu_next;
    let next_mid = nu_next >= mid;
    let next_lo = mid >= n_rat * theta.weight(j_star + 1);

    Ok(star_hi && star_lo && next_hi && next_mid && next_lo)
}

#[derive(Debug, Clone, Serialize)]
pub struct ApproximationSweep {
    /// First N in the schedule whose construction produced a valid vector.
    pub threshold_n: Option<u64>,
    pub reports: Vec<ApproximationReport>,
}

/// Runs the construction along an N schedule with the support cap applied
/// per N; records where the below-threshold regime ends.
pub fn approximation_sweep(
    theta: &Measure,
    b: u64,
    c_num: u64,
    c_den: u64,
    n_list: &[u64],
    cap: CapChoice,
) -> Result<ApproximationSweep> {
    let mut reports = Vec::with_capacity(n_list.len());
    let mut threshold_n = None;
    for &n in n_list {
        let params = ModelParams::new(b, c_num, c_den, n, cap.of(n))?;
        let report = build_approximation(theta, &params)?;
        if !report.below_threshold && threshold_n.is_none() {
            threshold_n = Some(n);
        }
        reports.push(report);
    }
    Ok(ApproximationSweep { threshold_n, reports })
}

/// All atoms theta_nu of the model at this N, as exact measures. Their union
/// over growing N is dense among mean-c measures.
pub fn dense_family(params: &ModelParams, budget: u64) -> Result<Vec<Measure>> {
    enumerate_admissible(params, budget)?
        .iter()
        .map(|nu| nu.to_measure(params))
        .collect()
}

/// Smallest distance from the target to the atom family at this N.
pub fn family_distance(target: &FloatMeasure, params: &ModelParams, budget: u64) -> Result<f64> {
    let best = dense_family(params, budget)?
        .iter()
        .map(|atom| prohorov_distance(&atom.to_float(), target))
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

#[derive(Debug, Clone, Serialize)]
pub struct RationalTarget {
    pub measure: Measure,
    /// Largest support point kept from the float family.
    pub truncated_at: u64,
    /// Far atoms carrying the truncated mass, placed so the mean is exactly
    /// c again: the escape-blend mechanism pointed back at the target.
    #[serde(serialize_with = "adjustment_as_strings")]
    pub adjustment: Vec<(u64, BigRational)>,
}

fn adjustment_as_strings<S: serde::Serializer>(
    adjustment: &[(u64, BigRational)],
    serializer: S,
) -> std::result::Result<S::Ok, S::Error> {
    serializer.collect_seq(adjustment.iter().map(|(j, w)| (*j, w.to_string())))
}

/// Mass left in the dropped tail when rationalizing a float family. Large
/// against f64 rounding of the kept weights, so the far-atom solve below
/// works with a genuine deficit rather than accumulated noise.
pub const RATIONAL_TAIL_TOL: f64 = 1e-12;

/// Exact-rational stand-in for a conditioned Poisson family: keeps the
/// longest prefix of float weights whose deficit stays above
/// [`RATIONAL_TAIL_TOL`], then restores total mass 1 and mean exactly
/// c_num/c_den with two far atoms bracketing the dropped tail's conditional
/// mean.
pub fn rational_poisson_target(
    tail: &PoissonTail,
    c_num: u64,
    c_den: u64,
) -> Result<RationalTarget> {
    let keep_below = BigRational::from_float(1.0 - RATIONAL_TAIL_TOL).unwrap();
    let mut entries: BTreeMap<u64, BigRational> = BTreeMap::new();
    let mut mass = BigRational::zero();
    let mut moment = BigRational::zero();
    let mut cut = tail.b;
    for j in tail.b..=tail.truncation_j {
        let w = BigRational::from_float(tail.prob(j))
            .ok_or_else(|| Error::Check(format!("non-finite weight at {j}")))?;
        if &mass + &w >= keep_below {
            break;
        }
        mass += &w;
        moment += rat(j) * &w;
        entries.insert(j, w);
        cut = j;
    }
    if entries.is_empty() {
        return Err(Error::Check(
            "family too concentrated to truncate at the tail tolerance".into(),
        ));
    }
    let c = BigRational::new(BigInt::from(c_num), BigInt::from(c_den));
    let d0 = BigRational::from_integer(BigInt::from(1)) - mass;
    let d1 = &c - moment;
    if !d0.is_positive() || !d1.is_positive() {
        return Err(Error::Check(
            "truncated family already at or above target mass/mean".into(),
        ));
    }
    let pivot = (&d1 / &d0).floor().to_integer();
    let j_lo = pivot.to_u64().expect("tail pivot fits u64");
    if j_lo <= cut {
        return Err(Error::Check(format!(
            "tail conditional mean {j_lo} does not clear the cutoff {cut}"
        )));
    }
    let w_hi = &d1 - rat(j_lo) * &d0;
    let w_lo = &d0 - &w_hi;
    let mut adjustment = Vec::new();
    for (j, w) in [(j_lo, w_lo), (j_lo + 1, w_hi)] {
        if w.is_positive() {
            entries.insert(j, w.clone());
            adjustment.push((j, w));
        }
    }
    let measure = Measure::from_entries(tail.b, entries)?;
    debug_assert_eq!(measure.mean(), c);
    Ok(RationalTarget { measure, truncated_at: cut, adjustment })
}

/// Random exact-rational measure with floor b and mean exactly c_num/c_den:
/// weights are a multinomial draw at denominator `resolution * c_den`, then
/// unit mass moves between adjacent classes walk the first moment onto the
/// target. Spread must satisfy b <= c <= b + spread.
pub fn random_mean_c_target(
    b: u64,
    c_num: u64,
    c_den: u64,
    spread: u64,
    resolution: u64,
    rng: &mut impl Rng,
) -> Result<Measure> {
    if c_num < b * c_den || c_num > (b + spread) * c_den {
        return Err(Error::precondition(format!(
            "mean {c_num}/{c_den} outside reachable range [{b}, {}]",
            b + spread
        )));
    }
    let d = resolution * c_den;
    let target = (c_num * resolution) as i128;
    let mut counts = vec![0u64; spread as usize + 1];
    for _ in 0..d {
        let i = rng.gen_range(0..counts.len());
        counts[i] += 1;
    }
    let mut moment: i128 = counts
        .iter()
        .enumerate()
        .map(|(i, &k)| (b + i as u64) as i128 * k as i128)
        .sum();
    while moment > target {
        let i = counts.iter().rposition(|&k| k > 0).expect("mass present");
        counts[i] -= 1;
        counts[i - 1] += 1;
        moment -= 1;
    }
    while moment < target {
        let i = counts.iter().position(|&k| k > 0).expect("mass present");
        counts[i] -= 1;
        counts[i + 1] += 1;
        moment += 1;
    }
    Measure::from_entries(
        b,
        counts.iter().enumerate().filter(|(_, &k)| k > 0).map(|(i, &k)| {
            (b + i as u64, BigRational::new(BigInt::from(k), BigInt::from(d)))
        }),
    )
}

/// Largest Prohorov gap to the target seen at N = 12 over a 200-seed
/// calibration ensemble of the generator below (observed max 0.1534, b = 1,
/// c = 2, schedule 2,4,8,12), plus headroom. Shared by the verification
/// report and the acceptance battery.
pub const CAL_PROHOROV_FINAL: f64 = 0.20;

/// Entropy-gap analogue of [`CAL_PROHOROV_FINAL`], frozen from the same
/// ensemble (observed max 0.2516).
pub const CAL_ENTROPY_FINAL: f64 = 0.32;

/// Random exact-mean-c target that the rounding construction accepts at
/// `final_n` (the lowest class keeps at least one site). Draws land on a
/// three-class support around c at resolution 1/25 and are redrawn while the
/// construction stays below threshold; wider means widen the support.
pub fn mean_c_target_above_threshold(
    b: u64,
    c_num: u64,
    c_den: u64,
    final_n: u64,
    cap: CapChoice,
    rng: &mut impl Rng,
) -> Result<Measure> {
    let ceil_c = (c_num + c_den - 1) / c_den;
    let spread = (ceil_c + 1 - b).max(2);
    let params = ModelParams::new(b, c_num, c_den, final_n, cap.of(final_n))?;
    for _ in 0..200 {
        let theta = random_mean_c_target(b, c_num, c_den, spread, 25, rng)?;
        if !build_approximation(&theta, &params)?.below_threshold {
            return Ok(theta);
        }
    }
    Err(Error::Check(format!(
        "no mean-{c_num}/{c_den} target cleared the threshold at N = {final_n} in 200 draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::DEFAULT_BUDGET;
    use crate::params::SupportCap;
    use crate::poisson::{solve_alpha, ALPHA_TOL};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn measure(floor: u64, entries: &[(u64, BigRational)]) -> Measure {
        Measure::from_entries(floor, entries.iter().cloned()).unwrap()
    }

    #[test]
    fn point_mass_is_a_fixed_point() {
        let theta = Measure::dirac(1, 2).unwrap();
        for n in [4, 10] {
            let params = ModelParams::new(1, 2, 1, n, SupportCap::default().of(n)).unwrap();
            let report = build_approximation(&theta, &params).unwrap();
            assert!(!report.below_threshold);
            assert_eq!(report.nu.as_ref().unwrap().count(2), n);
            assert_eq!(report.prohorov_to_target, Some(0.0));
            assert_eq!(report.beta_m, 0.0);
            assert!(report.entropy_gap.unwrap() < 1e-12);
            assert!(lemma_b3_bounds(&report, &theta).unwrap());
        }
    }

    #[test]
    fn two_atom_target_solved_by_hand() {
        let theta = measure(1, &[(1, q(1, 2)), (3, q(1, 2))]);
        let params = ModelParams::new(1, 2, 1, 8, 4).unwrap();
        let report = build_approximation(&theta, &params).unwrap();
        let nu = report.nu.unwrap();
        assert_eq!(nu.count(1), 4);
        assert_eq!(nu.count(2), 0);
        assert_eq!(nu.count(3), 4);
        assert_eq!(report.prohorov_to_target, Some(0.0));
    }

    #[test]
    fn thin_lowest_class_reports_below_threshold() {
        let theta = measure(1, &[(1, q(1, 100)), (2, q(49, 50)), (3, q(1, 100))]);
        let sweep =
            approximation_sweep(&theta, 1, 2, 1, &[20, 200], CapChoice::default()).unwrap();
        assert!(sweep.reports[0].below_threshold);
        assert!(!sweep.reports[1].below_threshold);
        assert_eq!(sweep.threshold_n, Some(200));
        let nu = sweep.reports[1].nu.as_ref().unwrap();
        assert_eq!(nu.count(1), 2);
        assert!(lemma_b3_bounds(&sweep.reports[1], &theta).unwrap());
    }

    #[test]
    fn heavy_tail_forces_mass_onto_empty_second_class() {
        // theta has no mass at j*+1 = 2, yet every constructed vector does:
        // the bound nu_j <= N theta_j genuinely cannot include j*+1.
        let theta = measure(1, &[(1, q(59, 100)), (3, q(39, 100)), (12, q(1, 50))]);
        assert_eq!(theta.mean(), q(2, 1));
        let sweep =
            approximation_sweep(&theta, 1, 2, 1, &[8, 16, 40, 100], CapChoice::default())
                .unwrap();
        assert_eq!(sweep.threshold_n, Some(8));
        for report in &sweep.reports {
            let nu = report.nu.as_ref().unwrap();
            assert!(nu.count(2) > 0, "N={}", report.n);
            assert!(lemma_b3_bounds(report, &theta).unwrap(), "N={}", report.n);
        }
    }

    #[test]
    fn rationalized_reference_target_has_exact_mean() {
        let alpha = solve_alpha(1, 2.0, ALPHA_TOL).unwrap().alpha;
        let tail = PoissonTail::new(1, alpha).unwrap();
        let target = rational_poisson_target(&tail, 2, 1).unwrap();
        assert_eq!(target.measure.mean(), q(2, 1));
        assert!(!target.adjustment.is_empty());
        assert!(target.adjustment.iter().all(|(j, _)| *j > target.truncated_at));
        let drift = prohorov_distance(&target.measure.to_float(), &tail.to_measure());
        assert!(drift < 1e-11, "{drift}");
    }

    #[test]
    fn reference_target_gaps_shrink_along_schedule() {
        let alpha = solve_alpha(1, 2.0, ALPHA_TOL).unwrap().alpha;
        let tail = PoissonTail::new(1, alpha).unwrap();
        let theta = rational_poisson_target(&tail, 2, 1).unwrap().measure;
        let sweep =
            approximation_sweep(&theta, 1, 2, 1, &[20, 40, 80], CapChoice::default()).unwrap();
        assert_eq!(sweep.threshold_n, Some(20));
        // N=20 and N=40 round to the same normalized vector, so the trend
        // is monotone only in the weak sense, with a strict overall drop.
        let gaps: Vec<f64> = sweep.reports.iter().map(|r| r.entropy_gap.unwrap()).collect();
        assert!(gaps[1] <= gaps[0] && gaps[2] <= gaps[1], "{gaps:?}");
        assert!(gaps[2] < gaps[0], "{gaps:?}");
        let dist: Vec<f64> =
            sweep.reports.iter().map(|r| r.prohorov_to_target.unwrap()).collect();
        assert!(dist[1] <= dist[0] && dist[2] <= dist[1], "{dist:?}");
        assert!(dist[2] < dist[0], "{dist:?}");
    }

    #[test]
    fn random_targets_have_exact_mean_and_valid_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let theta = random_mean_c_target(1, 2, 1, 6, 200, &mut rng).unwrap();
            assert_eq!(theta.mean(), q(2, 1));
            let sweep =
                approximation_sweep(&theta, 1, 2, 1, &[20, 60], CapChoice::default()).unwrap();
            for report in sweep.reports.iter().filter(|r| !r.below_threshold) {
                assert!(lemma_b3_bounds(report, &theta).unwrap(), "N={}", report.n);
            }
        }
    }

    #[test]
    fn family_distance_shrinks_and_hits_lattice_targets() {
        let alpha = solve_alpha(1, 2.0, ALPHA_TOL).unwrap().alpha;
        let rho = PoissonTail::new(1, alpha).unwrap().to_measure();
        let coarse = family_distance(
            &rho,
            &ModelParams::new(1, 2, 1, 8, SupportCap::default().of(8)).unwrap(),
            DEFAULT_BUDGET,
        )
        .unwrap();
        let fine = family_distance(
            &rho,
            &ModelParams::new(1, 2, 1, 24, SupportCap::default().of(24)).unwrap(),
            DEFAULT_BUDGET,
        )
        .unwrap();
        assert!(fine < coarse, "{fine} vs {coarse}");

        let point = FloatMeasure::from_entries(1, [(2, 1.0)]).unwrap();
        for n in [4, 10] {
            let params = ModelParams::new(1, 2, 1, n, SupportCap::default().of(n)).unwrap();
            assert_eq!(family_distance(&point, &params, DEFAULT_BUDGET).unwrap(), 0.0);
        }

        let off_lattice =
            FloatMeasure::from_entries(1, [(1, 0.476_510_284_6), (3, 0.523_489_715_4)]).unwrap();
        let params = ModelParams::new(1, 2, 1, 8, SupportCap::default().of(8)).unwrap();
        assert!(family_distance(&off_lattice, &params, DEFAULT_BUDGET).unwrap() > 0.0);
    }
}
