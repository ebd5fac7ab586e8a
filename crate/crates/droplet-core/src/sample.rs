use std::collections::BTreeMap;

use num_bigint::{BigUint, RandBigInt};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::counting::{card_delta, card_omega, enumerate_admissible};
use crate::error::{Error, Result};
use crate::lde::{exact_probabilities, reference_family};
use crate::measure::{prohorov_distance, FloatMeasure, Measure};
use crate::occupancy::Occupancy;
use crate::params::ModelParams;

/// Smallest estimated acceptance probability the rejection sampler will
/// attempt; below this the exact two-stage sampler is the right tool.
pub const ACCEPTANCE_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMethod {
    Rejection,
    ExactTwoStage,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleBatch {
    pub params: ModelParams,
    pub seed: u64,
    pub n_samples: u64,
    pub method: SampleMethod,
    pub occupancy_histograms: Vec<Occupancy>,
    /// Rejection only: samples kept / placements drawn.
    pub acceptance_rate: Option<f64>,
}

impl SampleBatch {
    pub fn counts(&self) -> BTreeMap<Occupancy, u64> {
        let mut counts = BTreeMap::new();
        for nu in &self.occupancy_histograms {
            *counts.entry(nu.clone()).or_insert(0) += 1;
        }
        counts
    }
}

/// Sample i always reads from stream i of the seeded generator, so batches
/// are identical no matter how samples are scheduled over threads.
fn stream_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

/// Draws uniform placements of K labeled particles on N sites and keeps
/// those landing in the constrained space. Unbiased, but the acceptance
/// rate is card(Omega) / N^K, which this refuses to fight below
/// [`ACCEPTANCE_GUARD`] when the exact count is obtainable.
pub fn sample_rejection(
    params: &ModelParams,
    n: u64,
    seed: u64,
    budget: u64,
) -> Result<SampleBatch> {
    match card_omega(params, budget) {
        Ok(report) => {
            let ln_accept =
                report.log_card_omega - params.k as f64 * (params.n as f64).ln();
            if ln_accept < ACCEPTANCE_GUARD.ln() {
                return Err(Error::precondition(format!(
                    "estimated acceptance {:.3e} below {ACCEPTANCE_GUARD:.0e}; \
                     use the exact two-stage sampler",
                    ln_accept.exp()
                )));
            }
        }
        Err(Error::Budget { .. }) => {} // guard unavailable, proceed blind
        Err(e) => return Err(e),
    }
    let draws: Vec<(Occupancy, u64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let mut attempts = 0u64;
            loop {
                attempts += 1;
                let placement: Vec<u32> = (0..params.k)
                    .map(|_| rng.gen_range(0..params.n as u32))
                    .collect();
                if let Ok(nu) = Occupancy::from_placement(&placement, params) {
                    if nu.support_len() as u64 <= params.m {
                        return (nu, attempts);
                    }
                }
            }
        })
        .collect();
    let attempts: u64 = draws.iter().map(|(_, a)| a).sum();
    Ok(SampleBatch {
        params: *params,
        seed,
        n_samples: n,
        method: SampleMethod::Rejection,
        occupancy_histograms: draws.into_iter().map(|(nu, _)| nu).collect(),
        acceptance_rate: Some(n as f64 / attempts as f64),
    })
}

struct Stage1 {
    atoms: Vec<Occupancy>,
    cumulative: Vec<BigUint>,
    total: BigUint,
}

impl Stage1 {
    fn build(params: &ModelParams, budget: u64) -> Result<Self> {
        let atoms = enumerate_admissible(params, budget)?;
        let mut cumulative = Vec::with_capacity(atoms.len());
        let mut run = BigUint::zero();
        for nu in &atoms {
            run += card_delta(nu, params)?;
            cumulative.push(run.clone());
        }
        Ok(Stage1 { atoms, total: run, cumulative })
    }

    /// Index with probability card_delta / card_omega, by a uniform big
    /// integer below the exact total: no float normalization anywhere.
    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let r = rng.gen_biguint_below(&self.total);
        self.cumulative.partition_point(|c| *c <= r)
    }
}

/// Two-stage exact sampler, stage 1 only: the histogram law needs nothing
/// beyond the atom weights.
pub fn sample_exact(params: &ModelParams, n: u64, seed: u64, budget: u64) -> Result<SampleBatch> {
    let table = Stage1::build(params, budget)?;
    let histograms: Vec<Occupancy> = (0..n)
        .into_par_iter()
        .map(|i| table.atoms[table.draw(&mut stream_rng(seed, i))].clone())
        .collect();
    Ok(SampleBatch {
        params: *params,
        seed,
        n_samples: n,
        method: SampleMethod::ExactTwoStage,
        occupancy_histograms: histograms,
        acceptance_rate: None,
    })
}

/// A full configuration: which class each site carries and which site each
/// labeled particle sits on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Configuration {
    pub site_class: Vec<u64>,
    pub site_of_particle: Vec<u32>,
}

/// Stage 2: a uniform element of the histogram's configuration class. A
/// uniform shuffle of the class multiset assigns classes to sites (uniform
/// over the N! / prod nu_j! site patterns); a uniform shuffle of the
/// particles filled block by block picks the particle split (uniform over
/// K! / prod (j!)^{nu_j}). Together: the uniform distribution on the class.
fn realize(nu: &Occupancy, params: &ModelParams, rng: &mut ChaCha8Rng) -> Configuration {
    let mut site_class: Vec<u64> = nu
        .entries()
        .iter()
        .flat_map(|(&j, &count)| std::iter::repeat(j).take(count as usize))
        .collect();
    site_class.shuffle(rng);
    let mut particles: Vec<u32> = (0..params.k as u32).collect();
    particles.shuffle(rng);
    let mut site_of_particle = vec![0u32; params.k as usize];
    let mut next = particles.iter();
    for (site, &j) in site_class.iter().enumerate() {
        for _ in 0..j {
            site_of_particle[*next.next().expect("classes sum to K") as usize] = site as u32;
        }
    }
    Configuration { site_class, site_of_particle }
}

/// Both stages per sample: exact draws of whole configurations.
pub fn sample_configurations(
    params: &ModelParams,
    n: u64,
    seed: u64,
    budget: u64,
) -> Result<Vec<Configuration>> {
    let table = Stage1::build(params, budget)?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let nu = &table.atoms[table.draw(&mut rng)];
            realize(nu, params, &mut rng)
        })
        .collect())
}

/// Exact one-site marginal: P(K_1 = j) = sum_nu P(nu) nu_j / N, using that
/// sites are exchangeable under the uniform law on each configuration class.
pub fn marginal_exact(params: &ModelParams, budget: u64) -> Result<Measure> {
    let mut weights: BTreeMap<u64, BigRational> = BTreeMap::new();
    let n = BigRational::from_integer(params.n.into());
    for (nu, p) in exact_probabilities(params, budget)? {
        for (&j, &count) in nu.entries() {
            let share = &p * BigRational::from_integer(count.into()) / &n;
            *weights.entry(j).or_insert_with(BigRational::zero) += share;
        }
    }
    Measure::from_entries(params.b, weights)
}

/// Monte-Carlo one-site marginal: frequency of the first site's class over
/// exact configuration draws.
pub fn marginal_mc(params: &ModelParams, n: u64, seed: u64, budget: u64) -> Result<FloatMeasure> {
    let configs = sample_configurations(params, n, seed, budget)?;
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for config in &configs {
        *counts.entry(config.site_class[0]).or_insert(0) += 1;
    }
    FloatMeasure::from_entries(
        params.b,
        counts.into_iter().map(|(j, k)| (j, k as f64 / n as f64)),
    )
}

/// Fraction of exact samples whose normalized histogram lands within
/// `epsilon` of the solved reference family.
pub fn empirical_theta_concentration(
    params: &ModelParams,
    n: u64,
    seed: u64,
    epsilon: f64,
    budget: u64,
) -> Result<f64> {
    let batch = sample_exact(params, n, seed, budget)?;
    let rho = reference_family(params)?.to_measure();
    let mut hits = 0u64;
    for (nu, count) in batch.counts() {
        let theta = nu.to_measure(params)?.to_float();
        if prohorov_distance(&theta, &rho) < epsilon {
            hits += count;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: u64,
    pub p_value: f64,
}

fn chi_square_p(statistic: f64, dof: u64) -> Result<f64> {
    if dof == 0 {
        return Ok(1.0);
    }
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::precondition(e.to_string()))?;
    Ok(1.0 - dist.cdf(statistic))
}

/// Goodness of fit of a batch against the exact atom probabilities. Atoms
/// with expected count below 5 are pooled into one bin so the chi-square
/// approximation stays honest.
pub fn chi_square_against_exact(batch: &SampleBatch, budget: u64) -> Result<ChiSquare> {
    let probs = exact_probabilities(&batch.params, budget)?;
    let counts = batch.counts();
    let n = batch.n_samples as f64;
    let mut statistic = 0.0;
    let mut bins = 0u64;
    let mut pooled_expected = 0.0;
    let mut pooled_observed = 0.0;
    for (nu, p) in &probs {
        let expected = n * p.to_f64().expect("probability fits f64");
        let observed = counts.get(nu).copied().unwrap_or(0) as f64;
        if expected < 5.0 {
            pooled_expected += expected;
            pooled_observed += observed;
        } else {
            statistic += (observed - expected).powi(2) / expected;
            bins += 1;
        }
    }
    if pooled_expected > 0.0 {
        statistic += (pooled_observed - pooled_expected).powi(2) / pooled_expected;
        bins += 1;
    }
    let dof = bins.saturating_sub(1);
    Ok(ChiSquare { statistic, dof, p_value: chi_square_p(statistic, dof)? })
}

/// Two-sample homogeneity test over the union of observed histograms.
pub fn chi_square_two_sample(a: &SampleBatch, b: &SampleBatch) -> Result<ChiSquare> {
    let counts_a = a.counts();
    let counts_b = b.counts();
    let n_a = a.n_samples as f64;
    let n_b = b.n_samples as f64;
    let keys: std::collections::BTreeSet<&Occupancy> =
        counts_a.keys().chain(counts_b.keys()).collect();
    let mut statistic = 0.0;
    for key in &keys {
        let obs_a = counts_a.get(*key).copied().unwrap_or(0) as f64;
        let obs_b = counts_b.get(*key).copied().unwrap_or(0) as f64;
        let pooled = (obs_a + obs_b) / (n_a + n_b);
        statistic += (obs_a - n_a * pooled).powi(2) / (n_a * pooled);
        statistic += (obs_b - n_b * pooled).powi(2) / (n_b * pooled);
    }
    let dof = (keys.len() as u64).saturating_sub(1);
    Ok(ChiSquare { statistic, dof, p_value: chi_square_p(statistic, dof)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::DEFAULT_BUDGET;
    use crate::lde::equilibrium_ball_mass;
    use num_integer::gcd;

    fn params(b: u64, n: u64, k: u64, m: u64) -> ModelParams {
        let g = gcd(k, n);
        ModelParams::new(b, k / g, n / g, n, m).unwrap()
    }

    fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(f)
    }

    #[test]
    fn rejection_rate_tracks_exact_ratio() {
        let batch = sample_rejection(&params(1, 2, 4, 2), 4000, 11, DEFAULT_BUDGET).unwrap();
        let rate = batch.acceptance_rate.unwrap();
        assert!((rate - 14.0 / 16.0).abs() < 0.03, "{rate}");
        let batch = sample_rejection(&params(1, 3, 6, 3), 4000, 12, DEFAULT_BUDGET).unwrap();
        let rate = batch.acceptance_rate.unwrap();
        assert!((rate - 540.0 / 729.0).abs() < 0.03, "{rate}");
    }

    #[test]
    fn unconstrained_model_accepts_every_draw() {
        let batch = sample_rejection(&params(0, 3, 5, 3), 500, 5, DEFAULT_BUDGET).unwrap();
        assert_eq!(batch.acceptance_rate, Some(1.0));
        for nu in &batch.occupancy_histograms {
            nu.validate(&batch.params).unwrap();
        }
    }

    #[test]
    fn guard_refuses_collapsing_acceptance() {
        // b=2 at N=16 leaves a sliver of N^K: estimated acceptance ~1e-8
        let p = params(2, 16, 32, 3);
        let err = sample_rejection(&p, 10, 1, DEFAULT_BUDGET).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)), "{err}");
        assert!(err.to_string().contains("exact two-stage"));
    }

    #[test]
    fn exact_frequencies_match_probabilities() {
        let p = params(1, 3, 6, 3);
        let batch = sample_exact(&p, 20_000, 42, DEFAULT_BUDGET).unwrap();
        let counts = batch.counts();
        let expect: [(Occupancy, f64); 3] = [
            (Occupancy::from_pairs(&[(1, 2), (4, 1)]).unwrap(), 90.0 / 540.0),
            (Occupancy::from_pairs(&[(1, 1), (2, 1), (3, 1)]).unwrap(), 360.0 / 540.0),
            (Occupancy::from_pairs(&[(2, 3)]).unwrap(), 90.0 / 540.0),
        ];
        for (nu, prob) in expect {
            let freq = counts[&nu] as f64 / 20_000.0;
            let sigma = (prob * (1.0 - prob) / 20_000.0).sqrt();
            assert!((freq - prob).abs() < 3.0 * sigma, "{nu:?}: {freq} vs {prob}");
        }
        let fit = chi_square_against_exact(&batch, DEFAULT_BUDGET).unwrap();
        assert!(fit.p_value > 0.001, "{fit:?}");
    }

    #[test]
    fn samplers_agree_with_each_other() {
        let p = params(1, 3, 6, 3);
        let exact = sample_exact(&p, 10_000, 7, DEFAULT_BUDGET).unwrap();
        let reject = sample_rejection(&p, 10_000, 8, DEFAULT_BUDGET).unwrap();
        let test = chi_square_two_sample(&exact, &reject).unwrap();
        assert!(test.p_value > 0.001, "{test:?}");
    }

    #[test]
    fn batches_identical_across_thread_counts() {
        let p = params(1, 3, 6, 3);
        let serial = in_pool(1, || {
            (
                sample_exact(&p, 300, 9, DEFAULT_BUDGET).unwrap(),
                sample_rejection(&p, 200, 9, DEFAULT_BUDGET).unwrap(),
                sample_configurations(&p, 150, 9, DEFAULT_BUDGET).unwrap(),
            )
        });
        let wide = in_pool(4, || {
            (
                sample_exact(&p, 300, 9, DEFAULT_BUDGET).unwrap(),
                sample_rejection(&p, 200, 9, DEFAULT_BUDGET).unwrap(),
                sample_configurations(&p, 150, 9, DEFAULT_BUDGET).unwrap(),
            )
        });
        assert_eq!(serial.0.occupancy_histograms, wide.0.occupancy_histograms);
        assert_eq!(serial.1.occupancy_histograms, wide.1.occupancy_histograms);
        assert_eq!(serial.1.acceptance_rate, wide.1.acceptance_rate);
        assert_eq!(serial.2, wide.2);
    }

    #[test]
    fn second_stage_is_uniform_within_the_class() {
        let p = params(1, 2, 4, 2);
        let configs = sample_configurations(&p, 16_000, 21, DEFAULT_BUDGET).unwrap();
        let mut split: BTreeMap<(Vec<u64>, Vec<u32>), u64> = BTreeMap::new();
        let mut subtotal = 0u64;
        for config in configs {
            if config.site_class.contains(&3) {
                subtotal += 1;
                *split
                    .entry((config.site_class, config.site_of_particle))
                    .or_insert(0) += 1;
            }
        }
        assert_eq!(split.len(), 8);
        let sigma = (0.125 * 0.875 / subtotal as f64).sqrt();
        for (config, count) in split {
            let freq = count as f64 / subtotal as f64;
            assert!((freq - 0.125).abs() < 3.5 * sigma, "{config:?}: {freq}");
        }
    }

    #[test]
    fn one_site_marginal_in_rationals() {
        let marginal = marginal_exact(&params(1, 2, 4, 2), DEFAULT_BUDGET).unwrap();
        let q = |n: i64, d: i64| BigRational::new(n.into(), d.into());
        assert_eq!(marginal.weight(1), q(2, 7));
        assert_eq!(marginal.weight(2), q(3, 7));
        assert_eq!(marginal.weight(3), q(2, 7));
        assert_eq!(marginal.mean(), q(2, 1));
    }

    #[test]
    fn mc_marginal_tracks_exact_marginal() {
        for p in [params(1, 3, 6, 3), params(0, 3, 5, 3)] {
            let exact = marginal_exact(&p, DEFAULT_BUDGET).unwrap().to_float();
            let mc = marginal_mc(&p, 20_000, 33, DEFAULT_BUDGET).unwrap();
            for (&j, &prob) in exact.entries() {
                let sigma = (prob * (1.0 - prob) / 20_000.0).sqrt();
                let freq = mc.weight(j);
                assert!((freq - prob).abs() < 3.5 * sigma, "j={j}: {freq} vs {prob}");
            }
        }
    }

    #[test]
    fn concentration_matches_exact_ball_mass() {
        let p = params(1, 8, 16, 3);
        let exact = equilibrium_ball_mass(&p, 0.3, DEFAULT_BUDGET)
            .unwrap()
            .to_f64()
            .unwrap();
        let frac = empirical_theta_concentration(&p, 20_000, 3, 0.3, DEFAULT_BUDGET).unwrap();
        let sigma = (exact * (1.0 - exact) / 20_000.0).sqrt();
        assert!((frac - exact).abs() < 3.5 * sigma, "{frac} vs {exact}");
        let all = empirical_theta_concentration(&p, 2_000, 3, 1.0, DEFAULT_BUDGET).unwrap();
        assert_eq!(all, 1.0);
    }
}
