//! Droplet occupancy model: K particles dropped uniformly on N sites,
//! conditioned on every site holding at least b and on the number of
//! distinct occupancies staying under a cap m. The crate provides exact
//! counting of the admissible occupancy vectors, the conditioned-Poisson
//! reference family and its parameter solver, relative-entropy identities
//! and minimizations, a local large-deviation estimate with verifiable
//! error terms, an explicit near-optimal approximation scheme, and exact
//! and rejection samplers.

pub mod approx;
pub mod counting;
pub mod entropy;
pub mod error;
pub mod lde;
pub mod measure;
pub mod occupancy;
pub mod params;
pub mod poisson;
pub mod sample;

pub use approx::{
    build_approximation, lemma_b3_bounds, mean_c_target_above_threshold,
    rational_poisson_target, ApproximationReport,
};
pub use counting::{
    bender_log_asymptotic, card_delta, card_omega, card_omega_closed_form, enumerate_admissible,
    max_support, max_support_bound, stirling2, CountReport, StirlingTable, DEFAULT_BUDGET,
};
pub use entropy::{min_entropy_over_mean_c, relative_entropy};
pub use error::{Error, Result};
pub use lde::{
    equilibrium_ball_mass, exact_probabilities, exact_probability, lde_sweep, reference_family,
};
pub use measure::{escape_sequence, prohorov_distance, total_variation, FloatMeasure, Measure};
pub use occupancy::Occupancy;
pub use params::{CapChoice, ModelParams, SupportCap};
pub use poisson::{
    gamma_mean, log_z, solve_alpha, AlphaSolveReport, IterateDirection, PoissonTail,
};
pub use sample::{marginal_exact, sample_exact, sample_rejection, SampleBatch};
