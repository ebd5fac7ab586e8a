use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;

use crate::error::{Error, Result};
use crate::measure::Measure;
use crate::params::ModelParams;

/// Occupancy histogram of a configuration: `entries[j]` is the number of
/// sites holding exactly `j` particles. Keys with zero count are absent, so
/// the number of keys is the number of droplet sizes present. For `b = 0`
/// the key `j = 0` counts the empty sites and participates in the support
/// cap like every other size.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Occupancy {
    entries: BTreeMap<u64, u64>,
}

impl serde::Serialize for Occupancy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries.serialize(serializer)
    }
}

impl Occupancy {
    pub fn new(entries: BTreeMap<u64, u64>) -> Result<Self> {
        if entries.values().any(|&v| v == 0) {
            return Err(Error::precondition("zero-count droplet class present"));
        }
        Ok(Occupancy { entries })
    }

    pub fn from_pairs(pairs: &[(u64, u64)]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for &(j, v) in pairs {
            if entries.insert(j, v).is_some() {
                return Err(Error::precondition(format!("duplicate droplet size {j}")));
            }
        }
        Self::new(entries)
    }

    /// Histogram of one explicit placement, `site_of[i]` being the site of
    /// particle `i`. Sites below `b` particles make the placement invalid.
    pub fn from_placement(site_of: &[u32], params: &ModelParams) -> Result<Self> {
        let mut counts = vec![0u64; params.n as usize];
        for &s in site_of {
            counts[s as usize] += 1;
        }
        let mut entries = BTreeMap::new();
        for &cnt in &counts {
            if cnt < params.b {
                return Err(Error::precondition("site below minimum occupancy"));
            }
            *entries.entry(cnt).or_insert(0) += 1;
        }
        Occupancy::new(entries)
    }

    pub fn entries(&self) -> &BTreeMap<u64, u64> {
        &self.entries
    }

    pub fn count(&self, j: u64) -> u64 {
        self.entries.get(&j).copied().unwrap_or(0)
    }

    /// Number of droplet sizes present, written |nu|_+ .
    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    pub fn sites(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn particles(&self) -> u64 {
        self.entries.iter().map(|(j, v)| j * v).sum()
    }

    /// Both conservation laws plus the support window and cap.
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.sites() != params.n {
            return Err(Error::precondition(format!(
                "site count {} != n = {}",
                self.sites(),
                params.n
            )));
        }
        if self.particles() != params.k {
            return Err(Error::precondition(format!(
                "particle count {} != k = {}",
                self.particles(),
                params.k
            )));
        }
        if self.support_len() as u64 > params.m {
            return Err(Error::precondition(format!(
                "{} droplet sizes exceed the cap m = {}",
                self.support_len(),
                params.m
            )));
        }
        if let Some((&lo, _)) = self.entries.iter().next() {
            let hi = *self.entries.keys().next_back().unwrap();
            if lo < params.b || hi > params.max_class() {
                return Err(Error::precondition(format!(
                    "droplet sizes [{lo}, {hi}] outside [{}, {}]",
                    params.b,
                    params.max_class()
                )));
            }
        }
        Ok(())
    }

    /// The number-density measure theta with theta_j = nu_j / n, exact. Its
    /// mean is exactly c by the conservation laws.
    pub fn to_measure(&self, params: &ModelParams) -> Result<Measure> {
        self.validate(params)?;
        let n = BigInt::from(params.n);
        Measure::from_entries(
            params.b,
            self.entries
                .iter()
                .map(|(&j, &v)| (j, BigRational::new(BigInt::from(v), n.clone()))),
        )
    }

    /// Canonical compact form, e.g. `1:2,4:1` for two singletons and one
    /// four-droplet. Stable across runs; used as a row key in CSV output.
    pub fn id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Occupancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (j, v) in &self.entries {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{j}:{v}")?;
            first = false;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_n3_c2() -> ModelParams {
        ModelParams::new(1, 2, 1, 3, 3).unwrap()
    }

    #[test]
    fn conservation_laws_checked() {
        let p = params_n3_c2();
        let good = Occupancy::from_pairs(&[(1, 2), (4, 1)]).unwrap();
        assert!(good.validate(&p).is_ok());
        let bad_sites = Occupancy::from_pairs(&[(1, 1), (4, 1)]).unwrap();
        assert!(bad_sites.validate(&p).is_err());
        let bad_particles = Occupancy::from_pairs(&[(1, 2), (3, 1)]).unwrap();
        assert!(bad_particles.validate(&p).is_err());
    }

    #[test]
    fn support_cap_enforced() {
        let p = ModelParams::new(1, 2, 1, 3, 2).unwrap();
        let three_sizes = Occupancy::from_pairs(&[(1, 1), (2, 1), (3, 1)]).unwrap();
        assert!(three_sizes.validate(&p).is_err());
    }

    #[test]
    fn measure_mean_is_c() {
        let p = params_n3_c2();
        let nu = Occupancy::from_pairs(&[(1, 2), (4, 1)]).unwrap();
        let theta = nu.to_measure(&p).unwrap();
        assert_eq!(theta.mean(), p.c_rational());
    }

    #[test]
    fn placement_histogram_counts_empty_sites() {
        let p = ModelParams::new(0, 1, 2, 2, 2).unwrap();
        let nu = Occupancy::from_placement(&[0], &p).unwrap();
        assert_eq!(nu.count(0), 1);
        assert_eq!(nu.count(1), 1);
        assert_eq!(nu.support_len(), 2);
    }

    #[test]
    fn id_is_canonical() {
        let nu = Occupancy::from_pairs(&[(4, 1), (1, 2)]).unwrap();
        assert_eq!(nu.id(), "1:2,4:1");
    }
}
