use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Finitely supported probability measure on the integers `>= floor` with
/// exact rational weights. Zero-weight points are not stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Measure {
    floor: u64,
    entries: BTreeMap<u64, BigRational>,
}

/// Float-weighted counterpart used on the analysis paths (entropy, solver,
/// ball membership), where the values are transcendental anyway.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMeasure {
    floor: u64,
    entries: BTreeMap<u64, f64>,
}

/// Tolerated drift of a float-mode total from 1.
pub const FLOAT_TOTAL_TOL: f64 = 1e-12;

impl Measure {
    pub fn from_entries(
        floor: u64,
        entries: impl IntoIterator<Item = (u64, BigRational)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut total = BigRational::zero();
        for (j, w) in entries {
            if j < floor {
                return Err(Error::precondition(format!(
                    "support point {j} below floor {floor}"
                )));
            }
            if w.is_negative() {
                return Err(Error::precondition(format!("negative weight at {j}")));
            }
            if w.is_zero() {
                continue;
            }
            total += &w;
            if map.insert(j, w).is_some() {
                return Err(Error::precondition(format!("duplicate support point {j}")));
            }
        }
        if !total.is_one() {
            return Err(Error::precondition(format!("weights sum to {total}, not 1")));
        }
        Ok(Measure { floor, entries: map })
    }

    pub fn dirac(floor: u64, j: u64) -> Result<Self> {
        Self::from_entries(floor, [(j, BigRational::one())])
    }

    pub fn floor(&self) -> u64 {
        self.floor
    }

    pub fn entries(&self) -> &BTreeMap<u64, BigRational> {
        &self.entries
    }

    pub fn weight(&self, j: u64) -> BigRational {
        self.entries.get(&j).cloned().unwrap_or_else(BigRational::zero)
    }

    pub fn mean(&self) -> BigRational {
        self.entries
            .iter()
            .map(|(j, w)| w * BigRational::from(BigInt::from(*j)))
            .sum()
    }

    pub fn max_support(&self) -> Option<u64> {
        self.entries.keys().next_back().copied()
    }

    pub fn min_support(&self) -> Option<u64> {
        self.entries.keys().next().copied()
    }

    pub fn to_float(&self) -> FloatMeasure {
        FloatMeasure {
            floor: self.floor,
            entries: self
                .entries
                .iter()
                .map(|(&j, w)| (j, w.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

impl FloatMeasure {
    pub fn from_entries(
        floor: u64,
        entries: impl IntoIterator<Item = (u64, f64)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut total = 0.0;
        for (j, w) in entries {
            if j < floor {
                return Err(Error::precondition(format!(
                    "support point {j} below floor {floor}"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::precondition(format!("bad weight {w} at {j}")));
            }
            if w == 0.0 {
                continue;
            }
            total += w;
            if map.insert(j, w).is_some() {
                return Err(Error::precondition(format!("duplicate support point {j}")));
            }
        }
        if (total - 1.0).abs() > FLOAT_TOTAL_TOL {
            return Err(Error::precondition(format!(
                "weights sum to {total}, outside 1 +/- {FLOAT_TOTAL_TOL}"
            )));
        }
        Ok(FloatMeasure { floor, entries: map })
    }

    /// Skips the total check; for truncations of infinite-support measures
    /// whose recorded tail defect is below the truncation tolerance.
    pub fn from_entries_truncated(floor: u64, entries: impl IntoIterator<Item = (u64, f64)>) -> Self {
        FloatMeasure {
            floor,
            entries: entries.into_iter().filter(|&(_, w)| w > 0.0).collect(),
        }
    }

    pub fn floor(&self) -> u64 {
        self.floor
    }

    pub fn entries(&self) -> &BTreeMap<u64, f64> {
        &self.entries
    }

    pub fn weight(&self, j: u64) -> f64 {
        self.entries.get(&j).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn mean(&self) -> f64 {
        self.entries.iter().map(|(&j, w)| j as f64 * w).sum()
    }

    pub fn min_support(&self) -> Option<u64> {
        self.entries.keys().next().copied()
    }

    pub fn max_support(&self) -> Option<u64> {
        self.entries.keys().next_back().copied()
    }
}

/// Distance used for every ball statement in the crate. On integer-supported
/// measures the Prohorov distance coincides with total variation whenever
/// that value is below 1, because epsilon-enlargement with epsilon < 1 does
/// not grow a set of integers; so the returned value is min(TV, 1) with
/// TV = (1/2) sum |mu_j - nu_j|.
pub fn prohorov_distance(mu: &FloatMeasure, nu: &FloatMeasure) -> f64 {
    let mut tv = 0.0;
    for (&j, w) in &mu.entries {
        tv += (w - nu.weight(j)).abs();
    }
    for (&j, w) in &nu.entries {
        if !mu.entries.contains_key(&j) {
            tv += w.abs();
        }
    }
    (tv / 2.0).min(1.0)
}

/// Unclamped total variation, (1/2) sum |mu_j - nu_j|. Agrees with the
/// Prohorov distance below 1 but never saturates, so strict-decrease
/// assertions stay meaningful.
pub fn total_variation(mu: &FloatMeasure, nu: &FloatMeasure) -> f64 {
    let mut tv = 0.0;
    for (&j, w) in &mu.entries {
        tv += (w - nu.weight(j)).abs();
    }
    for (&j, w) in &nu.entries {
        if !mu.entries.contains_key(&j) {
            tv += w.abs();
        }
    }
    tv / 2.0
}

/// The mean-c escape blend: mixes `theta` (mean beta < c) with a point mass
/// at `n` so the result keeps mean exactly c while converging weakly back to
/// `theta` as `n` grows. Witnesses that the mean-c constraint set is not
/// weakly closed.
pub fn escape_sequence(theta: &Measure, c: &BigRational, n: u64) -> Result<Measure> {
    let beta = theta.mean();
    if beta >= *c {
        return Err(Error::precondition(format!(
            "escape blend needs mean(theta) < c, got {beta} >= {c}"
        )));
    }
    let n_rat = BigRational::from(BigInt::from(n));
    if n_rat <= *c {
        return Err(Error::precondition(format!("atom {n} must exceed c = {c}")));
    }
    let denom = &n_rat - &beta;
    let keep = (&n_rat - c) / &denom; // weight multiplying theta
    let atom = (c - &beta) / &denom; // weight of the far atom
    let mut entries: BTreeMap<u64, BigRational> = theta
        .entries
        .iter()
        .map(|(&j, w)| (j, w * &keep))
        .collect();
    *entries.entry(n).or_insert_with(BigRational::zero) += atom;
    Measure::from_entries(theta.floor, entries)
}

// Measures serialize as {"b": floor, "entries": {"j": "num/den" | float}}.
// Rational weights become "num/den" strings so nothing is lost in transit.

#[derive(Serialize, Deserialize)]
struct MeasureWire<T> {
    b: u64,
    entries: BTreeMap<String, T>,
}

impl Serialize for Measure {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MeasureWire {
            b: self.floor,
            entries: self
                .entries
                .iter()
                .map(|(j, w)| (j.to_string(), w.to_string()))
                .collect(),
        }
        .serialize(s)
    }
}

impl Serialize for FloatMeasure {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MeasureWire {
            b: self.floor,
            entries: self
                .entries
                .iter()
                .map(|(j, w)| (j.to_string(), *w))
                .collect(),
        }
        .serialize(s)
    }
}

fn parse_rational(text: &str) -> Option<BigRational> {
    match text.split_once('/') {
        Some((num, den)) => Some(BigRational::new(
            num.trim().parse::<BigInt>().ok()?,
            den.trim().parse::<BigInt>().ok()?,
        )),
        None => Some(BigRational::from(text.trim().parse::<BigInt>().ok()?)),
    }
}

impl<'de> Deserialize<'de> for Measure {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = MeasureWire::<serde_json::Value>::deserialize(d)?;
        let mut entries = Vec::with_capacity(wire.entries.len());
        for (j, v) in wire.entries {
            let j: u64 = j.parse().map_err(D::Error::custom)?;
            let w = match &v {
                serde_json::Value::String(s) => parse_rational(s)
                    .ok_or_else(|| D::Error::custom(format!("bad rational {s:?}")))?,
                serde_json::Value::Number(x) => {
                    let f = x.as_f64().ok_or_else(|| D::Error::custom("bad number"))?;
                    BigRational::from_float(f)
                        .ok_or_else(|| D::Error::custom("non-finite weight"))?
                }
                other => return Err(D::Error::custom(format!("bad weight {other}"))),
            };
            entries.push((j, w));
        }
        Measure::from_entries(wire.b, entries).map_err(D::Error::custom)
    }
}

impl<'de> Deserialize<'de> for FloatMeasure {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = MeasureWire::<serde_json::Value>::deserialize(d)?;
        let mut entries = Vec::with_capacity(wire.entries.len());
        for (j, v) in wire.entries {
            let j: u64 = j.parse().map_err(D::Error::custom)?;
            let w = match &v {
                serde_json::Value::String(s) => parse_rational(s)
                    .and_then(|q| q.to_f64())
                    .ok_or_else(|| D::Error::custom(format!("bad rational {s:?}")))?,
                serde_json::Value::Number(x) => {
                    x.as_f64().ok_or_else(|| D::Error::custom("bad number"))?
                }
                other => return Err(D::Error::custom(format!("bad weight {other}"))),
            };
            entries.push((j, w));
        }
        FloatMeasure::from_entries(wire.b, entries).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn fm(floor: u64, pairs: &[(u64, f64)]) -> FloatMeasure {
        FloatMeasure::from_entries(floor, pairs.iter().copied()).unwrap()
    }

    #[test]
    fn total_must_be_one() {
        assert!(Measure::from_entries(1, [(1, rat(1, 2))]).is_err());
        assert!(Measure::from_entries(1, [(1, rat(1, 2)), (3, rat(1, 2))]).is_ok());
    }

    #[test]
    fn distance_of_identical_measures_is_zero() {
        let theta = fm(1, &[(1, 0.5), (3, 0.5)]);
        assert_eq!(prohorov_distance(&theta, &theta), 0.0);
    }

    #[test]
    fn disjoint_point_masses_cap_at_one() {
        let a = fm(1, &[(1, 1.0)]);
        let b = fm(1, &[(2, 1.0)]);
        assert_eq!(prohorov_distance(&a, &b), 1.0);
    }

    #[test]
    fn half_overlap_distance() {
        let a = fm(1, &[(1, 0.5), (3, 0.5)]);
        let b = fm(1, &[(1, 1.0)]);
        assert_eq!(prohorov_distance(&a, &b), 0.5);
    }

    #[test]
    fn escape_blend_keeps_mean_c() {
        let theta = Measure::dirac(1, 1).unwrap();
        let c = rat(2, 1);
        let out = escape_sequence(&theta, &c, 5).unwrap();
        assert_eq!(out.weight(1), rat(3, 4));
        assert_eq!(out.weight(5), rat(1, 4));
        assert_eq!(out.mean(), c);

        let far = escape_sequence(&theta, &c, 100).unwrap();
        assert_eq!(far.weight(1), rat(98, 99));
        assert_eq!(far.mean(), c);
        // The far blend is the weakly closer one even though both have mean 2.
        let d_near = prohorov_distance(&out.to_float(), &theta.to_float());
        let d_far = prohorov_distance(&far.to_float(), &theta.to_float());
        assert!(d_far < d_near);
    }

    #[test]
    fn escape_blend_rejects_mean_at_c() {
        let theta = Measure::dirac(2, 2).unwrap();
        assert!(escape_sequence(&theta, &rat(2, 1), 5).is_err());
    }

    #[test]
    fn measure_json_round_trip() {
        let theta = Measure::from_entries(1, [(1, rat(1, 2)), (3, rat(1, 2))]).unwrap();
        let json = serde_json::to_string(&theta).unwrap();
        assert!(json.contains("\"1/2\""));
        let back: Measure = serde_json::from_str(&json).unwrap();
        assert_eq!(back, theta);

        let f: FloatMeasure = serde_json::from_str(&json).unwrap();
        assert_eq!(f.weight(3), 0.5);
    }
}
