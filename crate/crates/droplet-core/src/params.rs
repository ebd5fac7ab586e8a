use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One instance of the droplet model: `k` labeled particles on `n` sites,
/// every site holding at least `b` particles, at most `m` droplet sizes
/// present. The density `c = c_num/c_den` is kept as a reduced fraction so
/// that `k = n * c` stays exact; `n` must be a multiple of `c_den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelParams {
    pub b: u64,
    pub c_num: u64,
    pub c_den: u64,
    pub n: u64,
    pub k: u64,
    pub m: u64,
}

impl ModelParams {
    /// Validates and builds a parameter set. `m` is the support cap; use
    /// [`SupportCap`] to derive it from `n`, or pass `n` for an uncapped model.
    pub fn new(b: u64, c_num: u64, c_den: u64, n: u64, m: u64) -> Result<Self> {
        if c_num == 0 || c_den == 0 {
            return Err(Error::precondition("c must be a positive rational"));
        }
        if c_num.gcd(&c_den) != 1 {
            return Err(Error::precondition(format!(
                "c must be in lowest terms, got {c_num}/{c_den}"
            )));
        }
        if n == 0 || n % c_den != 0 {
            return Err(Error::precondition(format!(
                "n must be a positive multiple of {c_den}, got {n}"
            )));
        }
        // c >= b makes the mean constraint attainable with parts >= b;
        // c = b is the degenerate single-atom model, still countable, while
        // operations that need the solved Poisson parameter require c > b
        // and reject it themselves.
        if c_num < b * c_den {
            return Err(Error::precondition(format!(
                "need c >= b, got c = {c_num}/{c_den}, b = {b}"
            )));
        }
        let k = (n / c_den) * c_num;
        if b >= 1 && k < n {
            return Err(Error::precondition(format!(
                "need k >= n when b >= 1, got n = {n}, k = {k}"
            )));
        }
        if m < 2 || m > n {
            return Err(Error::precondition(format!(
                "support cap must satisfy 2 <= m <= n, got m = {m}, n = {n}"
            )));
        }
        Ok(ModelParams { b, c_num, c_den, n, k, m })
    }

    /// Same parameters with the support cap widened to `n`, which never
    /// constrains anything: no occupancy vector has more than `n` distinct
    /// droplet sizes.
    pub fn uncapped(&self) -> ModelParams {
        ModelParams { m: self.n, ..*self }
    }

    pub fn c_rational(&self) -> BigRational {
        BigRational::new(BigInt::from(self.c_num), BigInt::from(self.c_den))
    }

    pub fn c_f64(&self) -> f64 {
        self.c_num as f64 / self.c_den as f64
    }

    /// Largest droplet size any configuration can realize: all other sites at
    /// the minimum `b` leaves `k - b(n-1)` particles for one site.
    pub fn max_class(&self) -> u64 {
        self.k - self.b * (self.n - 1)
    }
}

/// The support-cap schedule `m(n) = max(2, ceil(n^delta))`. Any exponent in
/// (0, 1/2) keeps `m(n) -> infinity` while `m(n)^2 / n -> 0`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SupportCap {
    pub delta: f64,
}

impl Default for SupportCap {
    fn default() -> Self {
        SupportCap { delta: 0.4 }
    }
}

impl SupportCap {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(Error::precondition(format!(
                "support-cap exponent must lie in (0, 1/2), got {delta}"
            )));
        }
        Ok(SupportCap { delta })
    }

    pub fn of(&self, n: u64) -> u64 {
        let m = (n as f64).powf(self.delta).ceil() as u64;
        m.clamp(2, n)
    }
}

/// Support-cap rule for schedules that revisit several N: either the
/// sublinear exponent cap or no cap at all (m = N, the whole space).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum CapChoice {
    Exponent(SupportCap),
    Uncapped,
}

impl Default for CapChoice {
    fn default() -> Self {
        CapChoice::Exponent(SupportCap::default())
    }
}

impl From<SupportCap> for CapChoice {
    fn from(cap: SupportCap) -> Self {
        CapChoice::Exponent(cap)
    }
}

impl CapChoice {
    pub fn of(&self, n: u64) -> u64 {
        match self {
            CapChoice::Exponent(cap) => cap.of(n),
            CapChoice::Uncapped => n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_admissible_multiples() {
        let p = ModelParams::new(1, 3, 2, 4, 2).unwrap();
        assert_eq!(p.k, 6);
        assert_eq!(p.max_class(), 3);
    }

    #[test]
    fn rejects_non_multiple_n() {
        assert!(ModelParams::new(1, 3, 2, 3, 2).is_err());
    }

    #[test]
    fn rejects_unreduced_c() {
        assert!(ModelParams::new(1, 4, 2, 4, 2).is_err());
    }

    #[test]
    fn c_below_b_rejected_but_degenerate_c_equals_b_allowed() {
        assert!(ModelParams::new(2, 3, 2, 4, 2).is_err());
        let p = ModelParams::new(2, 2, 1, 4, 2).unwrap();
        assert_eq!(p.k, 8);
        assert_eq!(p.max_class(), 2);
    }

    #[test]
    fn cap_schedule_grows_sublinearly() {
        let cap = SupportCap::default();
        assert_eq!(cap.of(2), 2);
        assert_eq!(cap.of(12), 3);
        assert_eq!(cap.of(100), 7);
        // m(n)^2 / n shrinks along a doubling schedule.
        let ratio = |n: u64| (cap.of(n) * cap.of(n)) as f64 / n as f64;
        assert!(ratio(1 << 20) < ratio(1 << 10));
    }
}
