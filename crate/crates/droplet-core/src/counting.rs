use std::sync::atomic::{AtomicU64, Ordering};

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::occupancy::Occupancy;
use crate::params::ModelParams;
use crate::poisson::{log_z, solve_alpha, ALPHA_TOL};

/// Hard cap on enumerated occupancy vectors unless the caller raises it.
pub const DEFAULT_BUDGET: u64 = 10_000_000;

/// Memoized exact factorials 0! ..= n!.
pub struct Factorials {
    table: Vec<BigUint>,
}

impl Factorials {
    pub fn upto(n: u64) -> Self {
        let mut table = Vec::with_capacity(n as usize + 1);
        table.push(BigUint::from(1u32));
        for i in 1..=n {
            let next = table.last().unwrap() * i;
            table.push(next);
        }
        Factorials { table }
    }

    pub fn get(&self, i: u64) -> &BigUint {
        &self.table[i as usize]
    }

    pub fn binomial(&self, n: u64, k: u64) -> BigUint {
        if k > n {
            return BigUint::zero();
        }
        self.get(n) / (self.get(k) * self.get(n - k))
    }
}

/// Natural log of a big natural number: top 53 bits as mantissa plus a power
/// of two. ln(0) is -infinity.
pub fn ln_biguint(x: &BigUint) -> f64 {
    if x.is_zero() {
        return f64::NEG_INFINITY;
    }
    let bits = x.bits();
    if bits <= 53 {
        return x.to_f64().unwrap().ln();
    }
    let shift = bits - 53;
    let mantissa = (x >> shift).to_f64().unwrap();
    mantissa.ln() + shift as f64 * std::f64::consts::LN_2
}

#[derive(Clone, Copy)]
struct State {
    rem_k: u64,
    rem_n: u64,
    cap: u64,
    distinct_left: u64,
}

/// Children of an enumeration node: each choice of the largest remaining
/// part value v (ascending) and its multiplicity (ascending), pruned so that
/// every emitted branch can still be completed with parts in [b, v-1].
fn child_states(b: u64, st: State) -> Vec<((u64, u64), State)> {
    let mut out = Vec::new();
    if st.rem_n == 0 || st.distinct_left == 0 {
        return out;
    }
    let lo = b.max(st.rem_k.div_ceil(st.rem_n));
    let hi = st.cap.min(st.rem_k.saturating_sub(b.saturating_mul(st.rem_n - 1)));
    for v in lo..=hi {
        for mult in 1..=st.rem_n {
            if v * mult > st.rem_k {
                break;
            }
            let rem_k = st.rem_k - v * mult;
            let rem_n = st.rem_n - mult;
            if rem_n == 0 {
                if rem_k == 0 {
                    let child = State { rem_k, rem_n, cap: 0, distinct_left: st.distinct_left - 1 };
                    out.push(((v, mult), child));
                }
                continue;
            }
            // parts strictly below v must absorb rem_k over rem_n slots
            if v == 0 || st.distinct_left < 2 {
                continue;
            }
            if rem_k < b * rem_n || rem_k > (v - 1) * rem_n {
                continue;
            }
            let child = State { rem_k, rem_n, cap: v - 1, distinct_left: st.distinct_left - 1 };
            out.push(((v, mult), child));
        }
    }
    out
}

struct Enumerator<'a> {
    b: u64,
    budget: u64,
    emitted: &'a AtomicU64,
}

impl Enumerator<'_> {
    fn walk<F>(&self, stack: &mut Vec<(u64, u64)>, st: State, f: &mut F) -> Result<()>
    where
        F: FnMut(&Occupancy) -> Result<()>,
    {
        if st.rem_n == 0 {
            if self.emitted.fetch_add(1, Ordering::Relaxed) >= self.budget {
                return Err(Error::Budget { cap: self.budget });
            }
            let nu = Occupancy::from_pairs(stack)?;
            return f(&nu);
        }
        for ((v, mult), child) in child_states(self.b, st) {
            stack.push((v, mult));
            let res = self.walk(stack, child, f);
            stack.pop();
            res?;
        }
        Ok(())
    }
}

fn root_state(params: &ModelParams) -> State {
    State {
        rem_k: params.k,
        rem_n: params.n,
        cap: params.max_class(),
        distinct_left: params.m,
    }
}

/// Streams every admissible occupancy vector (partition of K into exactly N
/// parts, each >= b, at most m distinct part sizes) in ascending lexicographic
/// order of the parts written largest first. Returns how many were visited.
pub fn visit_admissible<F>(params: &ModelParams, budget: u64, mut f: F) -> Result<u64>
where
    F: FnMut(&Occupancy) -> Result<()>,
{
    let emitted = AtomicU64::new(0);
    let enumerator = Enumerator { b: params.b, budget, emitted: &emitted };
    enumerator.walk(&mut Vec::new(), root_state(params), &mut f)?;
    Ok(emitted.load(Ordering::Relaxed))
}

pub fn enumerate_admissible(params: &ModelParams, budget: u64) -> Result<Vec<Occupancy>> {
    let mut out = Vec::new();
    visit_admissible(params, budget, |nu| {
        out.push(nu.clone());
        Ok(())
    })?;
    Ok(out)
}

fn card_delta_with(nu: &Occupancy, params: &ModelParams, facts: &Factorials) -> BigUint {
    let mut value = facts.get(params.n).clone();
    for &mult in nu.entries().values() {
        value = exact_div(value, facts.get(mult));
    }
    value *= facts.get(params.k);
    for (&j, &mult) in nu.entries() {
        for _ in 0..mult {
            value = exact_div(value, facts.get(j));
        }
    }
    value
}

fn exact_div(x: BigUint, d: &BigUint) -> BigUint {
    let (q, r) = x.div_rem(d);
    debug_assert!(r.is_zero());
    q
}

/// Number of placements of K labeled particles on N labeled sites whose
/// occupancy histogram is exactly nu: (N!/prod nu_j!)(K!/prod (j!)^nu_j).
pub fn card_delta(nu: &Occupancy, params: &ModelParams) -> Result<BigUint> {
    nu.validate(params)?;
    let facts = Factorials::upto(params.k.max(params.n));
    Ok(card_delta_with(nu, params, &facts))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountReport {
    /// Cardinality of the largest single occupancy class (the mode).
    #[serde(with = "big_serde")]
    pub card_delta: BigUint,
    #[serde(with = "big_serde")]
    pub card_omega: BigUint,
    pub log_card_delta: f64,
    pub log_card_omega: f64,
    pub n_admissible: u64,
    /// Canonical id of the modal occupancy vector, when any is admissible.
    pub mode_nu: Option<String>,
}

struct Partial {
    sum: BigUint,
    best: BigUint,
    mode: Option<String>,
    count: u64,
}

impl Partial {
    fn new() -> Self {
        Partial { sum: BigUint::zero(), best: BigUint::zero(), mode: None, count: 0 }
    }

    fn absorb(&mut self, nu: &Occupancy, delta: BigUint) {
        self.count += 1;
        if delta > self.best {
            self.best = delta.clone();
            self.mode = Some(nu.id());
        }
        self.sum += delta;
    }
}

/// Exact cardinality of the whole admissible space, summed class by class.
/// Top-level branches (largest part value and multiplicity) run in parallel;
/// the reduction is big-integer addition, folded in branch order so the
/// modal tie-break is deterministic.
pub fn card_omega(params: &ModelParams, budget: u64) -> Result<CountReport> {
    let facts = Factorials::upto(params.k.max(params.n));
    let emitted = AtomicU64::new(0);
    let enumerator = Enumerator { b: params.b, budget, emitted: &emitted };
    let tops = child_states(params.b, root_state(params));
    let partials = tops
        .into_par_iter()
        .map(|((v, mult), st)| {
            let mut partial = Partial::new();
            let mut stack = vec![(v, mult)];
            enumerator.walk(&mut stack, st, &mut |nu| {
                partial.absorb(nu, card_delta_with(nu, params, &facts));
                Ok(())
            })?;
            Ok(partial)
        })
        .collect::<Result<Vec<Partial>>>()?;
    let mut merged = Partial::new();
    for p in partials {
        merged.count += p.count;
        merged.sum += &p.sum;
        if p.best > merged.best {
            merged.best = p.best;
            merged.mode = p.mode;
        }
    }
    Ok(CountReport {
        log_card_delta: ln_biguint(&merged.best),
        log_card_omega: ln_biguint(&merged.sum),
        card_delta: merged.best,
        card_omega: merged.sum,
        n_admissible: merged.count,
        mode_nu: merged.mode,
    })
}

/// Table of S_b(K, N): ways to partition a K-element set into N unlabeled
/// blocks of size at least b. S_1 is the classical Stirling number of the
/// second kind; the general recurrence
/// S_b(K,N) = N S_b(K-1,N) + C(K-1, b-1) S_b(K-b, N-1)
/// conditions on the block containing element K being larger than b (first
/// term) or exactly b (second: choose its b-1 companions).
pub struct StirlingTable {
    b: u64,
    table: Vec<Vec<BigUint>>,
}

impl StirlingTable {
    pub fn new(b: u64, k_max: u64, n_max: u64) -> Result<Self> {
        if b == 0 {
            return Err(Error::precondition("block floor b must be at least 1"));
        }
        let facts = Factorials::upto(k_max.max(1));
        let mut table = vec![vec![BigUint::zero(); n_max as usize + 1]; k_max as usize + 1];
        table[0][0] = BigUint::from(1u32);
        for k in 1..=k_max {
            for n in 1..=n_max.min(k) {
                if k < b * n {
                    continue;
                }
                let mut v = &table[(k - 1) as usize][n as usize] * n;
                if k >= b {
                    v += facts.binomial(k - 1, b - 1)
                        * &table[(k - b) as usize][(n - 1) as usize];
                }
                table[k as usize][n as usize] = v;
            }
        }
        Ok(StirlingTable { b, table })
    }

    pub fn b(&self) -> u64 {
        self.b
    }

    pub fn get(&self, k: u64, n: u64) -> &BigUint {
        &self.table[k as usize][n as usize]
    }
}

pub fn stirling2(k: u64, n: u64, b: u64) -> Result<BigUint> {
    Ok(StirlingTable::new(b, k, n)?.get(k, n).clone())
}

/// Log of the classical saddle-point asymptotic for S(K, N) at density
/// c = K/N > 1: K! e^{N a} / (N! c^N a^{K-N} sqrt(2 pi K [1 - c e^{-a}]))
/// with a the b = 1 solved parameter. The Gaussian factor uses the root
/// identity 1 - c e^{-a} = 1 - c + a = a gamma_1'(a) / c, so the bracket
/// sits under the square root; the absolute log error then decays like 1/K.
pub fn bender_log_asymptotic(k: u64, n: u64) -> Result<f64> {
    let c = k as f64 / n as f64;
    if c <= 1.0 {
        return Err(Error::precondition(format!("need K/N > 1, got {c}")));
    }
    let alpha = solve_alpha(1, c, ALPHA_TOL)?.alpha;
    Ok(ln_gamma(k as f64 + 1.0) + n as f64 * alpha
        - ln_gamma(n as f64 + 1.0)
        - n as f64 * c.ln()
        - (k as f64 - n as f64) * alpha.ln()
        - 0.5 * (2.0 * std::f64::consts::PI * k as f64 * (1.0 - c * (-alpha).exp())).ln())
}

/// (log S(K,N) - asymptotic) / N with the exact value from the recurrence.
pub fn bender_normalized_residual(k: u64, n: u64) -> Result<f64> {
    let exact = ln_biguint(&stirling2(k, n, 1)?);
    Ok((exact - bender_log_asymptotic(k, n)?) / n as f64)
}

/// Largest number of distinct occupancy values over all admissible vectors
/// with the support cap removed.
pub fn max_support(params: &ModelParams, budget: u64) -> Result<u64> {
    let mut best = 0u64;
    visit_admissible(&params.uncapped(), budget, |nu| {
        best = best.max(nu.support_len() as u64);
        Ok(())
    })?;
    Ok(best)
}

/// sqrt(2(K + 1/8)) - 1/2. Upper bound for [`max_support`] when b >= 1,
/// attained exactly when K is triangular (a sum 1 + 2 + ... + kappa of
/// distinct parts fits). For b = 0 the empty-site class counts toward the
/// support and the bound can fail, so nothing is claimed there.
pub fn max_support_bound(params: &ModelParams) -> f64 {
    (2.0 * (params.k as f64 + 0.125)).sqrt() - 0.5
}

/// The b-specific closed form for (1/N) log card(Omega) without the o(1)
/// correction; the gap to the exact value shrinks as N grows at fixed c.
pub fn card_omega_closed_form(params: &ModelParams) -> Result<f64> {
    let c = params.c_f64();
    let n = params.n as f64;
    Ok(match params.b {
        0 => c * n.ln(),
        1 => {
            let alpha = solve_alpha(1, c, ALPHA_TOL)?.alpha;
            c * n.ln() + (c - 1.0) * (c / alpha).ln() + alpha - c
        }
        b => {
            let alpha = solve_alpha(b, c, ALPHA_TOL)?.alpha;
            c * n.ln() + c * (c / alpha).ln() + log_z(b, alpha)? - c
        }
    })
}

mod big_serde {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&x.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
