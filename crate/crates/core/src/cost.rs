//! Token accounting, pricing and budget enforcement.
//!
//! Money is fixed-point with six fractional digits so ledger totals
//! reconcile exactly with the per-call audit log.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;
use std::sync::Mutex;
use thiserror::Error;

const MICROS: i128 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("no price for model `{model_id}` of provider `{provider_id}`")]
    UnknownModel { provider_id: String, model_id: String },
    #[error("cost sample is empty")]
    EmptySample,
    #[error("invalid amount `{0}`")]
    BadAmount(String),
    #[error("pricing file: {0}")]
    Parse(String),
}

/// Currency amount in millionths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_micros(micros: i64) -> Self {
        Money(micros)
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    /// Rounds to the nearest millionth.
    pub fn from_f64(x: f64) -> Result<Self, CostError> {
        if !x.is_finite() {
            return Err(CostError::BadAmount(x.to_string()));
        }
        format!("{x:.6}").parse()
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / MICROS as f64
    }

    /// `self * num / den`, rounded half away from zero.
    pub fn mul_ratio(self, num: u64, den: u64) -> Money {
        Money(div_round(self.0 as i128 * num as i128, den as i128) as i64)
    }
}

fn div_round(num: i128, den: i128) -> i128 {
    let half = den / 2;
    if num >= 0 {
        (num + half) / den
    } else {
        -((-num + half) / den)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = (self.0 as i128).abs();
        write!(f, "{sign}{}.{:06}", abs / MICROS, abs % MICROS)
    }
}

impl FromStr for Money {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CostError::BadAmount(s.to_string());
        let t = s.trim();
        let (neg, t) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t),
        };
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if int.is_empty() && frac.is_empty()
            || frac.len() > 6
            || !int.chars().all(|c| c.is_ascii_digit())
            || !frac.chars().all(|c| c.is_ascii_digit())
        {
            return Err(bad());
        }
        let int: i128 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: i128 = format!("{frac:0<6}").parse().map_err(|_| bad())?;
        let micros = int * MICROS + frac;
        let micros = if neg { -micros } else { micros };
        i64::try_from(micros).map(Money).map_err(|_| bad())
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(i64),
            Float(f64),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Int(i) => Ok(Money(i * MICROS as i64)),
            Raw::Float(x) => Money::from_f64(x).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Counted by approximation rather than reported by the provider.
    #[serde(default)]
    pub estimated: bool,
}

/// Pluggable token counter; [`CharApprox`] is the provider-agnostic default.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CharApprox;

impl TokenCounter for CharApprox {
    fn count(&self, text: &str) -> u64 {
        approx_tokens(text)
    }
}

/// `ceil(chars / 4)`.
pub fn approx_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_1m: Money,
    pub output_per_1m: Money,
}

/// `{provider_id: {model_id: {input_per_1m, output_per_1m}}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PricingTable(pub BTreeMap<String, BTreeMap<String, ModelPrice>>);

impl PricingTable {
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let table: PricingTable = serde_yaml::from_str(text).map_err(|e| CostError::Parse(e.to_string()))?;
        for models in table.0.values() {
            for price in models.values() {
                if price.input_per_1m < Money::ZERO || price.output_per_1m < Money::ZERO {
                    return Err(CostError::Parse("prices must be non-negative".into()));
                }
            }
        }
        Ok(table)
    }

    pub fn insert(&mut self, provider_id: &str, model_id: &str, price: ModelPrice) {
        self.0
            .entry(provider_id.to_string())
            .or_default()
            .insert(model_id.to_string(), price);
    }

    pub fn price(&self, provider_id: &str, model_id: &str) -> Result<ModelPrice, CostError> {
        self.0
            .get(provider_id)
            .and_then(|m| m.get(model_id))
            .copied()
            .ok_or_else(|| CostError::UnknownModel {
                provider_id: provider_id.to_string(),
                model_id: model_id.to_string(),
            })
    }

    /// `(in * in_price + out * out_price) / 1e6`, rounded once.
    pub fn call_cost(&self, usage: &TokenUsage, provider_id: &str, model_id: &str) -> Result<Money, CostError> {
        let p = self.price(provider_id, model_id)?;
        Ok(cost_at(usage, p))
    }
}

pub fn cost_at(usage: &TokenUsage, price: ModelPrice) -> Money {
    let num = usage.input_tokens as i128 * price.input_per_1m.0 as i128
        + usage.output_tokens as i128 * price.output_per_1m.0 as i128;
    Money(div_round(num, MICROS) as i64)
}

pub fn call_cost(
    usage: &TokenUsage,
    pricing: &PricingTable,
    provider_id: &str,
    model_id: &str,
) -> Result<Money, CostError> {
    pricing.call_cost(usage, provider_id, model_id)
}

/// Linear scale-up from a sample of calls to the whole population.
pub fn scale_to_population(sample_cost: Money, sample_chunks: u64, population_chunks: u64) -> Result<Money, CostError> {
    if sample_chunks == 0 {
        return Err(CostError::EmptySample);
    }
    Ok(sample_cost.mul_ratio(population_chunks, sample_chunks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChargeDecision {
    Proceed,
    Halt,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTotals {
    pub cost: Money,
    pub calls: u64,
    pub calls_served_from_cache: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Serializable ledger state; also what `ledger.json` holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub total_cost: Money,
    pub budget: Option<Money>,
    /// Provider calls that were billed.
    pub calls: u64,
    pub calls_served_from_cache: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Billed calls whose usage was approximated.
    pub estimated_calls: u64,
    pub by_role: BTreeMap<String, RoleTotals>,
}

#[derive(Debug, Default)]
struct LedgerState {
    snap: LedgerSnapshot,
    reserved: Money,
}

/// Per-run cost accumulator. All methods are atomic with respect to each
/// other, so concurrent workers can never jointly overdraw the budget.
#[derive(Debug, Default)]
pub struct CostLedger {
    state: Mutex<LedgerState>,
}

/// Budget held for one in-flight call; settle or release it.
#[derive(Debug)]
#[must_use]
pub struct Reservation {
    amount: Money,
}

impl Reservation {
    pub fn amount(&self) -> Money {
        self.amount
    }
}

impl CostLedger {
    pub fn new(budget: Option<Money>) -> Self {
        Self::from_snapshot(LedgerSnapshot {
            budget,
            ..Default::default()
        })
    }

    pub fn from_snapshot(snap: LedgerSnapshot) -> Self {
        Self {
            state: Mutex::new(LedgerState {
                snap,
                reserved: Money::ZERO,
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LedgerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_budget(&self, budget: Option<Money>) {
        self.lock().snap.budget = budget;
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.lock().snap.clone()
    }

    pub fn total_cost(&self) -> Money {
        self.lock().snap.total_cost
    }

    /// Adds a finished call's cost, then checks whether the next call, at
    /// `next_call_estimate`, still fits the budget.
    pub fn charge(&self, cost: Money, next_call_estimate: Money) -> ChargeDecision {
        let mut st = self.lock();
        st.snap.total_cost += cost;
        st.snap.calls += 1;
        match st.snap.budget {
            Some(b) if st.snap.total_cost + st.reserved + next_call_estimate > b => ChargeDecision::Halt,
            _ => ChargeDecision::Proceed,
        }
    }

    /// Pre-call check: holds `estimate` against the budget, or refuses.
    pub fn reserve(&self, estimate: Money) -> Option<Reservation> {
        let mut st = self.lock();
        if let Some(b) = st.snap.budget {
            if st.snap.total_cost + st.reserved + estimate > b {
                return None;
            }
        }
        st.reserved += estimate;
        Some(Reservation { amount: estimate })
    }

    /// Records a billed call and frees its reservation.
    pub fn settle(&self, reservation: Reservation, role: &str, usage: &TokenUsage, cost: Money) {
        let mut st = self.lock();
        st.reserved = st.reserved - reservation.amount;
        let s = &mut st.snap;
        s.total_cost += cost;
        s.calls += 1;
        s.input_tokens += usage.input_tokens;
        s.output_tokens += usage.output_tokens;
        if usage.estimated {
            s.estimated_calls += 1;
        }
        let r = s.by_role.entry(role.to_string()).or_default();
        r.cost += cost;
        r.calls += 1;
        r.input_tokens += usage.input_tokens;
        r.output_tokens += usage.output_tokens;
    }

    /// Frees a reservation without billing (the call never happened).
    pub fn release(&self, reservation: Reservation) {
        let mut st = self.lock();
        st.reserved = st.reserved - reservation.amount;
    }

    pub fn record_cache_hit(&self, role: &str) {
        let mut st = self.lock();
        st.snap.calls_served_from_cache += 1;
        st.snap
            .by_role
            .entry(role.to_string())
            .or_default()
            .calls_served_from_cache += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(s: &str) -> Money {
        s.parse().unwrap()
    }

    fn table(input: &str, output: &str) -> PricingTable {
        let mut t = PricingTable::default();
        t.insert("p", "m", ModelPrice { input_per_1m: m(input), output_per_1m: m(output) });
        t
    }

    #[test]
    fn approx_rule() {
        assert_eq!(approx_tokens(""), 0);
        assert_eq!(approx_tokens("12345678"), 2);
        assert_eq!(approx_tokens("123456789"), 3);
        assert_eq!(approx_tokens("éééé"), 1);
    }

    #[test]
    fn call_cost_examples() {
        let t = table("1.00", "0");
        let u = TokenUsage { input_tokens: 1_000_000, output_tokens: 0, estimated: false };
        assert_eq!(call_cost(&u, &t, "p", "m").unwrap(), m("1.00"));
        assert_eq!(call_cost(&TokenUsage::default(), &t, "p", "m").unwrap(), Money::ZERO);
        let t = table("2.00", "8.00");
        let u = TokenUsage { input_tokens: 500_000, output_tokens: 250_000, estimated: true };
        assert_eq!(call_cost(&u, &t, "p", "m").unwrap(), m("3.00"));
        assert!(matches!(call_cost(&u, &t, "p", "other"), Err(CostError::UnknownModel { .. })));
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scale_to_population(m("1.50"), 10, 100).unwrap(), m("15.00"));
        assert_eq!(scale_to_population(m("1.50"), 10, 10).unwrap(), m("1.50"));
        assert_eq!(scale_to_population(m("0.33"), 3, 9).unwrap(), m("0.99"));
        assert_eq!(scale_to_population(m("1"), 0, 9), Err(CostError::EmptySample));
    }

    #[test]
    fn charge_examples() {
        let l = CostLedger::new(Some(m("1.00")));
        assert_eq!(l.charge(m("0.90"), m("0.05")), ChargeDecision::Proceed);
        let l = CostLedger::new(Some(m("1.00")));
        assert_eq!(l.charge(m("0.90"), m("0.20")), ChargeDecision::Halt);
        let l = CostLedger::new(None);
        assert_eq!(l.charge(m("1000"), m("1000")), ChargeDecision::Proceed);
    }

    #[test]
    fn reservations_block_joint_overdraw() {
        let l = CostLedger::new(Some(m("1.00")));
        let a = l.reserve(m("0.60")).unwrap();
        assert!(l.reserve(m("0.60")).is_none());
        l.settle(a, "extractor", &TokenUsage::default(), m("0.10"));
        let b = l.reserve(m("0.60")).unwrap();
        l.release(b);
        assert_eq!(l.total_cost(), m("0.10"));
    }

    #[test]
    fn concurrent_reservations_respect_budget() {
        let l = std::sync::Arc::new(CostLedger::new(Some(m("1.00"))));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let l = l.clone();
                std::thread::spawn(move || {
                    for _ in 0..100 {
                        if let Some(r) = l.reserve(m("0.003")) {
                            l.settle(r, "x", &TokenUsage::default(), m("0.003"));
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(l.total_cost(), m("0.999"));
    }

    #[test]
    fn money_text_forms() {
        assert_eq!(m("3").to_string(), "3.000000");
        assert_eq!(m(".5").to_string(), "0.500000");
        assert_eq!(m("-0.25").to_string(), "-0.250000");
        assert!("1.0000001".parse::<Money>().is_err());
        assert!("abc".parse::<Money>().is_err());
        assert_eq!(Money::from_f64(0.1).unwrap(), m("0.1"));
        let p = PricingTable::parse("p: {m: {input_per_1m: 0.15, output_per_1m: \"0.60\"}}").unwrap();
        assert_eq!(p.price("p", "m").unwrap().output_per_1m, m("0.6"));
    }

    proptest! {
        #[test]
        fn money_display_parse_round_trip(micros in -10_000_000_000i64..10_000_000_000) {
            let x = Money::from_micros(micros);
            prop_assert_eq!(x.to_string().parse::<Money>().unwrap(), x);
        }
    }
}
