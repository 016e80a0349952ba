//! Token pricing and session cost accounting.
//!
//! Rates are held as integer micro-dollars per million tokens, so
//! `tokens * rate` is an exact cost in picodollars (1e-12 USD). Sums of costs
//! are therefore exact, and rounding happens only for display.

use std::collections::BTreeSet;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::TokenUsage;

pub const DEFAULT_PRICING: &str = include_str!("../../data/pricing.json");

const PICOS_PER_CENT: u128 = 10_000_000_000;
const PICOS_PER_DOLLAR: u128 = 100 * PICOS_PER_CENT;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PricingError {
    #[error("pricing document does not parse: {0}")]
    Parse(String),
    #[error("model `{0}` appears more than once")]
    DuplicateModel(String),
    #[error("no pricing entry for model `{0}`")]
    UnknownModel(String),
}

/// USD per million tokens, stored as whole micro-dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Rate(pub u64);

impl Rate {
    pub fn from_dollars(d: f64) -> Result<Self, String> {
        if !d.is_finite() || d < 0.0 {
            return Err(format!("rate {d} must be a nonnegative number"));
        }
        let micros = d * 1e6;
        let rounded = micros.round();
        if (micros - rounded).abs() > 1e-3 {
            return Err(format!("rate {d} has more than six decimal places"));
        }
        Ok(Rate(rounded as u64))
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.dollars())
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Rate::from_dollars(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// An exact nonnegative dollar amount in picodollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Usd {
    picos: u128,
}

impl Usd {
    pub const ZERO: Usd = Usd { picos: 0 };

    pub fn from_picos(picos: u128) -> Self {
        Self { picos }
    }

    pub fn from_cents(cents: u64) -> Self {
        Self {
            picos: cents as u128 * PICOS_PER_CENT,
        }
    }

    pub fn picos(self) -> u128 {
        self.picos
    }

    /// Whole micro-dollars, rounded half-up.
    pub fn micros(self) -> u128 {
        (self.picos + 500_000) / 1_000_000
    }

    /// Whole cents, rounded half-up.
    pub fn cents(self) -> u128 {
        (self.picos + PICOS_PER_CENT / 2) / PICOS_PER_CENT
    }

    pub fn as_f64(self) -> f64 {
        self.picos as f64 / PICOS_PER_DOLLAR as f64
    }

    /// Exact decimal representation with twelve fractional digits.
    pub fn exact(self) -> String {
        format!(
            "{}.{:012}",
            self.picos / PICOS_PER_DOLLAR,
            self.picos % PICOS_PER_DOLLAR
        )
    }

    fn parse_exact(s: &str) -> Result<Self, String> {
        let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
        if whole.is_empty()
            || frac.len() > 12
            || !whole.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(format!("`{s}` is not a nonnegative decimal with at most 12 places"));
        }
        let whole: u128 = whole.parse().map_err(|e| format!("{e}"))?;
        let frac_picos: u128 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<12}").parse().map_err(|e| format!("{e}"))?
        };
        Ok(Usd::from_picos(whole * PICOS_PER_DOLLAR + frac_picos))
    }
}

/// Dollars and cents, rounded half-up.
impl fmt::Display for Usd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.cents();
        write!(f, "{}.{:02}", c / 100, c % 100)
    }
}

impl Add for Usd {
    type Output = Usd;

    fn add(self, o: Usd) -> Usd {
        Usd::from_picos(self.picos + o.picos)
    }
}

impl AddAssign for Usd {
    fn add_assign(&mut self, o: Usd) {
        self.picos += o.picos;
    }
}

impl Sum for Usd {
    fn sum<I: Iterator<Item = Usd>>(iter: I) -> Self {
        iter.fold(Usd::ZERO, Add::add)
    }
}

impl Serialize for Usd {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.exact())
    }
}

impl<'de> Deserialize<'de> for Usd {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Usd::parse_exact(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheTtl {
    #[default]
    FiveMinutes,
    OneHour,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingEntry {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    pub input_per_m: Rate,
    /// Absent means cache writes bill at the input rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_write_per_m: Option<Rate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_write_1h_per_m: Option<Rate>,
    pub cache_read_per_m: Rate,
    pub output_per_m: Rate,
    /// For a higher price tier: the base model this tier belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier_of: Option<String>,
    /// Smallest session prompt size (tokens) billed at this tier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_prompt_tokens: Option<u64>,
}

impl PricingEntry {
    pub fn cache_write_rate(&self, ttl: CacheTtl) -> Rate {
        let five_min = self.cache_write_per_m.unwrap_or(self.input_per_m);
        match ttl {
            CacheTtl::FiveMinutes => five_min,
            CacheTtl::OneHour => self.cache_write_1h_per_m.unwrap_or(five_min),
        }
    }

    fn family(&self) -> &str {
        self.tier_of.as_deref().unwrap_or(&self.model)
    }
}

/// Cost of one session's usage at the five-minute cache-write rate.
pub fn account_cost(usage: &TokenUsage, price: &PricingEntry) -> Usd {
    account_cost_with(usage, price, CacheTtl::FiveMinutes)
}

pub fn account_cost_with(usage: &TokenUsage, price: &PricingEntry, ttl: CacheTtl) -> Usd {
    let term = |tokens: u64, rate: Rate| tokens as u128 * rate.0 as u128;
    Usd::from_picos(
        term(usage.input, price.input_per_m)
            + term(usage.cache_write, price.cache_write_rate(ttl))
            + term(usage.cache_read, price.cache_read_per_m)
            + term(usage.output, price.output_per_m),
    )
}

/// Parses a JSON array of pricing entries. Blank text yields no entries.
pub fn load_pricing(document: &str) -> Result<Vec<PricingEntry>, PricingError> {
    if document.trim().is_empty() {
        return Ok(Vec::new());
    }
    let entries: Vec<PricingEntry> =
        serde_json::from_str(document).map_err(|e| PricingError::Parse(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.model.as_str()) {
            return Err(PricingError::DuplicateModel(e.model.clone()));
        }
    }
    Ok(entries)
}

pub fn default_pricing() -> Vec<PricingEntry> {
    load_pricing(DEFAULT_PRICING).expect("bundled pricing document is valid")
}

/// The price tier applying to a session of `prompt_tokens` for `model`:
/// the entry of that model's family with the largest `min_prompt_tokens`
/// not above the session's prompt size.
pub fn select_tier<'a>(
    entries: &'a [PricingEntry],
    model: &str,
    prompt_tokens: u64,
) -> Result<&'a PricingEntry, PricingError> {
    entries
        .iter()
        .filter(|e| e.family() == model)
        .filter(|e| e.min_prompt_tokens.unwrap_or(0) <= prompt_tokens)
        .max_by_key(|e| e.min_prompt_tokens.unwrap_or(0))
        .ok_or_else(|| PricingError::UnknownModel(model.to_string()))
}

/// Prices sessions for one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub model: String,
    pub entries: Vec<PricingEntry>,
    #[serde(default)]
    pub ttl: CacheTtl,
}

impl CostModel {
    pub fn new(model: impl Into<String>, entries: Vec<PricingEntry>) -> Result<Self, PricingError> {
        let model = model.into();
        select_tier(&entries, &model, 0)?;
        Ok(Self {
            model,
            entries,
            ttl: CacheTtl::default(),
        })
    }

    pub fn session_cost(&self, usage: &TokenUsage) -> Usd {
        let entry = select_tier(&self.entries, &self.model, usage.prompt_tokens())
            .expect("base tier checked at construction");
        account_cost_with(usage, entry, self.ttl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(model: &str) -> PricingEntry {
        default_pricing().into_iter().find(|e| e.model == model).unwrap()
    }

    #[test]
    fn default_document_transcribes_the_table() {
        let all = default_pricing();
        assert_eq!(all.len(), 6);
        let sonnet = entry("Claude Sonnet 4.6");
        assert_eq!(sonnet.output_per_m, Rate(15_000_000));
        assert_eq!(entry("GPT-5.2-Codex").cache_read_per_m, Rate(175_000));
        assert_eq!(entry("Kimi K2.5").cache_read_per_m, Rate(225_000));
    }

    #[test]
    fn examples() {
        let opus = entry("Claude Opus 4.6");
        assert_eq!(account_cost(&TokenUsage::new(1_000_000, 0, 0, 0), &opus), Usd::from_cents(500));
        assert_eq!(account_cost(&TokenUsage::default(), &opus).to_string(), "0.00");
        let c = account_cost(&TokenUsage::new(100_000, 0, 0, 10_000), &opus);
        assert_eq!(c, Usd::from_cents(75));
        assert_eq!(c.to_string(), "0.75");
    }

    #[test]
    fn cache_write_rates() {
        let opus = entry("Claude Opus 4.6");
        let u = TokenUsage::new(0, 1_000_000, 0, 0);
        assert_eq!(account_cost(&u, &opus), Usd::from_cents(625));
        assert_eq!(account_cost_with(&u, &opus, CacheTtl::OneHour), Usd::from_cents(1000));
        // No cache-write price: billed at the input rate, for either TTL.
        let kimi = entry("Kimi K2.5");
        assert_eq!(account_cost(&u, &kimi), Usd::from_cents(45));
        assert_eq!(account_cost_with(&u, &kimi, CacheTtl::OneHour), Usd::from_cents(45));
    }

    #[test]
    fn gemini_tiers() {
        let all = default_pricing();
        let g = "Gemini 3.1 Pro Preview";
        assert_eq!(select_tier(&all, g, 200_000).unwrap().output_per_m, Rate(12_000_000));
        assert_eq!(select_tier(&all, g, 200_001).unwrap().output_per_m, Rate(18_000_000));
        let cm = CostModel::new(g, all.clone()).unwrap();
        assert_eq!(cm.session_cost(&TokenUsage::new(300_000, 0, 0, 0)), Usd::from_cents(120));
        assert_eq!(
            CostModel::new("nope", all).unwrap_err(),
            PricingError::UnknownModel("nope".into())
        );
    }

    #[test]
    fn loading() {
        assert_eq!(load_pricing("").unwrap(), vec![]);
        assert_eq!(load_pricing("[]").unwrap(), vec![]);
        let one = r#"{"model":"m","input_per_m":1,"cache_read_per_m":0.1,"output_per_m":2}"#;
        assert_eq!(
            load_pricing(&format!("[{one},{one}]")).unwrap_err(),
            PricingError::DuplicateModel("m".into())
        );
        assert!(matches!(load_pricing("{"), Err(PricingError::Parse(_))));
        let neg = r#"[{"model":"m","input_per_m":-1,"cache_read_per_m":0,"output_per_m":0}]"#;
        assert!(matches!(load_pricing(neg), Err(PricingError::Parse(_))));
        let round = serde_json::to_string(&default_pricing()).unwrap();
        assert_eq!(load_pricing(&round).unwrap(), default_pricing());
    }

    #[test]
    fn display_rounds_half_up() {
        assert_eq!(Usd::from_picos(4_999_999_999).to_string(), "0.00");
        assert_eq!(Usd::from_picos(5_000_000_000).to_string(), "0.01");
        assert_eq!(Usd::from_picos(1_234_999_999_999).to_string(), "1.23");
        assert_eq!(Usd::from_picos(1_235_000_000_000).to_string(), "1.24");
        assert_eq!(Usd::from_picos(1_500_000).micros(), 2);
    }

    #[test]
    fn usd_serializes_exactly() {
        let u = Usd::from_picos(1_750_000_000_001);
        let s = serde_json::to_string(&u).unwrap();
        assert_eq!(s, "\"1.750000000001\"");
        assert_eq!(serde_json::from_str::<Usd>(&s).unwrap(), u);
        assert_eq!(serde_json::from_str::<Usd>("\"2.5\"").unwrap(), Usd::from_cents(250));
        assert!(serde_json::from_str::<Usd>("\"-1\"").is_err());
    }

    fn usage() -> impl Strategy<Value = TokenUsage> {
        (0..50_000_000u64, 0..5_000_000u64, 0..50_000_000u64, 0..5_000_000u64)
            .prop_map(|(a, b, c, d)| TokenUsage::new(a, b, c, d))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn cost_is_additive(u1 in usage(), u2 in usage(), idx in 0usize..6) {
            let price = &default_pricing()[idx];
            prop_assert_eq!(
                account_cost(&(u1 + u2), price),
                account_cost(&u1, price) + account_cost(&u2, price)
            );
        }
    }
}
