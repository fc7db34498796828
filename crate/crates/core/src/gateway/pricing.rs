use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::money::Micros;

/// Per-model prices in micro-dollars per one million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingTable {
    pub input_price: u64,
    pub output_price: u64,
}

impl PricingTable {
    pub const fn new(input_price: u64, output_price: u64) -> Self {
        PricingTable {
            input_price,
            output_price,
        }
    }

    /// `round(in * input_price / 1e6 + out * output_price / 1e6)`, rounding
    /// half up on the exact sum.
    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> Micros {
        let numer = input_tokens as u128 * self.input_price as u128
            + output_tokens as u128 * self.output_price as u128;
        let rounded = (numer + 500_000) / 1_000_000;
        Micros(u64::try_from(rounded).unwrap_or(u64::MAX))
    }
}

/// Provider endpoint, credential reference, and model catalog.
///
/// Loaded from a TOML file:
///
/// ```toml
/// provider_name = "openai"
/// endpoint = "https://api.openai.com/v1/chat/completions"
/// credential_env = "OPENAI_API_KEY"
///
/// [models."gpt-4o-mini"]
/// input_price = 150000
/// output_price = 600000
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_name: String,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub credential_env: Option<String>,
    pub models: BTreeMap<String, PricingTable>,
}

impl ProviderConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, GatewayError> {
        toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// A catalog with a single free model, used for scripted operation.
    pub fn scripted(model: &str, pricing: PricingTable) -> Self {
        ProviderConfig {
            provider_name: "scripted".into(),
            endpoint: String::new(),
            credential_env: None,
            models: BTreeMap::from([(model.to_string(), pricing)]),
        }
    }

    pub fn pricing(&self, model: &str) -> Result<PricingTable, GatewayError> {
        self.models
            .get(model)
            .copied()
            .ok_or_else(|| GatewayError::UnknownModel(model.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent restatement of the integer formula, kept apart from `cost`.
    fn oracle_cost(tin: u64, tout: u64, pin: u64, pout: u64) -> u64 {
        let total = tin as u128 * pin as u128 + tout as u128 * pout as u128;
        let q = total / 1_000_000;
        let r = total % 1_000_000;
        (if r >= 500_000 { q + 1 } else { q }) as u64
    }

    #[test]
    fn thousand_in_five_hundred_out() {
        // $0.15 / $0.60 per million tokens.
        let p = PricingTable::new(150_000, 600_000);
        assert_eq!(oracle_cost(1000, 500, 150_000, 600_000), 450);
        assert_eq!(p.cost(1000, 500), Micros(450));
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        assert_eq!(PricingTable::new(3_000_000, 15_000_000).cost(0, 0), Micros(0));
    }

    #[test]
    fn rounding_is_on_the_sum() {
        // 1 token at 0.4 µ$ + 1 token at 0.4 µ$ = 0.8 µ$ -> 1
        let p = PricingTable::new(400_000, 400_000);
        assert_eq!(p.cost(1, 1), Micros(1));
        assert_eq!(p.cost(1, 0), Micros(0));
    }

    #[test]
    fn config_parses_and_reports_unknown_models() {
        let cfg = ProviderConfig::from_toml_str(
            r#"
provider_name = "openai"
endpoint = "http://localhost:9/v1/chat/completions"
credential_env = "OPENAI_API_KEY"
[models."gpt-4o-mini"]
input_price = 150000
output_price = 600000
"#,
        )
        .unwrap();
        assert_eq!(cfg.pricing("gpt-4o-mini").unwrap().output_price, 600_000);
        assert!(matches!(
            cfg.pricing("nope"),
            Err(GatewayError::UnknownModel(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn cost_matches_oracle(tin in 0u64..10_000_000, tout in 0u64..10_000_000,
                               pin in 0u64..100_000_000, pout in 0u64..100_000_000) {
            proptest::prop_assert_eq!(
                PricingTable::new(pin, pout).cost(tin, tout).get(),
                oracle_cost(tin, tout, pin, pout)
            );
        }
    }
}
