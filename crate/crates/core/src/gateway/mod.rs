//! Metered model-call gateway.
//!
//! Every model call, whether issued by a pipeline stage or by experiment code
//! through the [`proxy`], goes through [`Gateway::complete`]: it is priced,
//! checked against the ledger's [`BudgetPolicy`], forwarded to the configured
//! [`Provider`], and recorded in that ledger before the completion is returned.

mod budget;
pub mod http;
mod ledger;
mod pricing;
mod provider;
pub mod proxy;
pub mod scripted;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::Utc;
use tracing::warn;

pub use budget::{check_budget, BudgetCheck, BudgetDenial, BudgetLimit, BudgetPolicy, CostScope};
pub use ledger::{usage_summary, Caller, CostLedger, RunUsage, UsageRecord, UsageSummary};
pub use pricing::{PricingTable, ProviderConfig};
pub use provider::{
    approx_tokens, CallContext, CompletionRequest, DecodingParams, Message, Provider,
    ProviderError, ProviderReply, Role, Stage, TokenEstimate,
};

use crate::money::Micros;
use crate::store::{RecordLog, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("budget exceeded: {0}")]
    Budget(BudgetDenial),
    #[error("provider transport failure after {attempts} attempt(s): {message}")]
    Transport {
        message: String,
        retryable: bool,
        attempts: u32,
    },
    #[error("no ledger open for `{0}`")]
    UnknownLedger(String),
    #[error("model `{0}` has no pricing entry")]
    UnknownModel(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl GatewayError {
    pub fn budget_limit(&self) -> Option<BudgetLimit> {
        match self {
            GatewayError::Budget(d) => Some(d.limit),
            _ => None,
        }
    }
}

/// A finished, recorded call.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: UsageRecord,
}

impl Completion {
    pub fn truncated(&self) -> bool {
        self.usage.truncated
    }
}

struct LedgerState {
    ledger: CostLedger,
    policy: BudgetPolicy,
    scope: CostScope,
    log: Option<RecordLog<UsageRecord>>,
    current_iteration: u32,
}

type LedgerSlot = Arc<Mutex<LedgerState>>;

pub struct Gateway {
    provider: Arc<dyn Provider>,
    config: ProviderConfig,
    ledgers: Mutex<HashMap<String, LedgerSlot>>,
    output_bound: u64,
    max_attempts: u32,
    retry_backoff: Duration,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, config: ProviderConfig) -> Self {
        Gateway {
            provider,
            config,
            ledgers: Mutex::new(HashMap::new()),
            output_bound: 8192,
            max_attempts: 3,
            retry_backoff: Duration::from_millis(250),
        }
    }

    /// Worst-case output tokens assumed for budget projection when neither the
    /// request nor the provider says otherwise.
    pub fn with_output_bound(mut self, tokens: u64) -> Self {
        self.output_bound = tokens;
        self
    }

    pub fn with_retries(mut self, max_attempts: u32, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.retry_backoff = backoff;
        self
    }

    pub fn provider_config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Open (or reopen) a ledger. With a log path, prior records in the log are
    /// replayed so totals survive restarts; a damaged tail is cut off.
    pub fn open_ledger(
        &self,
        id: &str,
        policy: BudgetPolicy,
        scope: CostScope,
        log_path: Option<PathBuf>,
    ) -> Result<(), GatewayError> {
        policy.validate().map_err(GatewayError::Config)?;
        let mut ledgers = self.ledgers.lock().unwrap();
        if let Some(slot) = ledgers.get(id) {
            let mut st = slot.lock().unwrap();
            st.policy = policy;
            st.scope = scope;
            return Ok(());
        }
        let (ledger, log) = match log_path {
            Some(path) => {
                let log = RecordLog::<UsageRecord>::new(path);
                let prefix = log.read_prefix()?;
                if let Some(damage) = &prefix.damage {
                    warn!(ledger = id, %damage, "ledger log damaged; truncating to valid prefix");
                    log.truncate_to_valid()?;
                }
                (CostLedger::from_records(id, prefix.records), Some(log))
            }
            None => (CostLedger::new(id), None),
        };
        let current_iteration = ledger.last_iteration().unwrap_or(0);
        ledgers.insert(
            id.to_string(),
            Arc::new(Mutex::new(LedgerState {
                ledger,
                policy,
                scope,
                log,
                current_iteration,
            })),
        );
        Ok(())
    }

    pub fn has_ledger(&self, id: &str) -> bool {
        self.ledgers.lock().unwrap().contains_key(id)
    }

    fn slot(&self, id: &str) -> Result<LedgerSlot, GatewayError> {
        self.ledgers
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownLedger(id.to_string()))
    }

    pub fn ledger(&self, id: &str) -> Result<CostLedger, GatewayError> {
        Ok(self.slot(id)?.lock().unwrap().ledger.clone())
    }

    pub fn ledger_total(&self, id: &str) -> Result<Micros, GatewayError> {
        Ok(self.slot(id)?.lock().unwrap().ledger.total())
    }

    pub fn policy(&self, id: &str) -> Result<BudgetPolicy, GatewayError> {
        Ok(self.slot(id)?.lock().unwrap().policy.clone())
    }

    /// Debug iteration that proxied experiment-code calls are attributed to.
    pub fn set_iteration(&self, id: &str, iteration: u32) -> Result<(), GatewayError> {
        self.slot(id)?.lock().unwrap().current_iteration = iteration;
        Ok(())
    }

    pub fn current_iteration(&self, id: &str) -> Result<u32, GatewayError> {
        Ok(self.slot(id)?.lock().unwrap().current_iteration)
    }

    /// Check a prospective spend without making a call.
    pub fn check(&self, id: &str, iteration: u32, projected: Micros) -> Result<BudgetCheck, GatewayError> {
        let slot = self.slot(id)?;
        let st = slot.lock().unwrap();
        Ok(check_budget(&st.ledger, &st.policy, st.scope, iteration, projected))
    }

    fn projection(&self, req: &CompletionRequest, pricing: PricingTable) -> Micros {
        let est = self.provider.estimate(req).unwrap_or(TokenEstimate {
            input_tokens: approx_tokens(req.prompt_chars()),
            output_tokens: req.params.max_output_tokens.unwrap_or(self.output_bound),
        });
        pricing.cost(est.input_tokens, est.output_tokens)
    }

    /// Meter, forward, and record one call.
    pub fn complete(&self, req: CompletionRequest) -> Result<Completion, GatewayError> {
        let slot = self.slot(&req.ctx.ledger)?;
        let pricing = self.config.pricing(&req.model)?;
        let projected = self.projection(&req, pricing);
        let iteration = req.ctx.iteration;

        let metered = {
            let mut st = slot.lock().unwrap();
            let metered = st.scope.covers(req.ctx.caller);
            if metered {
                if let BudgetCheck::Deny(denial) =
                    check_budget(&st.ledger, &st.policy, st.scope, iteration, projected)
                {
                    return Err(GatewayError::Budget(denial));
                }
                st.ledger.reserve(iteration, projected);
            }
            metered
        };

        let reply = self.call_with_retries(&req);

        let mut st = slot.lock().unwrap();
        if metered {
            st.ledger.release(iteration, projected);
        }
        let reply = reply?;
        let truncated = reply.truncated
            || req
                .params
                .max_output_tokens
                .is_some_and(|cap| reply.output_tokens >= cap);
        let record = UsageRecord {
            call_id: format!("{}-{:06}", req.ctx.ledger, st.ledger.records().len() + 1),
            run_id: req.ctx.ledger.clone(),
            iteration_index: iteration,
            model: req.model.clone(),
            input_tokens: reply.input_tokens,
            output_tokens: reply.output_tokens,
            cost: pricing.cost(reply.input_tokens, reply.output_tokens),
            timestamp: Utc::now(),
            caller: req.ctx.caller,
            stage: req.ctx.stage,
            truncated,
        };
        if let Some(log) = &st.log {
            log.append(&record)?;
        }
        st.ledger.push(record.clone());
        Ok(Completion {
            text: reply.text,
            usage: record,
        })
    }

    fn call_with_retries(&self, req: &CompletionRequest) -> Result<ProviderReply, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.provider.complete(req) {
                Ok(reply) => return Ok(reply),
                Err(e) if e.retryable && attempt < self.max_attempts => {
                    warn!(attempt, error = %e.message, "provider call failed; retrying");
                    std::thread::sleep(self.retry_backoff * attempt);
                }
                Err(e) => {
                    return Err(GatewayError::Transport {
                        message: e.message,
                        retryable: e.retryable,
                        attempts: attempt,
                    })
                }
            }
        }
    }
}

/// A gateway bound to one ledger and model, as handed to a pipeline stage.
#[derive(Clone)]
pub struct ModelSession {
    pub gateway: Arc<Gateway>,
    pub ledger: String,
    pub model: String,
    pub attempt: Option<u32>,
    pub params: DecodingParams,
}

impl ModelSession {
    pub fn new(gateway: Arc<Gateway>, ledger: impl Into<String>, model: impl Into<String>) -> Self {
        ModelSession {
            gateway,
            ledger: ledger.into(),
            model: model.into(),
            attempt: None,
            params: DecodingParams::default(),
        }
    }

    pub fn with_attempt(mut self, attempt: u32) -> Self {
        self.attempt = Some(attempt);
        self
    }

    pub fn with_params(mut self, params: DecodingParams) -> Self {
        self.params = params;
        self
    }

    /// Send a single user prompt.
    pub fn ask(&self, stage: Stage, iteration: u32, prompt: &str) -> Result<Completion, GatewayError> {
        self.gateway.complete(CompletionRequest {
            ctx: CallContext::pipeline(&self.ledger, iteration, stage).with_attempt(self.attempt),
            model: self.model.clone(),
            messages: vec![Message::user(prompt)],
            params: self.params.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::scripted::{Scenario, ScriptedProvider};
    use super::*;

    fn gateway(yaml: &str, pricing: PricingTable) -> Gateway {
        let scenario = Scenario::from_yaml(yaml).unwrap();
        Gateway::new(
            Arc::new(ScriptedProvider::new(scenario)),
            ProviderConfig::scripted("m", pricing),
        )
        .with_retries(3, Duration::ZERO)
    }

    fn req(ledger: &str, iteration: u32) -> CompletionRequest {
        CompletionRequest {
            ctx: CallContext::pipeline(ledger, iteration, Stage::Codegen),
            model: "m".into(),
            messages: vec![Message::user("hi")],
            params: DecodingParams::default(),
        }
    }

    #[test]
    fn prices_and_records_a_call() {
        let gw = gateway(
            "rules:\n  - text: ok\n    input_tokens: 1000\n    output_tokens: 500\n",
            PricingTable::new(150_000, 600_000),
        );
        gw.open_ledger("r1", BudgetPolicy::default(), CostScope::All, None)
            .unwrap();
        let c = gw.complete(req("r1", 1)).unwrap();
        assert_eq!(c.text, "ok");
        assert_eq!(c.usage.cost, Micros(450));
        assert_eq!(gw.ledger_total("r1").unwrap(), Micros(450));
    }

    #[test]
    fn zero_token_call_is_free_and_allowed() {
        let gw = gateway(
            "rules:\n  - text: ''\n    input_tokens: 0\n    output_tokens: 0\n",
            PricingTable::new(150_000, 600_000),
        );
        gw.open_ledger("r", BudgetPolicy::default(), CostScope::All, None)
            .unwrap();
        let c = gw.complete(req("r", 1)).unwrap();
        assert_eq!(c.usage.cost, Micros::ZERO);
    }

    #[test]
    fn per_iteration_cap_denies_tenth_eleven_cent_call() {
        // 110_000 input tokens at $1 per million tokens = $0.11
        let gw = gateway(
            "rules:\n  - text: x\n    input_tokens: 110000\n    output_tokens: 0\n",
            PricingTable::new(1_000_000, 0),
        );
        gw.open_ledger("r", BudgetPolicy::default(), CostScope::All, None)
            .unwrap();
        for _ in 0..9 {
            gw.complete(req("r", 1)).unwrap();
        }
        assert_eq!(gw.ledger_total("r").unwrap(), Micros(990_000));
        let err = gw.complete(req("r", 1)).unwrap_err();
        assert_eq!(err.budget_limit(), Some(BudgetLimit::PerIteration));
        assert_eq!(gw.ledger("r").unwrap().records().len(), 9);
    }

    #[test]
    fn unknown_ledger_and_model() {
        let gw = gateway("rules:\n  - text: x\n", PricingTable::new(0, 0));
        assert!(matches!(
            gw.complete(req("nope", 1)),
            Err(GatewayError::UnknownLedger(_))
        ));
        gw.open_ledger("r", BudgetPolicy::default(), CostScope::All, None)
            .unwrap();
        let mut r = req("r", 1);
        r.model = "other".into();
        assert!(matches!(gw.complete(r), Err(GatewayError::UnknownModel(_))));
    }

    #[test]
    fn transport_failures_are_retried_then_reported() {
        let gw = gateway(
            "rules:\n  - fail: connection reset\n    retryable: true\n",
            PricingTable::new(0, 0),
        );
        gw.open_ledger("r", BudgetPolicy::default(), CostScope::All, None)
            .unwrap();
        match gw.complete(req("r", 1)) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
        assert!(gw.ledger("r").unwrap().records().is_empty());
        assert_eq!(gw.ledger("r").unwrap().reserved_total(), Micros::ZERO);
    }

    #[test]
    fn truncation_flag_from_output_ceiling() {
        let gw = gateway(
            "rules:\n  - text: partial\n    output_tokens: 64\n",
            PricingTable::new(0, 0),
        );
        gw.open_ledger("r", BudgetPolicy::default(), CostScope::All, None)
            .unwrap();
        let mut r = req("r", 1);
        r.params.max_output_tokens = Some(64);
        assert!(gw.complete(r).unwrap().truncated());
    }

    #[test]
    fn ledger_log_replays_on_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs/r/ledger.log");
        let yaml = "rules:\n  - text: x\n    input_tokens: 10\n    output_tokens: 0\n";
        {
            let gw = gateway(yaml, PricingTable::new(1_000_000, 0));
            gw.open_ledger("r", BudgetPolicy::default(), CostScope::All, Some(path.clone()))
                .unwrap();
            gw.complete(req("r", 1)).unwrap();
            gw.complete(req("r", 2)).unwrap();
        }
        let gw = gateway(yaml, PricingTable::new(1_000_000, 0));
        gw.open_ledger("r", BudgetPolicy::default(), CostScope::All, Some(path))
            .unwrap();
        assert_eq!(gw.ledger_total("r").unwrap(), Micros(20));
        assert_eq!(gw.current_iteration("r").unwrap(), 2);
    }
}
