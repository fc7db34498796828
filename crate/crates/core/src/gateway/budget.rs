use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ledger::{Caller, CostLedger};
use crate::money::Micros;

/// Per-experiment limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPolicy {
    pub total_cost_limit: Micros,
    pub llm_cost_limit_per_iteration: Micros,
    pub max_debug_iterations: u32,
    #[serde(with = "crate::serde_secs")]
    pub execution_time_limit_per_iteration: Duration,
    #[serde(with = "crate::serde_secs")]
    pub hard_time_limit: Duration,
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        BudgetPolicy {
            total_cost_limit: Micros::from_dollars(10),
            llm_cost_limit_per_iteration: Micros::from_dollars(1),
            max_debug_iterations: 25,
            execution_time_limit_per_iteration: Duration::from_secs(90 * 60),
            hard_time_limit: Duration::from_secs(6 * 60 * 60),
        }
    }
}

impl BudgetPolicy {
    pub fn validate(&self) -> Result<(), String> {
        let mut bad = Vec::new();
        if self.total_cost_limit == Micros::ZERO {
            bad.push("total_cost_limit");
        }
        if self.llm_cost_limit_per_iteration == Micros::ZERO {
            bad.push("llm_cost_limit_per_iteration");
        }
        if self.max_debug_iterations == 0 {
            bad.push("max_debug_iterations");
        }
        if self.execution_time_limit_per_iteration.is_zero() {
            bad.push("execution_time_limit_per_iteration");
        }
        if self.hard_time_limit.is_zero() {
            bad.push("hard_time_limit");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(format!("limits must be > 0: {}", bad.join(", ")))
        }
    }
}

/// Which callers' spend counts against the limits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostScope {
    #[default]
    All,
    PipelineOnly,
    ExperimentCodeOnly,
}

impl CostScope {
    pub fn covers(self, caller: Caller) -> bool {
        match self {
            CostScope::All => true,
            CostScope::PipelineOnly => caller == Caller::Pipeline,
            CostScope::ExperimentCodeOnly => caller == Caller::ExperimentCode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetLimit {
    Total,
    PerIteration,
}

impl fmt::Display for BudgetLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BudgetLimit::Total => "total cost limit",
            BudgetLimit::PerIteration => "per-iteration LLM cost limit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetDenial {
    pub limit: BudgetLimit,
    pub spent: Micros,
    pub projected: Micros,
    pub cap: Micros,
}

impl fmt::Display for BudgetDenial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} exceeded: spent {} + projected {} > {}",
            self.limit, self.spent.0, self.projected.0, self.cap.0
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BudgetCheck {
    Allow,
    Deny(BudgetDenial),
}

impl BudgetCheck {
    pub fn is_allow(&self) -> bool {
        matches!(self, BudgetCheck::Allow)
    }
}

/// Deny iff the ledger's in-scope spend (committed plus reserved) plus the
/// projection strictly exceeds a limit. The total limit binds first.
pub fn check_budget(
    ledger: &CostLedger,
    policy: &BudgetPolicy,
    scope: CostScope,
    iteration: u32,
    projected: Micros,
) -> BudgetCheck {
    let total = ledger.committed_total_in(scope) + ledger.reserved_total();
    if total.get() as u128 + projected.get() as u128 > policy.total_cost_limit.get() as u128 {
        return BudgetCheck::Deny(BudgetDenial {
            limit: BudgetLimit::Total,
            spent: total,
            projected,
            cap: policy.total_cost_limit,
        });
    }
    let iter_total =
        ledger.committed_iteration_total_in(iteration, scope) + ledger.reserved_for(iteration);
    if iter_total.get() as u128 + projected.get() as u128
        > policy.llm_cost_limit_per_iteration.get() as u128
    {
        return BudgetCheck::Deny(BudgetDenial {
            limit: BudgetLimit::PerIteration,
            spent: iter_total,
            projected,
            cap: policy.llm_cost_limit_per_iteration,
        });
    }
    BudgetCheck::Allow
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ledger::test_record;

    fn ledger_with(costs: &[(u32, u64)]) -> CostLedger {
        let mut l = CostLedger::new("run-t");
        for &(iter, cost) in costs {
            l.push(test_record("run-t", iter, cost, Caller::Pipeline));
        }
        l
    }

    #[test]
    fn total_limit_denies() {
        let l = ledger_with(&[(1, 999_000), (2, 991_000)]);
        let policy = BudgetPolicy {
            llm_cost_limit_per_iteration: Micros(10_000_000),
            ..BudgetPolicy::default()
        };
        // bring the total to 9_990_000
        let mut l2 = l.clone();
        for i in 3..=10 {
            l2.push(test_record("run-t", i, 1_000_000, Caller::Pipeline));
        }
        assert_eq!(l2.total(), Micros(9_990_000));
        match check_budget(&l2, &policy, CostScope::All, 11, Micros(20_000)) {
            BudgetCheck::Deny(d) => assert_eq!(d.limit, BudgetLimit::Total),
            other => panic!("expected deny, got {other:?}"),
        }
        assert!(check_budget(&l2, &policy, CostScope::All, 11, Micros(10_000)).is_allow());
    }

    #[test]
    fn empty_ledger_zero_projection_allows() {
        let l = CostLedger::new("r");
        assert!(check_budget(&l, &BudgetPolicy::default(), CostScope::All, 1, Micros(0)).is_allow());
    }

    #[test]
    fn reaching_the_limit_exactly_is_allowed() {
        let l = ledger_with(&[(4, 999_999)]);
        let policy = BudgetPolicy::default();
        assert!(check_budget(&l, &policy, CostScope::All, 4, Micros(1)).is_allow());
        match check_budget(&l, &policy, CostScope::All, 4, Micros(2)) {
            BudgetCheck::Deny(d) => assert_eq!(d.limit, BudgetLimit::PerIteration),
            other => panic!("{other:?}"),
        }
        // other iterations have their own allowance
        assert!(check_budget(&l, &policy, CostScope::All, 5, Micros(1_000_000)).is_allow());
    }

    #[test]
    fn scope_excludes_other_callers() {
        let mut l = CostLedger::new("r");
        l.push(test_record("r", 1, 1_000_000, Caller::ExperimentCode));
        let policy = BudgetPolicy::default();
        assert!(!check_budget(&l, &policy, CostScope::All, 1, Micros(1)).is_allow());
        assert!(check_budget(&l, &policy, CostScope::PipelineOnly, 1, Micros(1)).is_allow());
    }

    #[test]
    fn defaults_match_limits_table() {
        let p = BudgetPolicy::default();
        assert_eq!(p.max_debug_iterations, 25);
        assert_eq!(p.total_cost_limit, Micros(10_000_000));
        assert_eq!(p.llm_cost_limit_per_iteration, Micros(1_000_000));
        assert_eq!(p.execution_time_limit_per_iteration, Duration::from_secs(5400));
        assert_eq!(p.hard_time_limit, Duration::from_secs(21_600));
        assert!(p.validate().is_ok());
        let bad = BudgetPolicy {
            max_debug_iterations: 0,
            ..p
        };
        assert!(bad.validate().unwrap_err().contains("max_debug_iterations"));
    }
}
