use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::budget::CostScope;
use super::provider::Stage;
use crate::money::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Caller {
    Pipeline,
    ExperimentCode,
}

/// One metered model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub call_id: String,
    pub run_id: String,
    pub iteration_index: u32,
    pub model: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: Micros,
    pub timestamp: DateTime<Utc>,
    pub caller: Caller,
    pub stage: Stage,
    #[serde(default)]
    pub truncated: bool,
}

/// Append-only usage records for one run with exact running totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub run_id: String,
    records: Vec<UsageRecord>,
    total: Micros,
    per_iteration_totals: BTreeMap<u32, Micros>,
    #[serde(skip)]
    reserved: BTreeMap<u32, Micros>,
}

impl CostLedger {
    pub fn new(run_id: impl Into<String>) -> Self {
        CostLedger {
            run_id: run_id.into(),
            ..Default::default()
        }
    }

    pub fn from_records(run_id: impl Into<String>, records: Vec<UsageRecord>) -> Self {
        let mut ledger = CostLedger::new(run_id);
        for r in records {
            ledger.push(r);
        }
        ledger
    }

    pub fn push(&mut self, record: UsageRecord) {
        self.total += record.cost;
        *self
            .per_iteration_totals
            .entry(record.iteration_index)
            .or_default() += record.cost;
        self.records.push(record);
    }

    pub fn records(&self) -> &[UsageRecord] {
        &self.records
    }

    pub fn total(&self) -> Micros {
        self.total
    }

    pub fn per_iteration_totals(&self) -> &BTreeMap<u32, Micros> {
        &self.per_iteration_totals
    }

    pub fn iteration_total(&self, iteration: u32) -> Micros {
        self.per_iteration_totals
            .get(&iteration)
            .copied()
            .unwrap_or_default()
    }

    pub fn committed_total_in(&self, scope: CostScope) -> Micros {
        if scope == CostScope::All {
            return self.total;
        }
        self.records
            .iter()
            .filter(|r| scope.covers(r.caller))
            .map(|r| r.cost)
            .sum()
    }

    pub fn committed_iteration_total_in(&self, iteration: u32, scope: CostScope) -> Micros {
        if scope == CostScope::All {
            return self.iteration_total(iteration);
        }
        self.records
            .iter()
            .filter(|r| r.iteration_index == iteration && scope.covers(r.caller))
            .map(|r| r.cost)
            .sum()
    }

    pub(crate) fn reserve(&mut self, iteration: u32, amount: Micros) {
        *self.reserved.entry(iteration).or_default() += amount;
    }

    pub(crate) fn release(&mut self, iteration: u32, amount: Micros) {
        if let Some(r) = self.reserved.get_mut(&iteration) {
            *r = r.saturating_sub(amount);
            if *r == Micros::ZERO {
                self.reserved.remove(&iteration);
            }
        }
    }

    pub fn reserved_total(&self) -> Micros {
        self.reserved.values().copied().sum()
    }

    pub fn reserved_for(&self, iteration: u32) -> Micros {
        self.reserved.get(&iteration).copied().unwrap_or_default()
    }

    /// Highest iteration index that has any record.
    pub fn last_iteration(&self) -> Option<u32> {
        self.per_iteration_totals.keys().next_back().copied()
    }
}

/// Per-run figures fed into [`usage_summary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunUsage {
    pub run_id: String,
    pub terminal: bool,
    pub total_cost: Micros,
    pub debug_iterations: u32,
    pub runtime_secs: f64,
    pub code_lines: u64,
    pub code_tokens: u64,
}

/// Means over terminal runs, kept as exact ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSummary {
    pub runs: u64,
    pub mean_cost_micros: Ratio<u128>,
    pub mean_debug_iterations: Ratio<u128>,
    pub mean_code_lines: Ratio<u128>,
    pub mean_code_tokens: Ratio<u128>,
    /// Runtime is measured in floating seconds; averaged after summing.
    pub mean_runtime_secs: f64,
}

impl UsageSummary {
    pub fn mean_cost(&self) -> Micros {
        Micros(ratio_round(self.mean_cost_micros) as u64)
    }

    pub fn mean_iterations_f64(&self) -> f64 {
        *self.mean_debug_iterations.numer() as f64 / *self.mean_debug_iterations.denom() as f64
    }
}

fn ratio_round(r: Ratio<u128>) -> u128 {
    let (n, d) = (*r.numer(), *r.denom());
    (2 * n + d) / (2 * d)
}

/// Table-style averages over the terminal runs in `runs`; `None` when there are none.
pub fn usage_summary(runs: &[RunUsage]) -> Option<UsageSummary> {
    let terminal: Vec<&RunUsage> = runs.iter().filter(|r| r.terminal).collect();
    if terminal.is_empty() {
        return None;
    }
    let n = terminal.len() as u128;
    let mean = |f: &dyn Fn(&RunUsage) -> u128| Ratio::new(terminal.iter().map(|r| f(r)).sum(), n);
    Some(UsageSummary {
        runs: n as u64,
        mean_cost_micros: mean(&|r| r.total_cost.get() as u128),
        mean_debug_iterations: mean(&|r| r.debug_iterations as u128),
        mean_code_lines: mean(&|r| r.code_lines as u128),
        mean_code_tokens: mean(&|r| r.code_tokens as u128),
        mean_runtime_secs: terminal.iter().map(|r| r.runtime_secs).sum::<f64>() / n as f64,
    })
}

#[cfg(test)]
pub(crate) fn test_record(run: &str, iteration: u32, cost: u64, caller: Caller) -> UsageRecord {
    UsageRecord {
        call_id: format!("{run}:{iteration}:{cost}"),
        run_id: run.into(),
        iteration_index: iteration,
        model: "m".into(),
        input_tokens: 0,
        output_tokens: 0,
        cost: Micros(cost),
        timestamp: Utc::now(),
        caller,
        stage: Stage::Codegen,
        truncated: false,
    }
}
