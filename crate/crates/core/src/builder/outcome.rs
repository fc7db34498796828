use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::gateway::BudgetPolicy;

/// Terminal state of an experiment run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeKind {
    Completed,
    DebugLimit,
    HardTimeLimit,
    CodeTooLong,
    CostLimit,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 5] = [
        OutcomeKind::Completed,
        OutcomeKind::DebugLimit,
        OutcomeKind::HardTimeLimit,
        OutcomeKind::CodeTooLong,
        OutcomeKind::CostLimit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Completed => "Completed",
            OutcomeKind::DebugLimit => "DebugLimit",
            OutcomeKind::HardTimeLimit => "HardTimeLimit",
            OutcomeKind::CodeTooLong => "CodeTooLong",
            OutcomeKind::CostLimit => "CostLimit",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            OutcomeKind::Completed => "experiment completed successfully",
            OutcomeKind::DebugLimit => "debug iteration limit reached",
            OutcomeKind::HardTimeLimit => "hard experiment time limit reached",
            OutcomeKind::CodeTooLong => "unrecoverable code generation issue (code too long for output)",
            OutcomeKind::CostLimit => "hard cost limit reached",
        }
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub kind: OutcomeKind,
    pub detail: String,
}

/// What the run loop observed by the time it stopped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TerminationState {
    pub elapsed: Duration,
    pub iterations: u32,
    /// Reflection accepted the last tier the plan asks for.
    pub final_tier_succeeded: bool,
    /// A model call was refused because the total budget would be exceeded.
    pub total_budget_denied: bool,
    /// A code generation hit the output-token ceiling.
    pub generation_truncated: bool,
    pub abort_reason: Option<String>,
    /// Identical failures repeated with no code change.
    pub stalled: bool,
}

/// Map a stopped run to exactly one outcome. When several conditions hold the
/// precedence is HardTimeLimit > CostLimit > CodeTooLong > DebugLimit >
/// Completed; a run that stopped for no recorded reason counts as DebugLimit.
pub fn classify_outcome(state: &TerminationState, policy: &BudgetPolicy) -> RunOutcome {
    let out = |kind: OutcomeKind, detail: String| RunOutcome { kind, detail };
    if state.elapsed >= policy.hard_time_limit {
        return out(
            OutcomeKind::HardTimeLimit,
            format!(
                "wall clock {:.1}s reached hard limit {:.1}s after {} iterations",
                state.elapsed.as_secs_f64(),
                policy.hard_time_limit.as_secs_f64(),
                state.iterations
            ),
        );
    }
    if state.total_budget_denied {
        return out(
            OutcomeKind::CostLimit,
            format!("total cost limit {} reached", policy.total_cost_limit),
        );
    }
    if state.generation_truncated {
        return out(
            OutcomeKind::CodeTooLong,
            "generated program exceeded the output-token ceiling".into(),
        );
    }
    let exhausted = state.iterations >= policy.max_debug_iterations;
    if let Some(reason) = &state.abort_reason {
        return out(OutcomeKind::DebugLimit, format!("reflection aborted: {reason}"));
    }
    if state.stalled {
        return out(
            OutcomeKind::DebugLimit,
            "same error repeated with no code change".into(),
        );
    }
    if state.final_tier_succeeded {
        return out(OutcomeKind::Completed, "all planned tiers succeeded".into());
    }
    if exhausted {
        return out(
            OutcomeKind::DebugLimit,
            format!("{} debug iterations used without success", state.iterations),
        );
    }
    out(
        OutcomeKind::DebugLimit,
        format!("stopped after {} iterations without success", state.iterations),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn policy() -> BudgetPolicy {
        BudgetPolicy::default()
    }

    #[test]
    fn table_of_cases() {
        let p = policy();
        let done = TerminationState {
            final_tier_succeeded: true,
            iterations: 3,
            ..Default::default()
        };
        assert_eq!(classify_outcome(&done, &p).kind, OutcomeKind::Completed);

        let exhausted = TerminationState {
            iterations: p.max_debug_iterations,
            ..Default::default()
        };
        assert_eq!(classify_outcome(&exhausted, &p).kind, OutcomeKind::DebugLimit);

        let late = TerminationState {
            iterations: 7,
            elapsed: p.hard_time_limit,
            ..Default::default()
        };
        assert_eq!(classify_outcome(&late, &p).kind, OutcomeKind::HardTimeLimit);

        let success_on_last_allowed = TerminationState {
            iterations: p.max_debug_iterations,
            final_tier_succeeded: true,
            ..Default::default()
        };
        assert_eq!(
            classify_outcome(&success_on_last_allowed, &p).kind,
            OutcomeKind::Completed
        );

        let aborted = TerminationState {
            abort_reason: Some("impossible without external dataset".into()),
            ..Default::default()
        };
        let o = classify_outcome(&aborted, &p);
        assert_eq!(o.kind, OutcomeKind::DebugLimit);
        assert!(o.detail.contains("external dataset"));
    }

    fn rank(k: OutcomeKind) -> u8 {
        match k {
            OutcomeKind::HardTimeLimit => 4,
            OutcomeKind::CostLimit => 3,
            OutcomeKind::CodeTooLong => 2,
            OutcomeKind::DebugLimit => 1,
            OutcomeKind::Completed => 0,
        }
    }

    proptest! {
        #[test]
        fn precedence_holds(
            over_time: bool, cost: bool, trunc: bool, abort: bool, stalled: bool,
            success: bool, iterations in 0u32..30,
        ) {
            let p = policy();
            let st = TerminationState {
                elapsed: if over_time { p.hard_time_limit } else { Duration::ZERO },
                iterations,
                final_tier_succeeded: success,
                total_budget_denied: cost,
                generation_truncated: trunc,
                abort_reason: abort.then(|| "x".to_string()),
                stalled,
            };
            let kind = classify_outcome(&st, &p).kind;
            // the winning condition outranks every other condition that holds
            let mut holding = vec![];
            if over_time { holding.push(OutcomeKind::HardTimeLimit) }
            if cost { holding.push(OutcomeKind::CostLimit) }
            if trunc { holding.push(OutcomeKind::CodeTooLong) }
            if abort || stalled || (!success) { holding.push(OutcomeKind::DebugLimit) }
            if success { holding.push(OutcomeKind::Completed) }
            let top = holding.iter().copied().max_by_key(|k| rank(*k)).unwrap();
            prop_assert_eq!(kind, top);
        }
    }
}
