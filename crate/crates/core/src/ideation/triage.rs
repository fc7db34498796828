//! Stratified selection of ideas for human triage.

use serde::{Deserialize, Serialize};

use super::Idea;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrataKey {
    Operator,
    SourcePair,
}

impl std::str::FromStr for StrataKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "operator" => Ok(StrataKey::Operator),
            "source-pair" => Ok(StrataKey::SourcePair),
            other => Err(format!("unknown strata key `{other}` (operator|source-pair)")),
        }
    }
}

fn stratum(idea: &Idea, key: StrataKey) -> String {
    match key {
        StrataKey::Operator => idea.operator.as_str().to_string(),
        StrataKey::SourcePair => idea.source_paper_ids.join("+"),
    }
}

/// Take up to `per_stratum` ideas from each stratum (in input order) and
/// interleave the strata round-robin, strata ordered by first appearance.
pub fn select_batch(ideas: &[Idea], key: StrataKey, per_stratum: usize) -> Vec<&Idea> {
    let mut strata: Vec<(String, Vec<&Idea>)> = Vec::new();
    for idea in ideas {
        let s = stratum(idea, key);
        let slot = match strata.iter().position(|(k, _)| *k == s) {
            Some(i) => i,
            None => {
                strata.push((s, Vec::new()));
                strata.len() - 1
            }
        };
        if strata[slot].1.len() < per_stratum {
            strata[slot].1.push(idea);
        }
    }
    let mut queue = Vec::new();
    for round in 0..per_stratum {
        for (_, members) in &strata {
            if let Some(idea) = members.get(round) {
                queue.push(*idea);
            }
        }
    }
    queue
}
