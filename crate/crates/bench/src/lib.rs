//! Input generators shared by the benchmarks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use autolab::meta::AttemptResult;
use autolab::reporting::Verdict;

const WORDS: &[&str] = &[
    "agent", "memory", "room", "object", "confidence", "accuracy", "prediction", "judge", "prompt", "score",
    "pruning", "action", "prior", "parser", "coverage", "map", "episode", "reward", "policy", "state",
    "observation", "correlation", "baseline", "simulator", "household", "chores", "steps", "valid", "invalid",
    "exploration",
];

/// `n` idea-like descriptions of 20-40 words; roughly one in five is a
/// light paraphrase of an earlier one.
pub fn idea_texts(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = Vec::with_capacity(n);
    for _ in 0..n {
        if !out.is_empty() && rng.random_bool(0.2) {
            let base = out[rng.random_range(0..out.len())].clone();
            out.push(format!("{base} {}", WORDS.choose(&mut rng).unwrap()));
            continue;
        }
        let len = rng.random_range(20..40);
        let text: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
        out.push(text.join(" "));
    }
    out
}

/// Every completion/verdict assignment for `n` attempts (4^n of them).
pub fn attempt_assignments(n: u32) -> Vec<Vec<AttemptResult>> {
    let labels = [
        AttemptResult { completed: true, verdict: Some(Verdict::Supports) },
        AttemptResult { completed: true, verdict: Some(Verdict::Rejects) },
        AttemptResult { completed: true, verdict: Some(Verdict::Inconclusive) },
        AttemptResult { completed: false, verdict: None },
    ];
    (0..4usize.pow(n))
        .map(|code| (0..n).map(|i| labels[(code / 4usize.pow(i)) % 4]).collect())
        .collect()
}
