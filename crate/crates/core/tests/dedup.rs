use std::collections::BTreeMap;

use autolab::ideation::{dedup_indices, TermFrequency, DEFAULT_THRESHOLD};

/// Seven distinct ideas plus three reworded copies (indices 3, 6, 9 copy
/// 0, 2, 5 with clauses reordered and one word changed).
const IDEAS: [&str; 10] = [
    "Agents that keep a compact memory of visited rooms and seen objects finish household chores in fewer steps than agents limited to their context window",
    "Verbalized confidence scores from a language model track the accuracy of its next state predictions in text games",
    "Pruning candidate commands with a commonsense prior lowers the invalid command rate of exploring parser game agents",
    "Finish household chores in fewer steps than agents limited to their context window: agents that keep a compact memory of visited rooms and seen objects",
    "Two judge prompts scoring the same world model predictions agree on most items when measured with Cohen kappa",
    "Rewarding unvisited doors with a simple visit log increases map coverage within a fixed budget of moves",
    "Lowers the invalid command rate of exploring parser game agents: pruning candidate commands with a commonsense prior",
    "Chain of thought prompting improves arithmetic word problem accuracy for small instruction tuned models",
    "Curriculum ordering of training tasks by difficulty speeds up convergence of reinforcement learning policies",
    "Increases map coverage within a fixed budget of moves: rewarding unvisited doors with a simple visit record",
];

/// Independent dense term-count cosine: lowercase alphanumeric tokens,
/// counts in an ordered map, dot product over the union vocabulary.
fn oracle_cosine(a: &str, b: &str) -> f64 {
    let counts = |t: &str| {
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for w in t
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            *m.entry(w.to_lowercase()).or_default() += 1.0;
        }
        m
    };
    let (x, y) = (counts(a), counts(b));
    let dot: f64 = x.iter().map(|(k, v)| v * y.get(k).copied().unwrap_or(0.0)).sum();
    let norm = |m: &BTreeMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (norm(&x) * norm(&y))
}

#[test]
fn paraphrases_beyond_the_first_are_dropped() {
    let mut linked = Vec::new();
    for (i, a) in IDEAS.iter().enumerate() {
        for (j, b) in IDEAS.iter().enumerate().skip(i + 1) {
            if oracle_cosine(a, b) >= DEFAULT_THRESHOLD {
                linked.push((i, j));
            }
        }
    }
    // the corpus is built so only the three reworded copies link
    assert_eq!(linked, vec![(0, 3), (2, 6), (5, 9)]);

    let out = dedup_indices(&IDEAS, DEFAULT_THRESHOLD, &TermFrequency);
    assert_eq!(out.kept, vec![0, 1, 2, 4, 5, 7, 8]);
    let dropped: Vec<(usize, usize)> = out.dropped.iter().map(|d| (d.index, d.nearest_kept)).collect();
    assert_eq!(dropped, vec![(3, 0), (6, 2), (9, 5)]);
    for d in &out.dropped {
        let want = oracle_cosine(IDEAS[d.index], IDEAS[d.nearest_kept]);
        assert!((d.similarity - want).abs() < 1e-12, "{} vs {want}", d.similarity);
        assert!(d.similarity >= DEFAULT_THRESHOLD);
    }
}

#[test]
fn raising_the_threshold_never_drops_more() {
    let mut last = usize::MAX;
    for t in (0..=100).map(|t| t as f64 / 100.0) {
        let dropped = dedup_indices(&IDEAS, t, &TermFrequency).dropped.len();
        assert!(dropped <= last, "threshold {t}: {dropped} > {last}");
        last = dropped;
    }
    // pure reorderings have identical term counts, so even 1.0 drops them
    let exact = dedup_indices(&IDEAS, 1.0, &TermFrequency);
    assert_eq!(exact.dropped.iter().map(|d| d.index).collect::<Vec<_>>(), vec![3, 6]);
}
