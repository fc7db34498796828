//! Near-duplicate filtering by cosine similarity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_THRESHOLD: f64 = 0.92;

/// Sparse vector: `(dimension, weight)` pairs sorted by dimension.
pub type SparseVector = Vec<(u32, f64)>;

/// Maps a batch of texts into a shared vector space.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[&str]) -> Vec<SparseVector>;
}

/// Raw term counts over lowercase alphanumeric tokens. Dimensions are assigned
/// per batch, so vectors are only comparable within one call.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermFrequency;

pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl Embedder for TermFrequency {
    fn embed(&self, texts: &[&str]) -> Vec<SparseVector> {
        let mut vocab: HashMap<String, u32> = HashMap::new();
        texts
            .iter()
            .map(|text| {
                let mut counts: HashMap<u32, f64> = HashMap::new();
                for tok in tokens(text) {
                    let next = vocab.len() as u32;
                    let dim = *vocab.entry(tok).or_insert(next);
                    *counts.entry(dim).or_default() += 1.0;
                }
                let mut v: SparseVector = counts.into_iter().collect();
                v.sort_unstable_by_key(|&(d, _)| d);
                v
            })
            .collect()
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    let na = a.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let nb = b.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // identical vectors must report exactly 1.0
    (dot / (na * nb)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub index: usize,
    pub nearest_kept: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DedupOutcome {
    /// Input indices kept, in input order.
    pub kept: Vec<usize>,
    pub dropped: Vec<Dropped>,
}

/// Per-component cap on dominating-set candidates examined before falling
/// back to the greedy filter for that component.
const SEARCH_BUDGET: u64 = 2_000_000;

/// Keep a smallest set of texts such that every dropped text has a kept text
/// with similarity `>= threshold`.
///
/// Texts are linked when their similarity reaches the threshold; within each
/// connected component the kept set is a minimum dominating set, ties broken
/// toward earlier indices (so an exact duplicate always loses to the first
/// occurrence). Because raising the threshold only removes links, the number
/// of dropped texts can only shrink. Components whose exact search exceeds
/// the search budget use a greedy first-seen pass instead.
///
/// # Panics
/// If `threshold` is outside `[0, 1]`.
pub fn dedup_indices(texts: &[&str], threshold: f64, embedder: &dyn Embedder) -> DedupOutcome {
    assert!(
        (0.0..=1.0).contains(&threshold),
        "threshold {threshold} outside [0, 1]"
    );
    let vectors = embedder.embed(texts);
    dedup_by(vectors.len(), threshold, |i, j| cosine(&vectors[i], &vectors[j]))
}

/// [`dedup_indices`] over an arbitrary symmetric similarity function.
pub fn dedup_by(n: usize, threshold: f64, similarity: impl Fn(usize, usize) -> f64) -> DedupOutcome {
    let mut sim = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = similarity(i, j);
            if s >= threshold {
                sim[i].push((j, s));
                sim[j].push((i, s));
            }
        }
    }

    let mut kept = vec![false; n];
    let mut seen = vec![false; n];
    for root in 0..n {
        if seen[root] {
            continue;
        }
        let mut component = vec![root];
        seen[root] = true;
        let mut head = 0;
        while head < component.len() {
            let v = component[head];
            head += 1;
            for &(w, _) in &sim[v] {
                if !seen[w] {
                    seen[w] = true;
                    component.push(w);
                }
            }
        }
        component.sort_unstable();
        for v in min_dominating_set(&component, &sim) {
            kept[v] = true;
        }
    }

    let mut out = DedupOutcome::default();
    for i in 0..n {
        if kept[i] {
            out.kept.push(i);
            continue;
        }
        let (k, s) = sim[i]
            .iter()
            .filter(|(k, _)| kept[*k])
            .fold(None::<(usize, f64)>, |best, &(k, s)| match best {
                Some((bk, bs)) if bs > s || (bs == s && bk < k) => best,
                _ => Some((k, s)),
            })
            .expect("dominating set covers every dropped index");
        out.dropped.push(Dropped {
            index: i,
            nearest_kept: k,
            similarity: s,
        });
    }
    out
}

type Bits = Vec<u64>;

fn min_dominating_set(component: &[usize], sim: &[Vec<(usize, f64)>]) -> Vec<usize> {
    let m = component.len();
    if m == 1 {
        return component.to_vec();
    }
    let local = |v: usize| component.binary_search(&v).expect("neighbour in component");
    let words = m.div_ceil(64);
    let closed: Vec<Bits> = component
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut b = vec![0u64; words];
            b[i / 64] |= 1 << (i % 64);
            for &(w, _) in &sim[v] {
                let j = local(w);
                b[j / 64] |= 1 << (j % 64);
            }
            b
        })
        .collect();
    let full: Bits = (0..words)
        .map(|w| {
            let bits = (m - w * 64).min(64);
            if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 }
        })
        .collect();

    let greedy = greedy_cover(&closed, &full);
    let mut budget = SEARCH_BUDGET;
    for k in 1..=greedy.len() {
        match search_k(&closed, &full, k, &mut budget) {
            Some(found) => return found.into_iter().map(|i| component[i]).collect(),
            None if budget == 0 => break,
            None => {}
        }
    }
    greedy.into_iter().map(|i| component[i]).collect()
}

/// First-seen greedy: keep a vertex unless an already-kept vertex covers it.
fn greedy_cover(closed: &[Bits], full: &Bits) -> Vec<usize> {
    let mut covered = vec![0u64; full.len()];
    let mut kept = Vec::new();
    for (i, nb) in closed.iter().enumerate() {
        if covered[i / 64] & (1 << (i % 64)) == 0 {
            kept.push(i);
            for (c, b) in covered.iter_mut().zip(nb) {
                *c |= b;
            }
        }
    }
    kept
}

/// Lexicographically first `k`-subset whose closed neighbourhoods cover
/// everything, or `None` (also when the budget runs out).
fn search_k(closed: &[Bits], full: &Bits, k: usize, budget: &mut u64) -> Option<Vec<usize>> {
    let m = closed.len();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if *budget == 0 {
            return None;
        }
        *budget -= 1;
        let covers = full.iter().enumerate().all(|(w, &f)| {
            idx.iter().fold(0u64, |acc, &i| acc | closed[i][w]) == f
        });
        if covers {
            return Some(idx);
        }
        // next combination in lexicographic order
        let mut pos = k;
        loop {
            if pos == 0 {
                return None;
            }
            pos -= 1;
            if idx[pos] < m - k + pos {
                break;
            }
        }
        idx[pos] += 1;
        for p in (pos + 1)..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_have_similarity_one() {
        let out = dedup_indices(&["the cat sat", "the cat sat"], 0.92, &TermFrequency);
        assert_eq!(out.kept, vec![0]);
        assert_eq!(out.dropped, vec![Dropped { index: 1, nearest_kept: 0, similarity: 1.0 }]);
    }

    #[test]
    fn single_and_empty() {
        assert_eq!(dedup_indices(&["one idea"], 0.5, &TermFrequency).kept, vec![0]);
        assert_eq!(dedup_indices(&[], 0.5, &TermFrequency), DedupOutcome::default());
    }

    #[test]
    fn cosine_of_disjoint_and_zero() {
        let v = TermFrequency.embed(&["a b", "c d", ""]);
        assert_eq!(cosine(&v[0], &v[1]), 0.0);
        assert_eq!(cosine(&v[0], &v[2]), 0.0);
    }

    fn matrix(pairs: &[(usize, usize, f64)]) -> impl Fn(usize, usize) -> f64 + '_ {
        move |i, j| {
            pairs
                .iter()
                .find(|&&(a, b, _)| (a, b) == (i, j) || (b, a) == (i, j))
                .map_or(0.0, |p| p.2)
        }
    }

    #[test]
    fn drop_count_is_monotone_where_first_seen_greedy_is_not() {
        // A~B 0.90, B~C 0.95, B~D 0.95, C~D 0.85. First-seen greedy drops only
        // B at 0.89 but C and D at 0.92. The minimum cover is {B} at 0.89 and
        // {A, B} at 0.92.
        let sims = [(0, 1, 0.90), (1, 2, 0.95), (1, 3, 0.95), (2, 3, 0.85)];
        let low = dedup_by(4, 0.89, matrix(&sims));
        let high = dedup_by(4, 0.92, matrix(&sims));
        assert_eq!(low.kept, vec![1]);
        assert_eq!(high.kept, vec![0, 1]);
        assert_eq!(low.dropped.len(), 3);
        assert_eq!(high.dropped.len(), 2);
        assert_eq!(high.dropped[0], Dropped { index: 2, nearest_kept: 1, similarity: 0.95 });
    }

    #[test]
    fn ties_keep_earliest() {
        let sims = [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)];
        assert_eq!(dedup_by(3, 0.5, matrix(&sims)).kept, vec![0]);
        // a hub in the middle beats two ends
        let path = [(0, 1, 0.9), (1, 2, 0.9)];
        assert_eq!(dedup_by(3, 0.5, matrix(&path)).kept, vec![1]);
    }

    proptest::proptest! {
        #[test]
        fn coverage_and_monotone_count(
            raw in proptest::collection::vec(0u8..=100, 0..66),
            t1 in 0u8..=100, t2 in 0u8..=100,
        ) {
            // random symmetric similarities over up to 12 items
            let n = (1..=12).rev().find(|n| n * (n - 1) / 2 <= raw.len()).unwrap_or(1);
            let sim = |i: usize, j: usize| {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                raw[a * n - a * (a + 1) / 2 + (b - a - 1)] as f64 / 100.0
            };
            let (lo, hi) = (t1.min(t2) as f64 / 100.0, t1.max(t2) as f64 / 100.0);
            let a = dedup_by(n, lo, sim);
            let b = dedup_by(n, hi, sim);
            proptest::prop_assert!(b.dropped.len() <= a.dropped.len());
            for out in [&a, &b] {
                proptest::prop_assert_eq!(out.kept.len() + out.dropped.len(), n);
                for d in &out.dropped {
                    proptest::prop_assert!(out.kept.contains(&d.nearest_kept));
                    proptest::prop_assert_eq!(d.similarity, sim(d.index, d.nearest_kept));
                }
            }
            for d in &a.dropped { proptest::prop_assert!(d.similarity >= lo); }
            for d in &b.dropped { proptest::prop_assert!(d.similarity >= hi); }
        }
    }

    #[test]
    fn threshold_zero_keeps_only_first_of_overlapping() {
        let out = dedup_indices(&["x y", "y z", "q"], 0.0, &TermFrequency);
        // threshold 0 drops everything after the first (similarity >= 0 always)
        assert_eq!(out.kept, vec![0]);
        assert_eq!(out.dropped.len(), 2);
    }

    #[test]
    #[should_panic]
    fn out_of_range_threshold() {
        dedup_indices(&["a"], 1.5, &TermFrequency);
    }
}
