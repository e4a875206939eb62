//! ROUGE-L and exact-match METEOR over token sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Longest common subsequence length, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L with β = 1.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<RougeScore, MetricError> {
    if candidate.is_empty() {
        return Err(MetricError::EmptySequence("candidate"));
    }
    if reference.is_empty() {
        return Err(MetricError::EmptySequence("reference"));
    }
    let l = lcs_len(candidate, reference) as f64;
    let precision = l / candidate.len() as f64;
    let recall = l / reference.len() as f64;
    let f = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(RougeScore { precision, recall, f })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorParams {
    pub alpha: f64,
    pub gamma: f64,
    pub theta: f64,
    /// Search nodes spent on chunk minimisation before settling for the best
    /// alignment found so far.
    pub node_budget: usize,
}

impl Default for MeteorParams {
    fn default() -> Self {
        MeteorParams { alpha: 0.9, gamma: 0.5, theta: 3.0, node_budget: 200_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorScore {
    pub score: f64,
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub fmean: f64,
    pub penalty: f64,
    /// false when the node budget ran out and `chunks` is an upper bound
    pub exact: bool,
}

/// METEOR score from alignment statistics.
pub fn meteor_from_counts(
    matches: usize,
    chunks: usize,
    cand_len: usize,
    ref_len: usize,
    params: &MeteorParams,
) -> (f64, f64, f64, f64, f64) {
    if matches == 0 {
        return (0.0, 0.0, 0.0, 0.0, 0.0);
    }
    let m = matches as f64;
    let precision = m / cand_len as f64;
    let recall = m / ref_len as f64;
    let fmean = precision * recall / (params.alpha * precision + (1.0 - params.alpha) * recall);
    let penalty = params.gamma * (chunks as f64 / m).powf(params.theta);
    (fmean * (1.0 - penalty), precision, recall, fmean, penalty)
}

struct Search<'a> {
    cand: &'a [usize],
    ref_positions: Vec<Vec<usize>>,
    need: Vec<usize>,
    // candidate occurrences of each type at positions >= i
    remaining: Vec<Vec<usize>>,
    used: Vec<bool>,
    matched: Vec<usize>,
    best: usize,
    nodes: usize,
    budget: usize,
    exhausted: bool,
}

impl Search<'_> {
    fn go(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        if chunks >= self.best {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            self.exhausted = true;
            return;
        }
        if i == self.cand.len() {
            self.best = chunks;
            return;
        }
        let t = self.cand[i];
        let still_needed = self.need[t] - self.matched[t];
        let must_match = self.remaining[t][i] == still_needed;
        if still_needed > 0 {
            // continuing the current chunk first finds good bounds early
            let mut order: Vec<usize> = Vec::with_capacity(self.ref_positions[t].len());
            if let Some(p) = prev {
                if let Ok(k) = self.ref_positions[t].binary_search(&(p + 1)) {
                    order.push(self.ref_positions[t][k]);
                }
            }
            for &j in &self.ref_positions[t] {
                if Some(j) != order.first().copied() {
                    order.push(j);
                }
            }
            for j in order {
                if self.used[j] {
                    continue;
                }
                let extends = prev.is_some_and(|p| p + 1 == j);
                self.used[j] = true;
                self.matched[t] += 1;
                self.go(i + 1, Some(j), chunks + usize::from(!extends));
                self.matched[t] -= 1;
                self.used[j] = false;
                if self.exhausted {
                    return;
                }
            }
        }
        if !must_match {
            self.go(i + 1, None, chunks);
        }
    }
}

/// Maximum exact-match alignment with the fewest chunks.
///
/// Minimum chunking is a hard combinatorial problem in general, so the
/// search is branch-and-bound with a node budget; short inputs are always
/// solved exactly.
pub fn align<'a>(candidate: &'a [String], reference: &'a [String], node_budget: usize) -> (usize, usize, bool) {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut intern = |s: &'a str| {
        let n = ids.len();
        *ids.entry(s).or_insert(n)
    };
    let cand: Vec<usize> = candidate.iter().map(|s| intern(s)).collect();
    let refs: Vec<usize> = reference.iter().map(|s| intern(s)).collect();
    let types = ids.len();

    let mut ref_positions = vec![Vec::new(); types];
    for (j, &t) in refs.iter().enumerate() {
        ref_positions[t].push(j);
    }
    let mut cand_count = vec![0usize; types];
    for &t in &cand {
        cand_count[t] += 1;
    }
    let need: Vec<usize> = (0..types).map(|t| cand_count[t].min(ref_positions[t].len())).collect();
    let matches: usize = need.iter().sum();
    if matches == 0 {
        return (0, 0, true);
    }
    let mut remaining = vec![vec![0usize; cand.len() + 1]; types];
    for i in (0..cand.len()).rev() {
        for (t, r) in remaining.iter_mut().enumerate() {
            r[i] = r[i + 1] + usize::from(cand[i] == t);
        }
    }
    let mut s = Search {
        cand: &cand,
        ref_positions,
        need,
        remaining,
        used: vec![false; refs.len()],
        matched: vec![0; types],
        best: usize::MAX,
        nodes: 0,
        budget: node_budget.max(1),
        exhausted: false,
    };
    s.go(0, None, 0);
    if s.best == usize::MAX {
        // budget ran out before any complete alignment: one chunk per match
        s.best = matches;
    }
    (matches, s.best, !s.exhausted)
}

pub fn meteor(candidate: &[String], reference: &[String]) -> Result<MeteorScore, MetricError> {
    meteor_with(candidate, reference, &MeteorParams::default())
}

pub fn meteor_with(candidate: &[String], reference: &[String], params: &MeteorParams) -> Result<MeteorScore, MetricError> {
    if candidate.is_empty() {
        return Err(MetricError::EmptySequence("candidate"));
    }
    if reference.is_empty() {
        return Err(MetricError::EmptySequence("reference"));
    }
    let (matches, chunks, exact) = align(candidate, reference, params.node_budget);
    let (score, precision, recall, fmean, penalty) =
        meteor_from_counts(matches, chunks, candidate.len(), reference.len(), params);
    Ok(MeteorScore { score, matches, chunks, precision, recall, fmean, penalty, exact })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn rouge_identity_and_hand_case() {
        let a = toks("the cat sat");
        assert_eq!(rouge_l(&a, &a).unwrap().f, 1.0);
        let r = rouge_l(&a, &toks("the cat ran")).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&a, &toks("dogs bark loudly")).unwrap().f, 0.0);
        assert!(rouge_l(&[], &a).is_err());
    }

    #[test]
    fn meteor_hand_cases() {
        let abc = toks("a b c");
        let m = meteor(&abc, &abc).unwrap();
        assert_eq!((m.matches, m.chunks), (3, 1));
        assert!((m.score - (1.0 - 0.5 / 27.0)).abs() < 1e-12);

        let m = meteor(&toks("b a"), &toks("a b")).unwrap();
        assert_eq!((m.matches, m.chunks), (2, 2));
        assert!((m.penalty - 0.5).abs() < 1e-12);
        assert!((m.score - 0.5).abs() < 1e-12);

        assert_eq!(meteor(&toks("x y"), &toks("a b")).unwrap().score, 0.0);
    }

    #[test]
    fn repeated_tokens_pick_contiguous_alignment() {
        // naive left-to-right matching would split "the cat" into two chunks
        let m = meteor(&toks("the cat the dog"), &toks("the dog the cat")).unwrap();
        assert_eq!((m.matches, m.chunks), (4, 2));
        assert!(m.exact);
    }

    #[test]
    fn budget_exhaustion_reports_inexact() {
        let c: Vec<String> = (0..40).map(|i| ["a", "b"][i % 2].to_string()).collect();
        let r: Vec<String> = (0..40).map(|i| ["b", "a", "a"][i % 3].to_string()).collect();
        let p = MeteorParams { node_budget: 50, ..MeteorParams::default() };
        let m = meteor_with(&c, &r, &p).unwrap();
        assert!(!m.exact);
        assert!(m.chunks >= 1 && m.chunks <= m.matches);
        assert!((0.0..=1.0).contains(&m.score));
    }
}
