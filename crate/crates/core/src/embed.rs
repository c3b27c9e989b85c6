//! Embedding providers, exact nearest-neighbor search, and evidence
//! splitting by relevance thresholds.
//!
//! The index is a brute-force dot-product scan over contiguous storage; at
//! the corpus sizes this crate targets an approximate structure would only
//! complicate the determinism story.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{fnv1a64, tokenize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait EmbeddingProvider {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// Offline embedding provider: hashed bag-of-words with signed buckets,
/// projected to a fixed dimension and L2-normalized. Deterministic for a
/// fixed (seed, dim), which keeps the whole pipeline runnable with no
/// network access while preserving the dot-product contract.
#[derive(Debug, Clone)]
pub struct HashedBowProvider {
    pub dim: usize,
    pub seed: u64,
}

impl HashedBowProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl EmbeddingProvider for HashedBowProvider {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|text| {
                let tokens = tokenize(text);
                if tokens.is_empty() {
                    return Err(Error::contract("cannot embed empty text"));
                }
                let mut values = vec![0.0f64; self.dim];
                for token in &tokens {
                    let h = fnv1a64(format!("{}\u{1f}{token}", self.seed).as_bytes());
                    let idx = (h % self.dim as u64) as usize;
                    let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
                    values[idx] += sign;
                }
                let mut v = EmbeddingVector { values };
                let norm = v.l2_norm();
                if norm == 0.0 {
                    // signed buckets cancelled out; fall back to a unit basis vector
                    let h = fnv1a64(text.as_bytes());
                    v.values[(h % self.dim as u64) as usize] = 1.0;
                } else {
                    for x in &mut v.values {
                        *x /= norm;
                    }
                }
                Ok(v)
            })
            .collect()
    }
}

/// Remote embedding provider speaking a minimal JSON contract:
/// request `{"texts": [...]}`, response `{"vectors": [[f64, ...], ...]}`.
/// The API key is read from an environment variable so credentials never
/// land in configuration artifacts.
pub struct HttpEmbeddingProvider {
    pub endpoint: String,
    pub api_key_env: Option<String>,
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let body = serde_json::json!({ "texts": texts });
        let mut request = ureq::post(&self.endpoint);
        if let Some(env) = &self.api_key_env {
            let key = std::env::var(env)
                .map_err(|_| Error::config(format!("missing credential env var {env}")))?;
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        let response = request.send_json(body).map_err(|e| Error::Transport {
            message: e.to_string(),
            attempts: 1,
            retryable: matches!(&e, ureq::Error::Status(code, _) if *code == 429 || *code >= 500)
                || matches!(&e, ureq::Error::Transport(_)),
        })?;
        #[derive(Deserialize)]
        struct Reply {
            vectors: Vec<Vec<f64>>,
        }
        let reply: Reply = response.into_json().map_err(|e| Error::Transport {
            message: format!("bad embedding response: {e}"),
            attempts: 1,
            retryable: false,
        })?;
        Ok(reply
            .vectors
            .into_iter()
            .map(|values| EmbeddingVector { values })
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NeighborResult {
    pub id: String,
    pub score: f64,
}

/// Exact nearest-neighbor index: contiguous vectors, linear scan per query.
#[derive(Debug, Default, Clone)]
pub struct VectorIndex {
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    by_id: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: String, vector: EmbeddingVector) {
        if let Some(&slot) = self.by_id.get(&id) {
            self.vectors[slot] = vector;
            return;
        }
        self.by_id.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, id: &str) -> Option<&EmbeddingVector> {
        self.by_id.get(id).map(|&slot| &self.vectors[slot])
    }

    /// Top-k by dot product, score-descending with ties broken by id.
    pub fn query(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: Option<&str>,
        max_score: Option<f64>,
    ) -> Vec<NeighborResult> {
        let mut hits: Vec<NeighborResult> = self
            .ids
            .iter()
            .zip(&self.vectors)
            .filter(|(id, _)| exclude != Some(id.as_str()))
            .map(|(id, v)| NeighborResult {
                id: id.clone(),
                score: query.dot(v),
            })
            .filter(|n| match max_score {
                Some(t) => n.score < t,
                None => true,
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.id.cmp(&b.id))
        });
        hits.truncate(k);
        hits
    }
}

/// Neighbors of a question that are related without being paraphrases:
/// up to `k` results with dot product strictly below `t_q`, self excluded.
pub fn related_questions(
    index: &VectorIndex,
    question_id: &str,
    k: usize,
    t_q: f64,
) -> Result<Vec<NeighborResult>> {
    let query = index.vector(question_id).ok_or_else(|| Error::Lookup {
        id: question_id.to_string(),
    })?;
    Ok(index.query(query, k, Some(question_id), Some(t_q)))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub passage: Passage,
    pub score: f64,
    /// Supervised relevance label; `true` forces the passage into the
    /// relevant side regardless of retrieval score.
    pub labeled_relevant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub question_id: String,
    pub relevant: Vec<Passage>,
    pub irrelevant: Vec<Passage>,
}

impl EvidenceSet {
    pub fn relevant_ids(&self) -> Vec<&str> {
        self.relevant.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn irrelevant_ids(&self) -> Vec<&str> {
        self.irrelevant.iter().map(|p| p.id.as_str()).collect()
    }
}

/// Split scored passages into relevant evidence (top-k by score plus every
/// supervised-relevant passage) and irrelevant evidence (score strictly
/// below `t_doc`, minus anything already relevant). The two sides never
/// overlap. When `t_doc` is unset it defaults to the 25th percentile of the
/// question's retrieval scores.
pub fn split_evidence(
    question_id: &str,
    scored: &[ScoredPassage],
    top_k: usize,
    t_doc: Option<f64>,
) -> EvidenceSet {
    let mut order: Vec<&ScoredPassage> = scored.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.passage.id.cmp(&b.passage.id))
    });

    let mut relevant_ids: BTreeSet<&str> = order
        .iter()
        .take(top_k)
        .map(|p| p.passage.id.as_str())
        .collect();
    for p in scored {
        if p.labeled_relevant {
            relevant_ids.insert(p.passage.id.as_str());
        }
    }

    let threshold = t_doc.unwrap_or_else(|| lower_quartile(scored));

    let relevant = order
        .iter()
        .filter(|p| relevant_ids.contains(p.passage.id.as_str()))
        .map(|p| p.passage.clone())
        .collect();
    let irrelevant = order
        .iter()
        .filter(|p| p.score < threshold && !relevant_ids.contains(p.passage.id.as_str()))
        .map(|p| p.passage.clone())
        .collect();

    EvidenceSet {
        question_id: question_id.to_string(),
        relevant,
        irrelevant,
    }
}

fn lower_quartile(scored: &[ScoredPassage]) -> f64 {
    if scored.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut scores: Vec<f64> = scored.iter().map(|p| p.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    scores[scores.len() / 4]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn provider() -> HashedBowProvider {
        HashedBowProvider::new(64, 7)
    }

    #[test]
    fn offline_embedding_is_deterministic_and_unit_norm() {
        let p = provider();
        let a = p.embed("how do plants breathe at night").unwrap();
        let b = p.embed("how do plants breathe at night").unwrap();
        assert_eq!(a, b);
        assert!((a.l2_norm() - 1.0).abs() < 1e-6);
        assert!((a.dot(&a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(
            provider().embed("   "),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn related_excludes_self_and_paraphrases() {
        let p = provider();
        let mut index = VectorIndex::new();
        index.insert("q1".into(), p.embed("why is the sky blue").unwrap());
        // exact duplicate text embeds identically: dot = 1.0, over threshold
        index.insert("q2".into(), p.embed("why is the sky blue").unwrap());
        index.insert("q3".into(), p.embed("how to braise pork shoulder").unwrap());

        let related = related_questions(&index, "q1", 10, 0.92).unwrap();
        assert!(related.iter().all(|n| n.id != "q1"));
        assert!(related.iter().all(|n| n.id != "q2"));
        assert!(related.iter().all(|n| n.score < 0.92));
        assert!(related.iter().any(|n| n.id == "q3"));
    }

    #[test]
    fn related_unknown_id_is_lookup_error() {
        let index = VectorIndex::new();
        assert!(matches!(
            related_questions(&index, "nope", 5, 0.9),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn query_matches_brute_force_scan() {
        let p = HashedBowProvider::new(32, 3);
        let texts: Vec<String> = (0..200)
            .map(|i| format!("document number {i} about topic {}", i % 17))
            .collect();
        let mut index = VectorIndex::new();
        for (i, t) in texts.iter().enumerate() {
            index.insert(format!("d{i:03}"), p.embed(t).unwrap());
        }
        let q = p.embed("topic 5 document").unwrap();

        // independent scan: recompute every dot product and sort the same way
        let mut expected: Vec<(String, f64)> = texts
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let id = format!("d{i:03}");
                let score = q.dot(index.vector(&id).unwrap());
                (id, score)
            })
            .collect();
        expected.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        let got = index.query(&q, 10, None, None);
        for (g, e) in got.iter().zip(expected.iter().take(10)) {
            assert_eq!(g.id, e.0);
            assert_eq!(g.score, e.1);
        }
    }

    fn sp(id: &str, score: f64, labeled: bool) -> ScoredPassage {
        ScoredPassage {
            passage: Passage {
                id: id.to_string(),
                text: format!("passage {id}"),
            },
            score,
            labeled_relevant: labeled,
        }
    }

    #[test]
    fn labeled_passage_is_relevant_despite_low_score() {
        let scored = vec![
            sp("a", 0.9, false),
            sp("b", 0.8, false),
            sp("c", 0.1, true),
            sp("d", 0.05, false),
        ];
        let ev = split_evidence("q", &scored, 2, Some(0.5));
        assert!(ev.relevant_ids().contains(&"c"));
        assert!(!ev.irrelevant_ids().contains(&"c"));
    }

    #[test]
    fn low_score_unlabeled_passage_is_irrelevant() {
        let scored = vec![sp("a", 0.9, false), sp("b", 0.8, false), sp("c", 0.1, false)];
        let ev = split_evidence("q", &scored, 2, Some(0.5));
        assert_eq!(ev.irrelevant_ids(), vec!["c"]);
    }

    #[test]
    fn relevant_wins_when_passage_qualifies_for_both() {
        // "a" is in the top-k yet scores below t_doc
        let scored = vec![sp("a", 0.2, false), sp("b", 0.1, false)];
        let ev = split_evidence("q", &scored, 1, Some(0.5));
        assert!(ev.relevant_ids().contains(&"a"));
        assert!(!ev.irrelevant_ids().contains(&"a"));
    }

    #[test]
    fn default_threshold_gives_nonempty_irrelevant_side() {
        let scored: Vec<ScoredPassage> = (0..8)
            .map(|i| sp(&format!("p{i}"), i as f64 / 10.0, false))
            .collect();
        let ev = split_evidence("q", &scored, 2, None);
        assert!(!ev.irrelevant.is_empty());
    }

    proptest! {
        #[test]
        fn evidence_sides_never_overlap(
            scores in prop::collection::vec((0.0f64..1.0, prop::bool::weighted(0.2)), 1..40),
            top_k in 0usize..10,
            t_doc in prop::option::of(0.0f64..1.0),
        ) {
            let scored: Vec<ScoredPassage> = scores
                .iter()
                .enumerate()
                .map(|(i, (s, l))| sp(&format!("p{i:02}"), *s, *l))
                .collect();
            let ev = split_evidence("q", &scored, top_k, t_doc);
            let rel: std::collections::HashSet<_> = ev.relevant_ids().into_iter().collect();
            for id in ev.irrelevant_ids() {
                prop_assert!(!rel.contains(id));
            }
        }
    }
}
