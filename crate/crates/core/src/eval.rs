//! Ranking and pairwise evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::ScorerModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    /// Relevance gain for NDCG; hard negatives carry 0.
    pub gain: f64,
    /// The MRR target: the top-upvoted answer of the task's question.
    #[serde(default)]
    pub is_top_upvoted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingTask {
    pub question_id: String,
    pub candidates: Vec<Candidate>,
    pub scores: Vec<f64>,
}

/// Gain mapping for human answers: `log2(1 + max(0, upvotes))` dampens the
/// heavy tail of upvote counts while preserving their order.
pub fn upvote_gain(upvotes: i64) -> f64 {
    (1.0 + upvotes.max(0) as f64).log2()
}

/// Candidate indices in predicted order: score descending, ties broken by
/// candidate id so rankings are reproducible.
fn ranked_indices(task: &RankingTask) -> Vec<usize> {
    let mut order: Vec<usize> = (0..task.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        task.scores[b]
            .partial_cmp(&task.scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| task.candidates[a].id.cmp(&task.candidates[b].id))
    });
    order
}

/// Mean reciprocal rank of each task's designated target.
pub fn mrr(tasks: &[RankingTask]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::contract("mrr needs at least one task"));
    }
    let mut total = 0.0;
    for task in tasks {
        if task.scores.len() != task.candidates.len() {
            return Err(Error::contract("scores and candidates must align"));
        }
        let targets = task.candidates.iter().filter(|c| c.is_top_upvoted).count();
        if targets != 1 {
            return Err(Error::contract(format!(
                "task {} has {} targets, expected exactly one",
                task.question_id, targets
            )));
        }
        let order = ranked_indices(task);
        let rank = order
            .iter()
            .position(|&idx| task.candidates[idx].is_top_upvoted)
            .expect("target present")
            + 1;
        total += 1.0 / rank as f64;
    }
    Ok(total / tasks.len() as f64)
}

/// NDCG of the predicted order, `None` when no candidate has positive gain
/// (the task is skipped and counted by the caller).
pub fn ndcg(task: &RankingTask, cutoff: Option<usize>) -> Option<f64> {
    if !task.candidates.iter().any(|c| c.gain > 0.0) {
        return None;
    }
    let order = ranked_indices(task);
    let k = cutoff.unwrap_or(order.len());
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &idx)| task.candidates[idx].gain / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<f64> = task.candidates.iter().map(|c| c.gain).collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum();
    Some(dcg / idcg)
}

/// Mean NDCG over tasks with at least one positive gain; returns the mean
/// and the number of skipped (all-zero-gain) tasks.
pub fn mean_ndcg(tasks: &[RankingTask], cutoff: Option<usize>) -> (f64, usize) {
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for task in tasks {
        match ndcg(task, cutoff) {
            Some(v) => {
                total += v;
                counted += 1;
            }
            None => skipped += 1,
        }
    }
    let mean = if counted == 0 { 0.0 } else { total / counted as f64 };
    (mean, skipped)
}

/// Scores of one labeled pair: the human-preferred side first.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScoredPair {
    pub preferred: f64,
    pub other: f64,
}

/// Fraction of pairs where the preferred side scores strictly higher. Ties
/// (|delta| <= 1e-9) count as incorrect, so a constant scorer earns 0.
pub fn pairwise_accuracy(pairs: &[ScoredPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = pairs
        .iter()
        .filter(|p| p.preferred - p.other > 1e-9)
        .count();
    correct as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

/// One annotated pair: per-annotator preferred sides (a 6-point scale with
/// no tie option collapses to a side per annotator) and the model's scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub votes: Vec<Side>,
    pub score_a: f64,
    pub score_b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Fraction of majority pairs where the model scored the majority side
    /// higher.
    pub agreement: f64,
    pub agree: usize,
    pub disagree: usize,
    /// Pairs with no majority (even splits), excluded from the denominator.
    pub excluded: usize,
    pub total: usize,
}

/// Agreement with annotator majorities: a pair counts when strictly more
/// than half the annotators preferred one side.
pub fn agreement(pairs: &[AnnotatedPair]) -> AgreementReport {
    let mut agree = 0usize;
    let mut disagree = 0usize;
    let mut excluded = 0usize;
    for pair in pairs {
        let a_votes = pair.votes.iter().filter(|v| **v == Side::A).count();
        let b_votes = pair.votes.len() - a_votes;
        let majority = if a_votes * 2 > pair.votes.len() {
            Side::A
        } else if b_votes * 2 > pair.votes.len() {
            Side::B
        } else {
            excluded += 1;
            continue;
        };
        let model_prefers_a = pair.score_a - pair.score_b > 1e-9;
        let model_prefers_b = pair.score_b - pair.score_a > 1e-9;
        let matched = match majority {
            Side::A => model_prefers_a,
            Side::B => model_prefers_b,
        };
        if matched {
            agree += 1;
        } else {
            disagree += 1;
        }
    }
    let denominator = agree + disagree;
    AgreementReport {
        agreement: if denominator == 0 {
            0.0
        } else {
            agree as f64 / denominator as f64
        },
        agree,
        disagree,
        excluded,
        total: pairs.len(),
    }
}

/// Score shift from attaching evidence: `score(q, e, a) - score(q, a)`.
/// Positive for a grounded answer paired with its own evidence means the
/// model's confidence is evidence-aware.
pub fn evidence_delta(
    model: &ScorerModel,
    question: &str,
    evidence: &[String],
    answer: &str,
) -> Result<f64> {
    let with = model.score_text(question, answer, Some(evidence))?;
    let without = model.score_text(question, answer, None)?;
    Ok(with - without)
}

/// Fixed-width histogram rows `(bin_low, bin_high, count)` for score
/// distribution plots.
pub fn score_histogram(scores: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in scores {
        if !s.is_finite() {
            continue;
        }
        let idx = (((s - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub ndcg: f64,
    pub ndcg_skipped_tasks: usize,
    pub ranking_tasks: usize,
    pub pairwise_accuracy: f64,
    pub pairwise_accuracy_with_evidence: Option<f64>,
    pub evidence_delta_mean: Option<f64>,
    pub agreement: Option<AgreementReport>,
    pub per_axiom_pairs: std::collections::BTreeMap<String, usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(gains: &[f64], scores: &[f64], target: usize) -> RankingTask {
        RankingTask {
            question_id: "q".to_string(),
            candidates: gains
                .iter()
                .enumerate()
                .map(|(i, &g)| Candidate {
                    id: format!("c{i}"),
                    gain: g,
                    is_top_upvoted: i == target,
                })
                .collect(),
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn mrr_of_second_place_is_half() {
        let t = task(&[1.0, 2.0], &[0.9, 0.1], 1);
        assert_eq!(mrr(&[t]).unwrap(), 0.5);
    }

    #[test]
    fn mrr_averages_reciprocal_ranks() {
        let t1 = task(&[1.0, 1.0, 1.0, 1.0], &[0.9, 0.5, 0.4, 0.3], 0); // rank 1
        let t2 = task(&[1.0, 1.0, 1.0, 1.0], &[0.9, 0.5, 0.4, 0.3], 3); // rank 4
        assert!((mrr(&[t1, t2]).unwrap() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn mrr_perfect_ranking_is_one() {
        let tasks: Vec<RankingTask> = (0..5)
            .map(|_| task(&[1.0, 1.0], &[1.0, 0.0], 0))
            .collect();
        assert_eq!(mrr(&tasks).unwrap(), 1.0);
    }

    #[test]
    fn mrr_requires_exactly_one_target() {
        let mut t = task(&[1.0, 1.0], &[1.0, 0.0], 0);
        t.candidates[1].is_top_upvoted = true;
        assert!(matches!(mrr(&[t]), Err(Error::Contract(_))));
    }

    #[test]
    fn ndcg_matches_hand_case() {
        // predicted order has gains [0, 3]
        let t = task(&[0.0, 3.0], &[0.9, 0.1], 0);
        let v = ndcg(&t, None).unwrap();
        assert!((v - 0.630_929_753_571_457_4).abs() < 1e-12);
    }

    #[test]
    fn ndcg_of_ideal_order_is_one() {
        let t = task(&[3.0, 2.0, 1.0], &[0.9, 0.5, 0.1], 0);
        assert!((ndcg(&t, None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_gains_skip_the_task() {
        let t = task(&[0.0, 0.0], &[0.9, 0.1], 0);
        assert!(ndcg(&t, None).is_none());
        let (_, skipped) = mean_ndcg(&[t], None);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn pairwise_accuracy_counts_ties_as_errors() {
        let pairs = vec![
            ScoredPair { preferred: 1.0, other: 0.5 },
            ScoredPair { preferred: 0.2, other: 0.9 },
            ScoredPair { preferred: 0.8, other: 0.1 },
        ];
        assert!((pairwise_accuracy(&pairs) - 2.0 / 3.0).abs() < 1e-12);
        let constant = vec![ScoredPair { preferred: 0.5, other: 0.5 }; 10];
        assert_eq!(pairwise_accuracy(&constant), 0.0);
    }

    #[test]
    fn agreement_majority_and_exclusions() {
        let pairs = vec![
            // majority A, model prefers A
            AnnotatedPair { votes: vec![Side::A, Side::A, Side::B], score_a: 1.0, score_b: 0.0 },
            // even split: excluded
            AnnotatedPair { votes: vec![Side::A, Side::B], score_a: 1.0, score_b: 0.0 },
            // majority B, model prefers A
            AnnotatedPair { votes: vec![Side::B, Side::B, Side::A], score_a: 1.0, score_b: 0.0 },
        ];
        let report = agreement(&pairs);
        assert_eq!(report.agree, 1);
        assert_eq!(report.disagree, 1);
        assert_eq!(report.excluded, 1);
        assert_eq!(report.agree + report.disagree + report.excluded, report.total);
        assert!((report.agreement - 0.5).abs() < 1e-12);
    }

    #[test]
    fn random_scorer_agreement_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<AnnotatedPair> = (0..20_000)
            .map(|_| AnnotatedPair {
                votes: vec![
                    if rng.gen::<bool>() { Side::A } else { Side::B },
                    if rng.gen::<bool>() { Side::A } else { Side::B },
                    if rng.gen::<bool>() { Side::A } else { Side::B },
                ],
                score_a: rng.gen(),
                score_b: rng.gen(),
            })
            .collect();
        let report = agreement(&pairs);
        assert!(
            (report.agreement - 0.5).abs() < 0.02,
            "agreement {}",
            report.agreement
        );
    }

    #[test]
    fn evidence_delta_is_the_score_shift() {
        use crate::scorer::{featurize, FeatureConfig, ScorerModel};
        let config = FeatureConfig {
            hash_bits: 14,
            ..Default::default()
        };
        let question = "does mulch help roses";
        let answer = "wood chips block light from weeds";
        let evidence = vec!["a trial found wood chips suppress bindweed".to_string()];

        // zero weights: both forms score 0
        let zero = ScorerModel::new(config.clone(), 1);
        assert_eq!(evidence_delta(&zero, question, &evidence, answer).unwrap(), 0.0);

        // weight only a bucket introduced by the evidence namespace
        let plain = featurize(question, answer, None, &config).unwrap();
        let with = featurize(question, answer, Some(&evidence), &config).unwrap();
        let plain_idx: std::collections::HashSet<u32> =
            plain.entries.iter().map(|&(i, _)| i).collect();
        let (ev_idx, ev_val) = with
            .entries
            .iter()
            .find(|(i, _)| !plain_idx.contains(i))
            .copied()
            .expect("evidence adds features");
        let mut model = ScorerModel::new(config, 1);
        model.weights[ev_idx as usize] = 2.0;
        let delta = evidence_delta(&model, question, &evidence, answer).unwrap();
        assert!((delta - 2.0 * ev_val).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_every_finite_score() {
        let scores = vec![-1.0, 0.0, 0.5, 0.9, 2.5, f64::NAN];
        let rows = score_histogram(&scores, 4, 0.0, 1.0);
        let total: usize = rows.iter().map(|(_, _, c)| c).sum();
        assert_eq!(total, 5); // NaN dropped, out-of-range clamped to edge bins
        assert_eq!(rows.len(), 4);
    }

    proptest! {
        #[test]
        fn ndcg_stays_in_unit_interval(
            gains in prop::collection::vec(0.0f64..10.0, 1..15),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = gains.iter().map(|_| rng.gen()).collect();
            let t = task(&gains, &scores, 0);
            if let Some(v) = ndcg(&t, None) {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn mrr_is_invariant_under_monotone_score_transforms(
            n in 2usize..12,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let target = rng.gen_range(0..n);
            let gains: Vec<f64> = vec![1.0; n];
            let t1 = task(&gains, &scores, target);
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 1.7).exp()).collect();
            let t2 = task(&gains, &transformed, target);
            prop_assert_eq!(mrr(&[t1]).unwrap(), mrr(&[t2]).unwrap());
        }
    }
}
