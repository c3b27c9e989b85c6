//! Synthetic corpora for the acceptance suite: a planted-oracle corpus
//! whose labels come from a hidden linear scorer, and a topical corpus with
//! injected hard negatives for the axiom-ablation check.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prefax::eval::{Candidate, RankingTask};
use prefax::scorer::{FeatureConfig, ScorerModel, TrainExample};

pub struct PlantedCorpus {
    pub train: Vec<TrainExample>,
    pub holdout: Vec<TrainExample>,
    /// One ranking task per holdout question; the target is the answer the
    /// hidden scorer ranks first.
    pub holdout_tasks: Vec<(String, Vec<(String, String)>)>, // (question, [(answer_id, answer)])
    pub hidden: ScorerModel,
}

const CONTENT_WORDS: usize = 20;
const FILLER_WORDS: usize = 8;
const SENTENCE_POOL: usize = 16;

fn content_word(i: usize) -> String {
    format!("w{i:03}")
}

fn filler_word(i: usize) -> String {
    format!("f{i:02}")
}

/// Fixed pool of sentences; answers are combinations of these, so every
/// feature the hidden scorer can weight recurs across the corpus.
fn sentence_pool(rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..SENTENCE_POOL)
        .map(|_| {
            let len = rng.gen_range(4..6);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.75) {
                        content_word(rng.gen_range(0..CONTENT_WORDS))
                    } else {
                        filler_word(rng.gen_range(0..FILLER_WORDS))
                    }
                })
                .collect();
            format!("{}.", words.join(" "))
        })
        .collect()
}

/// 200 questions x 6 answers labeled by a hidden linear scorer over the
/// same feature space the learner uses. Pairs keep a minimum hidden-score
/// gap so the ordering is resolvable; the same rule builds train and
/// holdout pairs.
pub fn planted_corpus(corpus_seed: u64) -> PlantedCorpus {
    let feature_config = FeatureConfig {
        hash_bits: 16,
        ..Default::default()
    };
    let mut hidden = ScorerModel::new(feature_config, corpus_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed ^ 0x9e3779b97f4a7c15);
    for w in hidden.weights.iter_mut() {
        *w = rng.gen::<f64>() - 0.5;
    }
    let pool = sentence_pool(&mut rng);

    let num_questions = 200;
    let holdout_from = 160;
    let answers_per_question = 6;
    let min_gap = 0.5;

    let mut train = Vec::new();
    let mut holdout = Vec::new();
    let mut holdout_tasks = Vec::new();

    for q_idx in 0..num_questions {
        let topic: Vec<String> = (0..3)
            .map(|_| content_word(rng.gen_range(0..CONTENT_WORDS)))
            .collect();
        let question = format!("question about {} details", topic.join(" "));
        let answers: Vec<(String, String, f64)> = (0..answers_per_question)
            .map(|a_idx| {
                // a contiguous window of the sentence ring, so every
                // sentence boundary recurs corpus-wide
                let start = rng.gen_range(0..pool.len());
                let picks = rng.gen_range(2..=3);
                let text = (0..picks)
                    .map(|k| pool[(start + k) % pool.len()].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let score = hidden
                    .score_text(&question, &text, None)
                    .expect("hidden scorer");
                (format!("q{q_idx}a{a_idx}"), text, score)
            })
            .collect();

        let bucket = if q_idx < holdout_from {
            &mut train
        } else {
            &mut holdout
        };
        for i in 0..answers.len() {
            for j in 0..answers.len() {
                let gap = answers[i].2 - answers[j].2;
                if gap >= min_gap {
                    bucket.push(TrainExample {
                        question_id: format!("q{q_idx}"),
                        question: question.clone(),
                        pos: answers[i].1.clone(),
                        neg: answers[j].1.clone(),
                        evidence: None,
                        margin: gap.min(2.0),
                    });
                }
            }
        }
        if q_idx >= holdout_from {
            holdout_tasks.push((
                question,
                answers
                    .iter()
                    .map(|(id, text, _)| (id.clone(), text.clone()))
                    .collect(),
            ));
        }
    }

    PlantedCorpus {
        train,
        holdout,
        holdout_tasks,
        hidden,
    }
}

/// Rank the holdout tasks with `model` and report MRR of the hidden
/// scorer's top answer.
pub fn planted_mrr(corpus: &PlantedCorpus, model: &ScorerModel) -> f64 {
    let tasks: Vec<RankingTask> = corpus
        .holdout_tasks
        .iter()
        .map(|(question, answers)| {
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (idx, (_, text)) in answers.iter().enumerate() {
                let s = corpus.hidden.score_text(question, text, None).unwrap();
                if s > best_score {
                    best_score = s;
                    best = idx;
                }
            }
            RankingTask {
                question_id: question.clone(),
                candidates: answers
                    .iter()
                    .enumerate()
                    .map(|(idx, (id, _))| Candidate {
                        id: id.clone(),
                        gain: 1.0,
                        is_top_upvoted: idx == best,
                    })
                    .collect(),
                scores: answers
                    .iter()
                    .map(|(_, text)| model.score_text(question, text, None).unwrap())
                    .collect(),
            }
        })
        .collect();
    prefax::eval::mrr(&tasks).unwrap()
}

// ---------------------------------------------------------------------------
// ablation corpus: quality-driven upvotes, topical questions, hard negatives

pub struct AblationCorpus {
    pub posts: Vec<prefax::corpus::Post>,
    /// Index of the first holdout post.
    pub holdout_from: usize,
}

const TOPIC_POOL: usize = 25;
const QUALITY_MARKERS: [&str; 3] = ["measured", "cited", "reproducible"];

pub fn ablation_corpus(seed: u64) -> AblationCorpus {
    use prefax::corpus::{AnswerRecord, Post, QuestionRecord};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upvote_ladder = [16i64, 7, 3, 1];
    let posts = (0..60)
        .map(|q_idx| {
            let mut topics: Vec<usize> = (0..TOPIC_POOL).collect();
            topics.shuffle(&mut rng);
            let topic_words: Vec<String> =
                topics.iter().take(3).map(|t| format!("t{t:02}")).collect();
            let question = QuestionRecord {
                id: format!("ab-q{q_idx:02}"),
                forum: "ablation".to_string(),
                title: format!("how to handle {} in setup {q_idx}", topic_words.join(" ")),
                body: format!("our {} workload needs guidance", topic_words.join(" and ")),
                created: None,
            };
            let answers = (0..4)
                .map(|a_idx| {
                    let quality = 3 - a_idx; // descending quality
                    let mut tokens = Vec::new();
                    for w in &topic_words {
                        tokens.push(w.clone());
                        tokens.push(w.clone());
                    }
                    for marker in QUALITY_MARKERS.iter().take(quality) {
                        tokens.push((*marker).to_string());
                        tokens.push((*marker).to_string());
                    }
                    for _ in 0..4 {
                        tokens.push(filler_word(rng.gen_range(0..FILLER_WORDS)));
                    }
                    AnswerRecord {
                        id: format!("ab-q{q_idx:02}a{a_idx}"),
                        question_id: format!("ab-q{q_idx:02}"),
                        body: format!("for this setup: {}", tokens.join(" ")),
                        upvotes: upvote_ladder[a_idx],
                        author_id: None,
                    }
                })
                .collect();
            Post { question, answers }
        })
        .collect();

    AblationCorpus {
        posts,
        holdout_from: 45,
    }
}

/// Ranking tasks for the ablation corpus holdout: each question's own
/// answers plus top answers of other questions as injected hard negatives.
pub fn ablation_tasks(
    corpus: &AblationCorpus,
    model: &ScorerModel,
    hard_negatives: usize,
) -> Vec<RankingTask> {
    let holdout = &corpus.posts[corpus.holdout_from..];
    holdout
        .iter()
        .enumerate()
        .map(|(t_idx, post)| {
            let question = post.question.full_text();
            let mut candidates = Vec::new();
            let mut scores = Vec::new();
            for (a_idx, answer) in post.answers.iter().enumerate() {
                candidates.push(Candidate {
                    id: answer.id.clone(),
                    gain: 1.0,
                    is_top_upvoted: a_idx == 0,
                });
                scores.push(model.score_text(&question, &answer.body, None).unwrap());
            }
            for k in 0..hard_negatives {
                // deterministic walk over foreign posts
                let foreign = &corpus.posts[(t_idx * 7 + k * 11 + 1) % corpus.holdout_from];
                let top = &foreign.answers[0];
                candidates.push(Candidate {
                    id: format!("hn-{}-{}", t_idx, top.id),
                    gain: 0.0,
                    is_top_upvoted: false,
                });
                scores.push(model.score_text(&question, &top.body, None).unwrap());
            }
            RankingTask {
                question_id: post.question.id.clone(),
                candidates,
                scores,
            }
        })
        .collect()
}
