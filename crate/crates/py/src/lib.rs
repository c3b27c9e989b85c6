//! Python bindings for the core types and operations: scoring, training,
//! margins, utilization, ranking metrics, prompt rendering, and tagged
//! parsing. Build with `cargo build -p prefax-py`, then import the cdylib
//! as `prefax_py` (see python/smoke_test.py).

// the #[pymethods] expansion trips this lint on its own conversions
#![allow(clippy::useless_conversion)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use prefax::axioms::{AnswerRef, AnswerSource, PreferencePair};
use prefax::eval::{Candidate, RankingTask};
use prefax::margin::{compute_margin, MarginMode, MarginOutcome, MarginSpec};
use prefax::scorer::{FeatureConfig, ScorerModel, TrainConfig, TrainExample};

fn py_err(err: prefax::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

/// Pointwise answer scorer over hashed text features.
#[pyclass]
struct Scorer {
    model: ScorerModel,
}

#[pymethods]
impl Scorer {
    #[new]
    #[pyo3(signature = (hash_bits=18, seed=0))]
    fn new(hash_bits: u8, seed: u64) -> PyResult<Self> {
        if hash_bits == 0 || hash_bits > 28 {
            return Err(PyValueError::new_err("hash_bits must be in 1..=28"));
        }
        let config = FeatureConfig {
            hash_bits,
            ..Default::default()
        };
        Ok(Scorer {
            model: ScorerModel::new(config, seed),
        })
    }

    /// Train on (question_id, question, positive, negative, margin) pairs.
    #[pyo3(signature = (pairs, learning_rate=0.5, warmup_steps=100, total_steps=2000, seed=0))]
    fn train(
        &mut self,
        pairs: Vec<(String, String, String, String, f64)>,
        learning_rate: f64,
        warmup_steps: usize,
        total_steps: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let examples: Vec<TrainExample> = pairs
            .into_iter()
            .map(|(question_id, question, pos, neg, margin)| TrainExample {
                question_id,
                question,
                pos,
                neg,
                evidence: None,
                margin,
            })
            .collect();
        let config = TrainConfig {
            learning_rate,
            warmup_steps,
            total_steps,
            seed,
            evidence_dropout: 0.0,
            l2: 0.0,
            parallel: false,
        };
        let (model, report) =
            prefax::scorer::train(&examples, &self.model.config, &config, None).map_err(py_err)?;
        self.model = model;
        Ok(report.segment_mean_loss)
    }

    #[pyo3(signature = (question, answer, evidence=None))]
    fn score(
        &self,
        question: &str,
        answer: &str,
        evidence: Option<Vec<String>>,
    ) -> PyResult<f64> {
        self.model
            .score_text(question, answer, evidence.as_deref())
            .map_err(py_err)
    }

    /// Hinge loss of one pair under this model.
    #[pyo3(signature = (question, pos, neg, margin, evidence=None))]
    fn pair_loss(
        &self,
        question: &str,
        pos: &str,
        neg: &str,
        margin: f64,
        evidence: Option<Vec<String>>,
    ) -> PyResult<f64> {
        let ev = evidence.as_deref();
        let fv_pos =
            prefax::scorer::featurize(question, pos, ev, &self.model.config).map_err(py_err)?;
        let fv_neg =
            prefax::scorer::featurize(question, neg, ev, &self.model.config).map_err(py_err)?;
        prefax::scorer::pair_loss(&self.model, &fv_pos, &fv_neg, margin).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Scorer {
            model: ScorerModel::load(&path).map_err(py_err)?,
        })
    }
}

/// N-gram utilization of two constituents by a combined text, in [0, 2].
#[pyfunction]
#[pyo3(signature = (combined, a, b, ngram_n=2))]
fn utilization(combined: &str, a: &str, b: &str, ngram_n: usize) -> PyResult<f64> {
    prefax::axioms::utilization(combined, a, b, ngram_n).map_err(py_err)
}

fn human_pair(pos_votes: i64, neg_votes: i64) -> PreferencePair {
    let mk = |v: i64| AnswerRef {
        source: AnswerSource::Human,
        text: String::new(),
        upvotes: Some(v),
        generation_meta: BTreeMap::new(),
    };
    PreferencePair {
        question_id: String::new(),
        axiom: 0,
        pos: mk(pos_votes),
        neg: mk(neg_votes),
        evidence: None,
        margin: None,
        provenance: BTreeMap::new(),
        eval_only: false,
    }
}

/// log10 upvote-ratio margin, clamped to [0, 2].
#[pyfunction]
fn upvote_margin(pos_votes: i64, neg_votes: i64) -> PyResult<f64> {
    match compute_margin(&human_pair(pos_votes, neg_votes), &MarginSpec::default(), None)
        .map_err(py_err)?
    {
        MarginOutcome::Accept(m) => Ok(m),
        MarginOutcome::Reject { .. } => unreachable!("upvote margins never reject"),
    }
}

/// AI-feedback margin from 1-100 critique scores; None when the gap is
/// below the trust threshold.
#[pyfunction]
fn ai_feedback_margin(score_pos: i64, score_neg: i64) -> PyResult<Option<f64>> {
    let scores = prefax::gateway::CritiqueScores {
        score_a: score_pos,
        score_b: score_neg,
        critique_a: String::new(),
        critique_b: String::new(),
    };
    let spec = MarginSpec::with_mode(MarginMode::AiFeedback);
    let mut pair = human_pair(1, 1);
    pair.pos.source = AnswerSource::LlmOpenBook;
    pair.pos.upvotes = None;
    pair.neg.source = AnswerSource::LlmClosedBook;
    pair.neg.upvotes = None;
    match compute_margin(&pair, &spec, Some(&scores)).map_err(py_err)? {
        MarginOutcome::Accept(m) => Ok(Some(m)),
        MarginOutcome::Reject { .. } => Ok(None),
    }
}

fn build_tasks(tasks: Vec<(Vec<f64>, Vec<f64>, usize)>) -> PyResult<Vec<RankingTask>> {
    tasks
        .into_iter()
        .enumerate()
        .map(|(t, (scores, gains, target))| {
            if scores.len() != gains.len() || target >= scores.len() {
                return Err(PyValueError::new_err(
                    "scores and gains must align and target must be in range",
                ));
            }
            Ok(RankingTask {
                question_id: format!("task{t}"),
                candidates: gains
                    .into_iter()
                    .enumerate()
                    .map(|(i, gain)| Candidate {
                        id: format!("t{t}c{i:04}"),
                        gain,
                        is_top_upvoted: i == target,
                    })
                    .collect(),
                scores,
            })
        })
        .collect()
}

/// Mean reciprocal rank over (scores, gains, target_index) tasks.
#[pyfunction]
fn mrr(tasks: Vec<(Vec<f64>, Vec<f64>, usize)>) -> PyResult<f64> {
    prefax::eval::mrr(&build_tasks(tasks)?).map_err(py_err)
}

/// Mean NDCG over (scores, gains, target_index) tasks; all-zero-gain tasks
/// are skipped.
#[pyfunction]
#[pyo3(signature = (tasks, cutoff=None))]
fn ndcg(tasks: Vec<(Vec<f64>, Vec<f64>, usize)>, cutoff: Option<usize>) -> PyResult<f64> {
    let (mean, _skipped) = prefax::eval::mean_ndcg(&build_tasks(tasks)?, cutoff);
    Ok(mean)
}

/// Render one of the shipped prompt templates.
#[pyfunction]
fn render_prompt(template: &str, bindings: BTreeMap<String, String>) -> PyResult<String> {
    use prefax::gateway::TemplateId;
    let id = match template {
        "grounded_answer" => TemplateId::GroundedAnswer,
        "closed_book" => TemplateId::ClosedBook,
        "corrupt_claims" => TemplateId::CorruptClaims,
        "irrelevant_grounding" => TemplateId::IrrelevantGrounding,
        "combine_answers" => TemplateId::CombineAnswers,
        "critique_then_score" => TemplateId::CritiqueThenScore,
        other => return Err(PyValueError::new_err(format!("unknown template: {other}"))),
    };
    prefax::gateway::render_prompt(id, &bindings).map_err(py_err)
}

/// Contents of each well-formed `<tag>...</tag>` span.
#[pyfunction]
fn parse_tagged(text: &str, tag: &str) -> PyResult<Vec<String>> {
    prefax::gateway::parse_tagged(text, tag).map_err(py_err)
}

/// (score_a, score_b, critique_a, critique_b) from a critique-then-score
/// response.
#[pyfunction]
fn parse_critique_scores(text: &str) -> PyResult<(i64, i64, String, String)> {
    let (scores, _warnings) = prefax::gateway::parse_critique_scores(text).map_err(py_err)?;
    Ok((
        scores.score_a,
        scores.score_b,
        scores.critique_a,
        scores.critique_b,
    ))
}

/// HTML to plain text: tags stripped, code kept, entities decoded.
#[pyfunction]
fn strip_html(html: &str) -> String {
    prefax::text::strip_html(html)
}

#[pymodule]
fn prefax_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scorer>()?;
    m.add_function(wrap_pyfunction!(utilization, m)?)?;
    m.add_function(wrap_pyfunction!(upvote_margin, m)?)?;
    m.add_function(wrap_pyfunction!(ai_feedback_margin, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_tagged, m)?)?;
    m.add_function(wrap_pyfunction!(parse_critique_scores, m)?)?;
    m.add_function(wrap_pyfunction!(strip_html, m)?)?;
    Ok(())
}
