//! Preference-pair construction.
//!
//! Each axiom turns one principle into pairs where the positive side is
//! preferred by construction: upvote gaps (axiom 0), hard negatives from
//! related questions (1), open- vs closed-book generation (2), corrupted
//! claims (3), relevant vs irrelevant grounding plus passage contrasts (4),
//! and combined top answers gated by the n-gram utilization score (5).
//! A per-type validation gate drops pair types humans did not actually
//! prefer often enough.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerRecord, Post, QuestionRecord};
use crate::embed::{EvidenceSet, Passage};
use crate::error::{Error, Result};
use crate::gateway::{parse_tagged, Gateway, TemplateId};
use crate::text::{derive_seed, ngram_set};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Human,
    LlmClosedBook,
    LlmOpenBook,
    LlmCorrupted,
    LlmIrrelevantGrounding,
    LlmCombined,
    Passage,
}

impl AnswerSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerSource::Human => "human",
            AnswerSource::LlmClosedBook => "llm_closed_book",
            AnswerSource::LlmOpenBook => "llm_open_book",
            AnswerSource::LlmCorrupted => "llm_corrupted",
            AnswerSource::LlmIrrelevantGrounding => "llm_irrelevant_grounding",
            AnswerSource::LlmCombined => "llm_combined",
            AnswerSource::Passage => "passage",
        }
    }
}

impl FromStr for AnswerSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(AnswerSource::Human),
            "llm_closed_book" => Ok(AnswerSource::LlmClosedBook),
            "llm_open_book" => Ok(AnswerSource::LlmOpenBook),
            "llm_corrupted" => Ok(AnswerSource::LlmCorrupted),
            "llm_irrelevant_grounding" => Ok(AnswerSource::LlmIrrelevantGrounding),
            "llm_combined" => Ok(AnswerSource::LlmCombined),
            "passage" => Ok(AnswerSource::Passage),
            other => Err(Error::config(format!("unknown answer source: {other}"))),
        }
    }
}

/// One side of a preference pair. Upvotes are present exactly for human
/// answers; generated answers carry their provenance in `generation_meta`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnswerRef {
    pub source: AnswerSource,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upvotes: Option<i64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub generation_meta: BTreeMap<String, String>,
}

impl AnswerRef {
    pub fn human(answer: &AnswerRecord) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("answer_id".to_string(), answer.id.clone());
        AnswerRef {
            source: AnswerSource::Human,
            text: answer.body.clone(),
            upvotes: Some(answer.upvotes),
            generation_meta: meta,
        }
    }

    pub fn generated(source: AnswerSource, text: String, meta: BTreeMap<String, String>) -> Self {
        debug_assert!(source != AnswerSource::Human);
        AnswerRef {
            source,
            text,
            upvotes: None,
            generation_meta: meta,
        }
    }

    pub fn passage(p: &Passage) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("passage_id".to_string(), p.id.clone());
        AnswerRef {
            source: AnswerSource::Passage,
            text: p.text.clone(),
            upvotes: None,
            generation_meta: meta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreferencePair {
    pub question_id: String,
    pub axiom: u8,
    pub pos: AnswerRef,
    pub neg: AnswerRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<Passage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub eval_only: bool,
}

impl PreferencePair {
    pub fn type_key(&self) -> PairTypeKey {
        PairTypeKey {
            axiom: self.axiom,
            pos: self.pos.source,
            neg: self.neg.source,
        }
    }
}

/// The granularity the validation gate operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairTypeKey {
    pub axiom: u8,
    pub pos: AnswerSource,
    pub neg: AnswerSource,
}

impl fmt::Display for PairTypeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}>{}",
            self.axiom,
            self.pos.as_str(),
            self.neg.as_str()
        )
    }
}

impl FromStr for PairTypeKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (axiom, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("bad pair type key: {s}")))?;
        let (pos, neg) = rest
            .split_once('>')
            .ok_or_else(|| Error::config(format!("bad pair type key: {s}")))?;
        Ok(PairTypeKey {
            axiom: axiom
                .parse()
                .map_err(|_| Error::config(format!("bad axiom in pair type key: {s}")))?,
            pos: pos.parse()?,
            neg: neg.parse()?,
        })
    }
}

/// Per-pair upvote gap applied on top of the post-level filter; `None`
/// requires only a strict upvote ordering.
#[derive(Debug, Clone, Copy)]
pub struct GapRule {
    pub per_pair_ratio: Option<f64>,
}

impl Default for GapRule {
    fn default() -> Self {
        GapRule {
            per_pair_ratio: Some(1.3),
        }
    }
}

impl GapRule {
    fn admits(&self, hi: i64, lo: i64) -> bool {
        if hi <= 0 || hi <= lo {
            return false;
        }
        if lo <= 0 {
            return true;
        }
        match self.per_pair_ratio {
            Some(ratio) => hi as f64 >= ratio * lo.max(1) as f64,
            None => true,
        }
    }
}

/// Axiom 0 (usefulness): one pair per ordered answer pair whose upvote gap
/// qualifies. The positive always has strictly more upvotes.
pub fn axiom0_pairs(post: &Post, gap: &GapRule) -> Vec<PreferencePair> {
    let ranked = post.answers_by_upvotes();
    let mut pairs = Vec::new();
    for (i, hi) in ranked.iter().enumerate() {
        for lo in ranked.iter().skip(i + 1) {
            if !gap.admits(hi.upvotes, lo.upvotes) {
                continue;
            }
            pairs.push(PreferencePair {
                question_id: post.question.id.clone(),
                axiom: 0,
                pos: AnswerRef::human(hi),
                neg: AnswerRef::human(lo),
                evidence: None,
                margin: None,
                provenance: BTreeMap::new(),
                eval_only: false,
            });
        }
    }
    pairs
}

/// Draw `count` items without replacement with probability proportional to
/// `weight`. Candidate order matters for determinism; callers sort first.
pub(crate) fn weighted_sample_without_replacement<T: Clone>(
    candidates: &[(T, f64)],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<T> {
    let mut pool: Vec<(T, f64)> = candidates.to_vec();
    let mut picked = Vec::new();
    while picked.len() < count && !pool.is_empty() {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut draw = rng.gen::<f64>() * total;
        let mut chosen = pool.len() - 1;
        for (idx, (_, w)) in pool.iter().enumerate() {
            draw -= w;
            if draw <= 0.0 {
                chosen = idx;
                break;
            }
        }
        picked.push(pool.remove(chosen).0);
    }
    picked
}

/// Axiom 1 (relevance): sample `n` hard-negative answers from related
/// questions, proportionally to `max(upvotes, 1)`, and pair each one under
/// every positively-upvoted answer of the post.
pub fn axiom1_negatives(
    post: &Post,
    related: &[(QuestionRecord, Vec<AnswerRecord>)],
    n: usize,
    seed: u64,
) -> Vec<PreferencePair> {
    let mut candidates: Vec<(&AnswerRecord, &QuestionRecord)> = related
        .iter()
        .flat_map(|(q, answers)| answers.iter().map(move |a| (a, q)))
        .collect();
    candidates.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let weighted: Vec<((usize, &AnswerRecord, &QuestionRecord), f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, (a, q))| ((i, *a, *q), a.upvotes.max(1) as f64))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &post.question.id));
    let mut sampled = weighted_sample_without_replacement(&weighted, n, &mut rng);
    sampled.sort_by_key(|(i, _, _)| *i);
    let shortfall = sampled.len() < n;

    let mut positives: Vec<&AnswerRecord> = post.answers.iter().filter(|a| a.upvotes > 0).collect();
    positives.sort_by(|a, b| b.upvotes.cmp(&a.upvotes).then_with(|| a.id.cmp(&b.id)));

    let mut pairs = Vec::new();
    for pos in &positives {
        for (_, neg, neg_question) in &sampled {
            let mut provenance = BTreeMap::new();
            provenance.insert("negative_question".to_string(), neg_question.id.clone());
            if shortfall {
                provenance.insert("candidate_shortfall".to_string(), "true".to_string());
            }
            pairs.push(PreferencePair {
                question_id: post.question.id.clone(),
                axiom: 1,
                pos: AnswerRef::human(pos),
                neg: AnswerRef::human(neg),
                evidence: None,
                margin: None,
                provenance,
                eval_only: false,
            });
        }
    }
    pairs
}

pub(crate) fn render_passages(passages: &[Passage]) -> String {
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("Passage {}: {}", i + 1, p.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn joined_ids(passages: &[Passage]) -> String {
    passages
        .iter()
        .map(|p| p.id.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn generated_answer(
    gw: &Gateway,
    source: AnswerSource,
    template: TemplateId,
    binds: &BTreeMap<String, String>,
    evidence_ids: Option<String>,
) -> Result<AnswerRef> {
    let result = gw.generate(template, binds)?;
    let text = result.truncated.trim().to_string();
    if text.is_empty() {
        return Err(Error::skipped(format!("{template:?} produced empty text")));
    }
    let mut meta = result.provider_meta;
    if let Some(ids) = evidence_ids {
        meta.insert("evidence_ids".to_string(), ids);
    }
    Ok(AnswerRef::generated(source, text, meta))
}

pub fn open_book_answer(
    question_text: &str,
    evidence: &[Passage],
    gw: &Gateway,
) -> Result<AnswerRef> {
    generated_answer(
        gw,
        AnswerSource::LlmOpenBook,
        TemplateId::GroundedAnswer,
        &bindings(&[
            ("Question", question_text),
            ("EvidencePassages", &render_passages(evidence)),
        ]),
        Some(joined_ids(evidence)),
    )
}

pub fn closed_book_answer(question_text: &str, gw: &Gateway) -> Result<AnswerRef> {
    generated_answer(
        gw,
        AnswerSource::LlmClosedBook,
        TemplateId::ClosedBook,
        &bindings(&[("Question", question_text)]),
        None,
    )
}

/// Axiom 2 (groundedness): the open-book generation over relevant evidence
/// is preferred to the closed-book one.
pub fn axiom2_pair(
    question: &QuestionRecord,
    evidence: &EvidenceSet,
    gw: &Gateway,
) -> Result<PreferencePair> {
    if evidence.relevant.is_empty() {
        return Err(Error::skipped("no relevant evidence"));
    }
    let qtext = question.full_text();
    let open = open_book_answer(&qtext, &evidence.relevant, gw)?;
    let closed = closed_book_answer(&qtext, gw)?;
    Ok(PreferencePair {
        question_id: question.id.clone(),
        axiom: 2,
        pos: open,
        neg: closed,
        evidence: Some(evidence.relevant.clone()),
        margin: None,
        provenance: BTreeMap::new(),
        eval_only: false,
    })
}

/// Axiom 3 (truthfulness): corrupt the open-book answer's claims and prefer
/// both the closed-book and open-book answers over the corrupted rewrite.
pub fn axiom3_pairs(
    question: &QuestionRecord,
    open_book: &AnswerRef,
    closed_book: &AnswerRef,
    evidence_text: &str,
    gw: &Gateway,
) -> Result<Vec<PreferencePair>> {
    if open_book.source != AnswerSource::LlmOpenBook {
        return Err(Error::contract("axiom 3 corrupts an open-book answer"));
    }
    let result = gw.generate(
        TemplateId::CorruptClaims,
        &bindings(&[
            ("Question", &question.full_text()),
            ("EvidencePassages", evidence_text),
            ("Answer", &open_book.text),
        ]),
    )?;
    let text = &result.truncated;
    let claims = parse_tagged(text, "Claim")?;
    if claims.iter().all(String::is_empty) {
        return Err(Error::skipped("blank claims: nothing to corrupt"));
    }
    let corrupted_claims = parse_tagged(text, "CorruptedClaim")?;
    let corrupted_answers = parse_tagged(text, "CorruptedAnswer")?;
    let corrupted_text = corrupted_answers
        .into_iter()
        .find(|a| !a.is_empty())
        .ok_or_else(|| Error::Parse {
            message: "missing <CorruptedAnswer>".to_string(),
            offset: None,
        })?;
    if corrupted_text == open_book.text {
        return Err(Error::skipped("corruption left the answer unchanged"));
    }

    let mut meta = result.provider_meta.clone();
    meta.insert("claims".to_string(), claims.len().to_string());
    meta.insert(
        "corrupted_claims".to_string(),
        corrupted_claims.len().to_string(),
    );
    let corrupted = AnswerRef::generated(AnswerSource::LlmCorrupted, corrupted_text, meta);

    let pair = |pos: &AnswerRef| PreferencePair {
        question_id: question.id.clone(),
        axiom: 3,
        pos: pos.clone(),
        neg: corrupted.clone(),
        evidence: None,
        margin: None,
        provenance: BTreeMap::new(),
        eval_only: false,
    };
    Ok(vec![pair(closed_book), pair(open_book)])
}

/// Number of passages sampled from each evidence side for the auxiliary
/// contrast pairs.
pub const AXIOM4_SAMPLES_PER_SIDE: usize = 2;

/// Axiom 4 (relevant vs irrelevant grounding): the answer grounded in
/// relevant evidence beats the answer constrained to irrelevant evidence,
/// plus passage-level contrasts that distill relevance directly.
pub fn axiom4_pairs(
    question: &QuestionRecord,
    evidence: &EvidenceSet,
    gw: &Gateway,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if evidence.relevant.len() < AXIOM4_SAMPLES_PER_SIDE
        || evidence.irrelevant.len() < AXIOM4_SAMPLES_PER_SIDE
    {
        return Err(Error::skipped(format!(
            "need at least {AXIOM4_SAMPLES_PER_SIDE} passages per side, got {}+/{}-",
            evidence.relevant.len(),
            evidence.irrelevant.len()
        )));
    }
    let qtext = question.full_text();
    let grounded = open_book_answer(&qtext, &evidence.relevant, gw)?;
    let misgrounded = generated_answer(
        gw,
        AnswerSource::LlmIrrelevantGrounding,
        TemplateId::IrrelevantGrounding,
        &bindings(&[
            ("Question", &qtext),
            ("EvidencePassages", &render_passages(&evidence.irrelevant)),
        ]),
        Some(joined_ids(&evidence.irrelevant)),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &question.id));
    let sample = |side: &[Passage], rng: &mut ChaCha8Rng| -> Vec<Passage> {
        let weighted: Vec<(Passage, f64)> = side.iter().map(|p| (p.clone(), 1.0)).collect();
        let mut picked =
            weighted_sample_without_replacement(&weighted, AXIOM4_SAMPLES_PER_SIDE, rng);
        picked.sort_by(|a, b| a.id.cmp(&b.id));
        picked
    };
    let sampled_pos = sample(&evidence.relevant, &mut rng);
    let sampled_neg = sample(&evidence.irrelevant, &mut rng);

    Ok(build_axiom4_pairs(
        question,
        evidence,
        grounded,
        misgrounded,
        &sampled_pos,
        &sampled_neg,
    ))
}

/// 1 + |sampled e-| + |sampled e+| * |sampled e-| pairs over the sampled
/// passage sets. Split out so the pair-count law is testable for any counts.
pub(crate) fn build_axiom4_pairs(
    question: &QuestionRecord,
    evidence: &EvidenceSet,
    grounded: AnswerRef,
    misgrounded: AnswerRef,
    sampled_pos: &[Passage],
    sampled_neg: &[Passage],
) -> Vec<PreferencePair> {
    let make = |pos: AnswerRef, neg: AnswerRef, with_evidence: bool| PreferencePair {
        question_id: question.id.clone(),
        axiom: 4,
        pos,
        neg,
        evidence: with_evidence.then(|| evidence.relevant.clone()),
        margin: None,
        provenance: BTreeMap::new(),
        eval_only: false,
    };

    let mut pairs = Vec::new();
    pairs.push(make(grounded.clone(), misgrounded, true));
    for neg in sampled_neg {
        pairs.push(make(grounded.clone(), AnswerRef::passage(neg), true));
    }
    for pos in sampled_pos {
        for neg in sampled_neg {
            pairs.push(make(AnswerRef::passage(pos), AnswerRef::passage(neg), false));
        }
    }
    pairs
}

/// N-gram utilization of the two constituent answers by the combined one:
/// `|C∩A|/|A| + |C∩B|/|B|`, in [0, 2]. Near 0 the combination ignored its
/// inputs; near 2 it concatenated them.
pub fn utilization(combined: &str, a: &str, b: &str, ngram_n: usize) -> Result<f64> {
    let set_a = ngram_set(a, ngram_n);
    let set_b = ngram_set(b, ngram_n);
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::contract(format!(
            "utilization needs at least one {ngram_n}-gram per constituent"
        )));
    }
    let set_c = ngram_set(combined, ngram_n);
    let overlap_a = set_a.intersection(&set_c).count() as f64 / set_a.len() as f64;
    let overlap_b = set_b.intersection(&set_c).count() as f64 / set_b.len() as f64;
    Ok(overlap_a + overlap_b)
}

#[derive(Debug, Clone, Copy)]
pub struct UtilizationBounds {
    pub low: f64,
    pub high: f64,
}

impl Default for UtilizationBounds {
    fn default() -> Self {
        UtilizationBounds {
            low: 0.35,
            high: 1.85,
        }
    }
}

impl UtilizationBounds {
    pub fn accepts(&self, score: f64) -> bool {
        self.low < score && score < self.high
    }
}

/// Axiom 5 (thoroughness): combine the top two answers; if the combination
/// genuinely uses both (utilization inside the accepted band), prefer it to
/// every strictly lower-upvoted answer. Pairs against the two constituents
/// are emitted for evaluation only.
pub fn axiom5_pairs(
    post: &Post,
    gw: &Gateway,
    ngram_n: usize,
    accepted: UtilizationBounds,
) -> Result<Vec<PreferencePair>> {
    let ranked = post.answers_by_upvotes();
    if ranked.len() < 3 {
        return Err(Error::skipped("need at least three answers"));
    }
    let (first, second) = (ranked[0], ranked[1]);
    if first.upvotes == second.upvotes {
        return Err(Error::skipped("top two answers tie on upvotes"));
    }

    let result = gw.generate(
        TemplateId::CombineAnswers,
        &bindings(&[
            ("Question", &post.question.full_text()),
            ("AnswerA", &first.body),
            ("AnswerB", &second.body),
        ]),
    )?;
    let combined_text = result.truncated.trim().to_string();
    if combined_text.is_empty() {
        return Err(Error::skipped("combine produced empty text"));
    }
    let score = utilization(&combined_text, &first.body, &second.body, ngram_n)?;
    if !accepted.accepts(score) {
        return Err(Error::skipped(format!(
            "utilization {score:.4} outside ({}, {})",
            accepted.low, accepted.high
        )));
    }

    let mut meta = result.provider_meta;
    meta.insert("utilization".to_string(), format!("{score:.6}"));
    meta.insert("combined_from".to_string(), format!("{},{}", first.id, second.id));
    let combined = AnswerRef::generated(AnswerSource::LlmCombined, combined_text, meta);

    let floor = first.upvotes.min(second.upvotes);
    let make = |neg: &AnswerRecord, eval_only: bool| PreferencePair {
        question_id: post.question.id.clone(),
        axiom: 5,
        pos: combined.clone(),
        neg: AnswerRef::human(neg),
        evidence: None,
        margin: None,
        provenance: BTreeMap::new(),
        eval_only,
    };

    let mut pairs: Vec<PreferencePair> = ranked
        .iter()
        .skip(2)
        .filter(|a| a.upvotes < floor)
        .map(|a| make(a, false))
        .collect();
    pairs.push(make(first, true));
    pairs.push(make(second, true));
    Ok(pairs)
}

#[derive(Debug, Clone)]
pub struct ValidationOutcome {
    pub kept: Vec<PreferencePair>,
    pub dropped_types: Vec<(PairTypeKey, f64)>,
    pub unjudged_types: Vec<PairTypeKey>,
}

/// Drop every pair whose (axiom, pos source, neg source) type humans
/// preferred less often than `threshold`. Types without a judgment are kept
/// and reported so the caller can warn.
pub fn validate_pair_types(
    pairs: Vec<PreferencePair>,
    judgments: &BTreeMap<PairTypeKey, f64>,
    threshold: f64,
) -> ValidationOutcome {
    let mut dropped_types = BTreeMap::new();
    let mut unjudged_types = std::collections::BTreeSet::new();
    let kept = pairs
        .into_iter()
        .filter(|pair| {
            let key = pair.type_key();
            match judgments.get(&key) {
                Some(&fraction) if fraction < threshold => {
                    dropped_types.insert(key, fraction);
                    false
                }
                Some(_) => true,
                None => {
                    unjudged_types.insert(key);
                    true
                }
            }
        })
        .collect();
    ValidationOutcome {
        kept,
        dropped_types: dropped_types.into_iter().collect(),
        unjudged_types: unjudged_types.into_iter().collect(),
    }
}
