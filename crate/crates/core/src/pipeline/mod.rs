//! Stage orchestration: each stage reads upstream artifacts, writes its own
//! outputs plus a manifest, and never mutates upstream files. Reruns with
//! unchanged inputs and seed produce byte-identical artifacts.

pub mod config;
pub mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::axioms::{
    self, AnswerSource, GapRule, PairTypeKey, PreferencePair, UtilizationBounds,
};
use crate::corpus::{filter_posts, parse_archive, subsample_by_forum, ArchiveFormat, Corpus, Post};
use crate::embed::{
    related_questions, split_evidence, EmbeddingProvider, HashedBowProvider, HttpEmbeddingProvider,
    NeighborResult, Passage, ScoredPassage, VectorIndex,
};
use crate::error::{Error, Result};
use crate::eval::{
    agreement, mean_ndcg, mrr, pairwise_accuracy, score_histogram, upvote_gain, AnnotatedPair,
    Candidate, EvalReport, RankingTask, ScoredPair, Side,
};
use crate::gateway::{
    parse_critique_scores, FixtureProvider, Gateway, GenParams, HttpChatProvider,
    RecordingProvider, SyntheticProvider, TemplateId, TextProvider, TokenBucket,
};
use crate::margin::{compute_margin, MarginMode, MarginOutcome};
use crate::scorer::{train, FeatureConfig, ScorerModel, TrainConfig, TrainExample, TrainReport};
use crate::text::fnv1a64;

pub use config::{load_config, PipelineConfig};
pub use manifest::{stamp, FileStamp, StageManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Index,
    MineRelated,
    GenAxioms,
    Margins,
    Validate,
    Train,
    Eval,
    Report,
}

pub const STAGE_ORDER: [Stage; 9] = [
    Stage::Ingest,
    Stage::Index,
    Stage::MineRelated,
    Stage::GenAxioms,
    Stage::Margins,
    Stage::Validate,
    Stage::Train,
    Stage::Eval,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Index => "index",
            Stage::MineRelated => "mine-related",
            Stage::GenAxioms => "gen-axioms",
            Stage::Margins => "margins",
            Stage::Validate => "validate",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ingest" => Ok(Stage::Ingest),
            "index" => Ok(Stage::Index),
            "mine-related" => Ok(Stage::MineRelated),
            "gen-axioms" => Ok(Stage::GenAxioms),
            "margins" => Ok(Stage::Margins),
            "validate" => Ok(Stage::Validate),
            "train" => Ok(Stage::Train),
            "eval" => Ok(Stage::Eval),
            "report" => Ok(Stage::Report),
            other => Err(Error::config(format!("unknown stage: {other}"))),
        }
    }
}

// artifact file names
const CORPUS: &str = "corpus.jsonl";
const QUESTION_EMBEDDINGS: &str = "question_embeddings.jsonl";
const PASSAGE_POOL: &str = "passages.jsonl";
const RELATED: &str = "related.jsonl";
const EVIDENCE: &str = "evidence.jsonl";
const PAIRS: &str = "pairs.jsonl";
const PAIRS_MARGINED: &str = "pairs_margined.jsonl";
const PAIRS_VALIDATED: &str = "pairs_validated.jsonl";
const MODEL: &str = "model.ckpt";
const TRAIN_REPORT: &str = "train_report.json";
const HOLDOUT_PAIRS: &str = "holdout_pairs.jsonl";
const EVAL_REPORT: &str = "eval_report.json";
const RANKING_TASKS: &str = "ranking_tasks.jsonl";
const HISTOGRAMS: &str = "score_histograms.csv";
const REPORT_TEXT: &str = "report.txt";
const REPORT_JSON: &str = "report.json";

fn producer_of(artifact: &str) -> &'static str {
    match artifact {
        CORPUS => "ingest",
        QUESTION_EMBEDDINGS | PASSAGE_POOL => "index",
        RELATED | EVIDENCE => "mine-related",
        PAIRS => "gen-axioms",
        PAIRS_MARGINED => "margins",
        PAIRS_VALIDATED => "validate",
        MODEL | TRAIN_REPORT | HOLDOUT_PAIRS => "train",
        EVAL_REPORT | RANKING_TASKS | HISTOGRAMS => "eval",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub stage: &'static str,
    pub cached: bool,
    pub counts: BTreeMap<String, u64>,
    pub notes: Vec<String>,
}

struct StageRun {
    inputs: Vec<FileStamp>,
    outputs: Vec<PathBuf>,
    counts: BTreeMap<String, u64>,
    notes: Vec<String>,
}

impl StageRun {
    fn new() -> Self {
        StageRun {
            inputs: Vec::new(),
            outputs: Vec::new(),
            counts: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn count(&mut self, key: &str, value: u64) {
        self.counts.insert(key.to_string(), value);
    }

    fn bump(&mut self, key: &str) {
        *self.counts.entry(key.to_string()).or_insert(0) += 1;
    }
}

/// Run one stage. With `force` false, a stage whose manifest still matches
/// every input and output hash is skipped.
pub fn run_stage(stage: Stage, config: &PipelineConfig, force: bool) -> Result<StageSummary> {
    std::fs::create_dir_all(&config.paths.work_dir)?;
    let started = Instant::now();

    let input_paths = stage_inputs(stage, config);
    for path in &input_paths {
        if !path.exists() {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default();
            return Err(Error::Upstream {
                path: path.display().to_string(),
                producer: producer_of(&name).to_string(),
            });
        }
    }

    let manifest_path = config.manifest_path(stage.name());
    if !force && manifest_path.exists() {
        if let Ok(previous) = StageManifest::read(&manifest_path) {
            if previous.seed == config.seed && previous.still_fresh() {
                return Ok(StageSummary {
                    stage: stage.name(),
                    cached: true,
                    counts: previous.counts,
                    notes: previous.notes,
                });
            }
        }
    }

    let mut run = StageRun::new();
    for path in &input_paths {
        run.inputs.push(stamp(path)?);
    }

    let body = match stage {
        Stage::Ingest => stage_ingest(config, &mut run),
        Stage::Index => stage_index(config, &mut run),
        Stage::MineRelated => stage_mine_related(config, &mut run),
        Stage::GenAxioms => stage_gen_axioms(config, &mut run),
        Stage::Margins => stage_margins(config, &mut run),
        Stage::Validate => stage_validate(config, &mut run),
        Stage::Train => stage_train(config, &mut run),
        Stage::Eval => stage_eval(config, &mut run),
        Stage::Report => stage_report(config, &mut run),
    };

    if let Err(err) = body {
        // provider failures leave a partial-progress manifest behind
        if matches!(err, Error::Transport { .. } | Error::FixtureMiss { .. }) {
            run.notes.push(format!("aborted: {err}"));
            let manifest = StageManifest {
                stage: stage.name().to_string(),
                seed: config.seed,
                inputs: run.inputs.clone(),
                outputs: Vec::new(),
                counts: run.counts.clone(),
                notes: run.notes.clone(),
                duration_ms: started.elapsed().as_millis(),
                partial: true,
            };
            manifest.write(&manifest_path)?;
        }
        return Err(err);
    }

    let mut outputs = Vec::new();
    for path in &run.outputs {
        outputs.push(stamp(path)?);
    }
    let manifest = StageManifest {
        stage: stage.name().to_string(),
        seed: config.seed,
        inputs: run.inputs,
        outputs,
        counts: run.counts.clone(),
        notes: run.notes.clone(),
        duration_ms: started.elapsed().as_millis(),
        partial: false,
    };
    manifest.write(&manifest_path)?;

    Ok(StageSummary {
        stage: stage.name(),
        cached: false,
        counts: run.counts,
        notes: run.notes,
    })
}

/// Run every stage in dependency order.
pub fn run_all(config: &PipelineConfig, force: bool) -> Result<Vec<StageSummary>> {
    STAGE_ORDER
        .iter()
        .map(|&stage| run_stage(stage, config, force))
        .collect()
}

fn stage_inputs(stage: Stage, config: &PipelineConfig) -> Vec<PathBuf> {
    let a = |name: &str| config.artifact(name);
    match stage {
        Stage::Ingest => vec![config.paths.archive.clone()],
        Stage::Index => vec![a(CORPUS)],
        Stage::MineRelated => {
            let mut inputs = vec![a(CORPUS), a(QUESTION_EMBEDDINGS)];
            match &config.paths.passages {
                Some(path) => inputs.push(path.clone()),
                None => inputs.push(a(PASSAGE_POOL)),
            }
            inputs
        }
        Stage::GenAxioms => vec![a(CORPUS), a(RELATED), a(EVIDENCE)],
        Stage::Margins => vec![a(PAIRS), a(CORPUS)],
        Stage::Validate => {
            let mut inputs = vec![a(PAIRS_MARGINED)];
            if let Some(path) = &config.paths.judgments {
                inputs.push(path.clone());
            }
            inputs
        }
        Stage::Train => vec![a(PAIRS_VALIDATED), a(CORPUS)],
        Stage::Eval => vec![
            a(MODEL),
            a(HOLDOUT_PAIRS),
            a(CORPUS),
            a(RELATED),
            a(PAIRS_VALIDATED),
        ],
        Stage::Report => vec![a(EVAL_REPORT), a(TRAIN_REPORT)],
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut file, item).map_err(|e| Error::Parse {
            message: e.to_string(),
            offset: None,
        })?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut items = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            message: format!("{} line {}: {e}", path.display(), lineno + 1),
            offset: Some(lineno),
        })?);
    }
    Ok(items)
}

fn read_corpus(config: &PipelineConfig) -> Result<Corpus> {
    let file = std::fs::File::open(config.artifact(CORPUS))?;
    Corpus::read_jsonl(std::io::BufReader::new(file))
}

fn build_embedder(config: &PipelineConfig) -> Box<dyn EmbeddingProvider> {
    match config.embed.provider.as_str() {
        "http" => Box::new(HttpEmbeddingProvider {
            endpoint: config.embed.endpoint.clone(),
            api_key_env: (!config.embed.api_key_env.is_empty())
                .then(|| config.embed.api_key_env.clone()),
        }),
        _ => Box::new(HashedBowProvider::new(config.embed.dim, config.seed)),
    }
}

fn build_gateway(config: &PipelineConfig) -> Result<Gateway> {
    let provider: Box<dyn TextProvider> = match config.llm.provider.as_str() {
        "synthetic" => Box::new(SyntheticProvider::new(config.seed)),
        "fixture" => {
            let path = config
                .paths
                .fixtures
                .as_ref()
                .ok_or_else(|| Error::config("fixture provider requires paths.fixtures"))?;
            Box::new(FixtureProvider::from_path(path)?)
        }
        "http" => Box::new(HttpChatProvider {
            endpoint: config.llm.endpoint.clone(),
            model: config.llm.model.clone(),
            api_key_env: (!config.llm.api_key_env.is_empty())
                .then(|| config.llm.api_key_env.clone()),
            rate: TokenBucket::per_minute(config.llm.requests_per_minute),
        }),
        other => return Err(Error::config(format!("unknown llm provider: {other}"))),
    };
    let provider: Box<dyn TextProvider> = if config.llm.record_fixtures {
        let path = config
            .paths
            .fixtures
            .clone()
            .ok_or_else(|| Error::config("record_fixtures requires paths.fixtures"))?;
        Box::new(RecordingProvider::new(provider, path)?)
    } else {
        provider
    };
    Ok(Gateway::new(
        provider,
        GenParams {
            temperature: config.llm.temperature,
            max_tokens: config.llm.max_tokens,
            seed: Some(config.seed),
        },
    )
    .with_model_label(config.llm.model.clone()))
}

fn is_provider_error(err: &Error) -> bool {
    matches!(err, Error::Transport { .. } | Error::FixtureMiss { .. })
}

/// Deterministic question-level holdout split.
fn is_holdout(question_id: &str, seed: u64, fraction: f64) -> bool {
    let bucket = fnv1a64(format!("{seed}|holdout|{question_id}").as_bytes()) % 10_000;
    (bucket as f64) < fraction * 10_000.0
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRow {
    id: String,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PassageRow {
    id: String,
    home: String,
    text: String,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RelatedRow {
    question_id: String,
    neighbors: Vec<NeighborResult>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExternalPassageRow {
    question_id: String,
    id: String,
    text: String,
    score: f64,
    #[serde(default)]
    labeled_relevant: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    question: String,
    answer_a: String,
    answer_b: String,
    votes: Vec<String>,
}

// ---------------------------------------------------------------------------
// stages

fn stage_ingest(config: &PipelineConfig, run: &mut StageRun) -> Result<()> {
    let format: ArchiveFormat = config.corpus.format.parse()?;
    let file = std::fs::File::open(&config.paths.archive)?;
    let parsed = parse_archive(std::io::BufReader::new(file), format, &config.corpus.forum)?;
    run.count("parsed_questions", parsed.questions.len() as u64);
    run.count("parsed_answers", parsed.answers.len() as u64);
    run.count("skipped_rows", parsed.skipped as u64);

    let corpus = parsed.into_corpus();
    let filtered = filter_posts(&corpus, config.corpus.min_answers, config.corpus.gap_ratio);
    run.count("filtered_posts", filtered.posts.len() as u64);

    let sampled = subsample_by_forum(&filtered, &config.corpus.caps, config.seed);
    let stats = sampled.stats();
    run.count("posts", stats.num_questions as u64);
    run.count("answers", stats.num_answers as u64);
    for (forum, count) in &stats.per_forum {
        run.count(&format!("forum_{forum}"), *count as u64);
    }

    let out = config.artifact(CORPUS);
    let mut buffer = Vec::new();
    sampled.write_jsonl(&mut buffer)?;
    std::fs::write(&out, buffer)?;
    run.outputs.push(out);
    Ok(())
}

fn stage_index(config: &PipelineConfig, run: &mut StageRun) -> Result<()> {
    let corpus = read_corpus(config)?;
    let embedder = build_embedder(config);

    let mut question_rows = Vec::new();
    let mut passage_rows = Vec::new();
    for post in &corpus.posts {
        let vector = embedder.embed(&post.question.full_text())?;
        question_rows.push(EmbeddingRow {
            id: post.question.id.clone(),
            values: vector.values,
        });
        for answer in &post.answers {
            let vector = embedder.embed(&answer.body)?;
            passage_rows.push(PassageRow {
                id: answer.id.clone(),
                home: post.question.id.clone(),
                text: answer.body.clone(),
                values: vector.values,
            });
        }
    }
    run.count("questions_embedded", question_rows.len() as u64);
    run.count("passages_embedded", passage_rows.len() as u64);

    let q_out = config.artifact(QUESTION_EMBEDDINGS);
    write_jsonl(&q_out, &question_rows)?;
    run.outputs.push(q_out);
    let p_out = config.artifact(PASSAGE_POOL);
    write_jsonl(&p_out, &passage_rows)?;
    run.outputs.push(p_out);
    Ok(())
}

fn stage_mine_related(config: &PipelineConfig, run: &mut StageRun) -> Result<()> {
    let corpus = read_corpus(config)?;
    let question_rows: Vec<EmbeddingRow> = read_jsonl(&config.artifact(QUESTION_EMBEDDINGS))?;
    let mut index = VectorIndex::new();
    for row in &question_rows {
        index.insert(
            row.id.clone(),
            crate::embed::EmbeddingVector {
                values: row.values.clone(),
            },
        );
    }

    let mut related_rows = Vec::new();
    for post in &corpus.posts {
        let neighbors =
            related_questions(&index, &post.question.id, config.related.k, config.related.t_q)?;
        related_rows.push(RelatedRow {
            question_id: post.question.id.clone(),
            neighbors,
        });
    }
    run.count("questions_mined", related_rows.len() as u64);

    // evidence: external pre-scored passages, or mined from the corpus pool
    let mut evidence_rows = Vec::new();
    match &config.paths.passages {
        Some(path) => {
            let rows: Vec<ExternalPassageRow> = read_jsonl(path)?;
            let mut by_question: BTreeMap<&str, Vec<&ExternalPassageRow>> = BTreeMap::new();
            for row in &rows {
                by_question.entry(&row.question_id).or_default().push(row);
            }
            for post in &corpus.posts {
                let scored: Vec<ScoredPassage> = by_question
                    .get(post.question.id.as_str())
                    .map(|rows| {
                        rows.iter()
                            .map(|r| ScoredPassage {
                                passage: Passage {
                                    id: r.id.clone(),
                                    text: r.text.clone(),
                                },
                                score: r.score,
                                labeled_relevant: r.labeled_relevant,
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                evidence_rows.push(split_evidence(
                    &post.question.id,
                    &scored,
                    config.evidence.top_k,
                    config.evidence.t_doc,
                ));
            }
        }
        None => {
            let pool: Vec<PassageRow> = read_jsonl(&config.artifact(PASSAGE_POOL))?;
            for post in &corpus.posts {
                let query = index
                    .vector(&post.question.id)
                    .ok_or_else(|| Error::Lookup {
                        id: post.question.id.clone(),
                    })?;
                let scored: Vec<ScoredPassage> = pool
                    .iter()
                    .filter(|p| p.home != post.question.id)
                    .map(|p| ScoredPassage {
                        passage: Passage {
                            id: p.id.clone(),
                            text: p.text.clone(),
                        },
                        score: query.dot(&crate::embed::EmbeddingVector {
                            values: p.values.clone(),
                        }),
                        labeled_relevant: false,
                    })
                    .collect();
                evidence_rows.push(split_evidence(
                    &post.question.id,
                    &scored,
                    config.evidence.top_k,
                    config.evidence.t_doc,
                ));
            }
        }
    }
    let with_evidence = evidence_rows
        .iter()
        .filter(|e| !e.relevant.is_empty() && !e.irrelevant.is_empty())
        .count();
    run.count("questions_with_evidence", with_evidence as u64);

    let r_out = config.artifact(RELATED);
    write_jsonl(&r_out, &related_rows)?;
    run.outputs.push(r_out);
    let e_out = config.artifact(EVIDENCE);
    write_jsonl(&e_out, &evidence_rows)?;
    run.outputs.push(e_out);
    Ok(())
}

fn stage_gen_axioms(config: &PipelineConfig, run: &mut StageRun) -> Result<()> {
    let corpus = read_corpus(config)?;
    let related_rows: Vec<RelatedRow> = read_jsonl(&config.artifact(RELATED))?;
    let evidence_rows: Vec<crate::embed::EvidenceSet> = read_jsonl(&config.artifact(EVIDENCE))?;
    let gateway = build_gateway(config)?;

    let posts_by_id: HashMap<&str, &Post> = corpus
        .posts
        .iter()
        .map(|p| (p.question.id.as_str(), p))
        .collect();
    let related_by_id: HashMap<&str, &RelatedRow> = related_rows
        .iter()
        .map(|r| (r.question_id.as_str(), r))
        .collect();
    let evidence_by_id: HashMap<&str, &crate::embed::EvidenceSet> = evidence_rows
        .iter()
        .map(|e| (e.question_id.as_str(), e))
        .collect();

    let enabled = |axiom: u8| config.axioms.enabled.contains(&axiom);
    let gap = GapRule {
        per_pair_ratio: config.axioms.per_pair_gap_ratio,
    };
    let bounds = UtilizationBounds {
        low: config.axioms.utilization_low,
        high: config.axioms.utilization_high,
    };

    let mut pairs: Vec<PreferencePair> = Vec::new();
    let count_axiom = |pairs: &mut Vec<PreferencePair>,
                           run: &mut StageRun,
                           new_pairs: Vec<PreferencePair>| {
        for pair in new_pairs {
            run.bump(&format!("axiom{}_pairs", pair.axiom));
            if pair.eval_only {
                run.bump("eval_only_pairs");
            }
            pairs.push(pair);
        }
    };

    // any non-provider failure skips the question for that axiom
    let handle = |run: &mut StageRun,
                      pairs: &mut Vec<PreferencePair>,
                      axiom: u8,
                      question_id: &str,
                      outcome: Result<Vec<PreferencePair>>|
     -> Result<()> {
        match outcome {
            Ok(new_pairs) => {
                count_axiom(pairs, run, new_pairs);
                Ok(())
            }
            Err(err) if is_provider_error(&err) => Err(err),
            Err(err) => {
                run.bump(&format!("axiom{axiom}_skipped"));
                run.notes
                    .push(format!("axiom {axiom} skipped {question_id}: {err}"));
                Ok(())
            }
        }
    };

    for post in &corpus.posts {
        let qid = post.question.id.as_str();

        if enabled(0) {
            count_axiom(&mut pairs, run, axioms::axiom0_pairs(post, &gap));
        }

        if enabled(1) {
            let related: Vec<_> = related_by_id
                .get(qid)
                .map(|row| {
                    row.neighbors
                        .iter()
                        .filter_map(|n| posts_by_id.get(n.id.as_str()))
                        .map(|p| (p.question.clone(), p.answers.clone()))
                        .collect()
                })
                .unwrap_or_default();
            count_axiom(
                &mut pairs,
                run,
                axioms::axiom1_negatives(post, &related, config.axioms.axiom1_negatives, config.seed),
            );
        }

        let evidence = evidence_by_id.get(qid);
        if enabled(2) || enabled(3) {
            if let Some(evidence) = evidence {
                let parent = axioms::axiom2_pair(&post.question, evidence, &gateway);
                match parent {
                    Ok(parent) => {
                        if enabled(3) {
                            let outcome = axioms::axiom3_pairs(
                                &post.question,
                                &parent.pos,
                                &parent.neg,
                                &axioms::render_passages(&evidence.relevant),
                                &gateway,
                            );
                            handle(run, &mut pairs, 3, qid, outcome)?;
                        }
                        if enabled(2) {
                            count_axiom(&mut pairs, run, vec![parent]);
                        }
                    }
                    Err(err) => {
                        handle(run, &mut pairs, 2, qid, Err(err))?;
                    }
                }
            }
        }

        if enabled(4) {
            if let Some(evidence) = evidence {
                let outcome = axioms::axiom4_pairs(&post.question, evidence, &gateway, config.seed);
                handle(run, &mut pairs, 4, qid, outcome)?;
            }
        }

        if enabled(5) {
            let outcome = axioms::axiom5_pairs(
                post,
                &gateway,
                config.axioms.utilization_ngram,
                bounds,
            );
            handle(run, &mut pairs, 5, qid, outcome)?;
        }
    }

    run.count("pairs_total", pairs.len() as u64);
    let out = config.artifact(PAIRS);
    write_jsonl(&out, &pairs)?;
    run.outputs.push(out);
    Ok(())
}

fn stage_margins(config: &PipelineConfig, run: &mut StageRun) -> Result<()> {
    let pairs: Vec<PreferencePair> = read_jsonl(&config.artifact(PAIRS))?;
    let corpus = read_corpus(config)?;
    let question_text: HashMap<&str, String> = corpus
        .posts
        .iter()
        .map(|p| (p.question.id.as_str(), p.question.full_text()))
        .collect();

    let upvote_spec = config.margin.spec(MarginMode::UpvoteRatio);
    let fixed_spec = config.margin.spec(MarginMode::Fixed);
    let ai_spec = config.margin.spec(MarginMode::AiFeedback);
    let gateway = if config.margin.mode == MarginMode::AiFeedback {
        Some(build_gateway(config)?)
    } else {
        None
    };

    let mut margined = Vec::new();
    let mut rejected = 0u64;
    for mut pair in pairs {
        let human_both = pair.pos.upvotes.is_some() && pair.neg.upvotes.is_some();
        let outcome = match config.margin.mode {
            MarginMode::Fixed => compute_margin(&pair, &fixed_spec, None)?,
            _ if human_both => compute_margin(&pair, &upvote_spec, None)?,
            MarginMode::UpvoteRatio => compute_margin(&pair, &fixed_spec, None)?,
            MarginMode::AiFeedback => {
                if pair.eval_only {
                    // evaluation-only pairs never train; skip the judge call
                    compute_margin(&pair, &fixed_spec, None)?
                } else {
                    let gateway = gateway.as_ref().expect("gateway built for ai_feedback");
                    let question = question_text
                        .get(pair.question_id.as_str())
                        .cloned()
                        .unwrap_or_default();
                    let scores = critique_pair(gateway, &question, &pair)?;
                    compute_margin(&pair, &ai_spec, Some(&scores))?
                }
            }
        };
        match outcome {
            MarginOutcome::Accept(margin) => {
                pair.margin = Some(margin);
                margined.push(pair);
            }
            MarginOutcome::Reject { score_gap } => {
                rejected += 1;
                run.bump(&format!("axiom{}_rejected", pair.axiom));
                let _ = score_gap;
            }
        }
    }

    run.count("pairs_margined", margined.len() as u64);
    run.count("pairs_rejected", rejected);
    run.notes.push(format!("margin mode: {:?}", config.margin.mode));
    let out = config.artifact(PAIRS_MARGINED);
    write_jsonl(&out, &margined)?;
    run.outputs.push(out);
    Ok(())
}

fn critique_pair(
    gateway: &Gateway,
    question: &str,
    pair: &PreferencePair,
) -> Result<crate::gateway::CritiqueScores> {
    let mut binds = BTreeMap::new();
    binds.insert("Question".to_string(), question.to_string());
    binds.insert("AnswerA".to_string(), pair.pos.text.clone());
    binds.insert("AnswerB".to_string(), pair.neg.text.clone());
    let result = gateway.generate(TemplateId::CritiqueThenScore, &binds)?;
    // the prompt seeds "<CritiqueA>", so a real completion starts mid-tag
    let text = if result.truncated.contains("<CritiqueA>") {
        result.truncated.clone()
    } else {
        format!("<CritiqueA>{}", result.truncated)
    };
    let (scores, _warnings) = parse_critique_scores(&text)?;
    Ok(scores)
}

fn stage_validate(config: &PipelineConfig, run: &mut StageRun) -> Result<()> {
    let pairs: Vec<PreferencePair> = read_jsonl(&config.artifact(PAIRS_MARGINED))?;
    let judgments: BTreeMap<PairTypeKey, f64> = match &config.paths.judgments {
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            let map: BTreeMap<String, f64> = serde_json::from_str(&raw).map_err(|e| {
                Error::config(format!("judgments {}: {e}", path.display()))
            })?;
            map.into_iter()
                .map(|(k, v)| Ok((k.parse()?, v)))
                .collect::<Result<_>>()?
        }
        None => {
            run.notes
                .push("no judgments file; all pair types kept".to_string());
            BTreeMap::new()
        }
    };

    let before = pairs.len();
    let outcome = axioms::validate_pair_types(pairs, &judgments, config.validate.threshold);
    for (key, fraction) in &outcome.dropped_types {
        run.notes
            .push(format!("dropped type {key}: preferred {fraction:.3}"));
    }
    for key in &outcome.unjudged_types {
        run.notes.push(format!("no judgment for type {key}; kept"));
    }
    run.count("pairs_in", before as u64);
    run.count("pairs_kept", outcome.kept.len() as u64);
    run.count("types_dropped", outcome.dropped_types.len() as u64);

    let out = config.artifact(PAIRS_VALIDATED);
    write_jsonl(&out, &outcome.kept)?;
    run.outputs.push(out);
    Ok(())
}

fn resolve_examples(
    pairs: &[PreferencePair],
    question_text: &HashMap<&str, String>,
) -> Result<Vec<TrainExample>> {
    pairs
        .iter()
        .map(|pair| {
            let question = question_text
                .get(pair.question_id.as_str())
                .cloned()
                .ok_or_else(|| Error::Lookup {
                    id: pair.question_id.clone(),
                })?;
            Ok(TrainExample {
                question_id: pair.question_id.clone(),
                question,
                pos: pair.pos.text.clone(),
                neg: pair.neg.text.clone(),
                evidence: pair
                    .evidence
                    .as_ref()
                    .map(|ps| ps.iter().map(|p| p.text.clone()).collect()),
                margin: pair.margin.unwrap_or(0.0),
            })
        })
        .collect()
}

fn stage_train(config: &PipelineConfig, run: &mut StageRun) -> Result<()> {
    let pairs: Vec<PreferencePair> = read_jsonl(&config.artifact(PAIRS_VALIDATED))?;
    let corpus = read_corpus(config)?;
    let question_text: HashMap<&str, String> = corpus
        .posts
        .iter()
        .map(|p| (p.question.id.as_str(), p.question.full_text()))
        .collect();

    let mut train_pairs = Vec::new();
    let mut holdout_pairs = Vec::new();
    for pair in pairs {
        if pair.eval_only
            || is_holdout(&pair.question_id, config.seed, config.train.holdout_fraction)
        {
            holdout_pairs.push(pair);
        } else {
            train_pairs.push(pair);
        }
    }
    run.count("train_pairs", train_pairs.len() as u64);
    run.count("holdout_pairs", holdout_pairs.len() as u64);

    let feature_config = FeatureConfig {
        hash_bits: config.train.hash_bits,
        ..Default::default()
    };
    let train_config = TrainConfig {
        learning_rate: config.train.learning_rate,
        warmup_steps: config.train.warmup_steps,
        total_steps: config.train.total_steps,
        seed: config.seed,
        evidence_dropout: config.train.evidence_dropout,
        l2: config.train.l2,
        parallel: config.train.parallel,
    };

    let examples = resolve_examples(&train_pairs, &question_text)?;
    let holdout_examples = resolve_examples(&holdout_pairs, &question_text)?;

    let (model, report) = if examples.is_empty() {
        run.notes
            .push("no training pairs; writing the zero-initialized model".to_string());
        (
            ScorerModel::new(feature_config, config.seed),
            TrainReport {
                steps: 0,
                examples: 0,
                questions: 0,
                segment_mean_loss: Vec::new(),
                holdout_accuracy: None,
            },
        )
    } else {
        train(
            &examples,
            &feature_config,
            &train_config,
            (!holdout_examples.is_empty()).then_some(holdout_examples.as_slice()),
        )?
    };

    if let Some(accuracy) = report.holdout_accuracy {
        run.count("holdout_accuracy_permille", (accuracy * 1000.0).round() as u64);
    }

    let model_out = config.artifact(MODEL);
    model.save(&model_out)?;
    run.outputs.push(model_out);
    let report_out = config.artifact(TRAIN_REPORT);
    std::fs::write(
        &report_out,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Parse {
            message: e.to_string(),
            offset: None,
        })?,
    )?;
    run.outputs.push(report_out);
    let holdout_out = config.artifact(HOLDOUT_PAIRS);
    write_jsonl(&holdout_out, &holdout_pairs)?;
    run.outputs.push(holdout_out);
    Ok(())
}

fn stage_eval(config: &PipelineConfig, run: &mut StageRun) -> Result<()> {
    let model = ScorerModel::load(&config.artifact(MODEL))?;
    let corpus = read_corpus(config)?;
    let holdout_pairs: Vec<PreferencePair> = read_jsonl(&config.artifact(HOLDOUT_PAIRS))?;
    let related_rows: Vec<RelatedRow> = read_jsonl(&config.artifact(RELATED))?;
    let validated: Vec<PreferencePair> = read_jsonl(&config.artifact(PAIRS_VALIDATED))?;

    let posts_by_id: HashMap<&str, &Post> = corpus
        .posts
        .iter()
        .map(|p| (p.question.id.as_str(), p))
        .collect();
    let related_by_id: HashMap<&str, &RelatedRow> = related_rows
        .iter()
        .map(|r| (r.question_id.as_str(), r))
        .collect();

    // ranking tasks over held-out questions: own answers plus hard negatives
    let mut tasks = Vec::new();
    for post in &corpus.posts {
        if !is_holdout(&post.question.id, config.seed, config.train.holdout_fraction) {
            continue;
        }
        let ranked = post.answers_by_upvotes();
        if ranked.len() < 2 || ranked[0].upvotes <= 0 {
            continue;
        }
        let question = post.question.full_text();
        let mut candidates = Vec::new();
        let mut scores = Vec::new();
        for (i, answer) in ranked.iter().enumerate() {
            candidates.push(Candidate {
                id: answer.id.clone(),
                gain: upvote_gain(answer.upvotes),
                is_top_upvoted: i == 0,
            });
            scores.push(model.score_text(&question, &answer.body, None)?);
        }
        if let Some(row) = related_by_id.get(post.question.id.as_str()) {
            let mut taken = 0usize;
            'neighbors: for neighbor in &row.neighbors {
                if let Some(foreign) = posts_by_id.get(neighbor.id.as_str()) {
                    for answer in foreign.answers_by_upvotes() {
                        if taken >= config.eval.hard_negatives_per_task {
                            break 'neighbors;
                        }
                        candidates.push(Candidate {
                            id: answer.id.clone(),
                            gain: 0.0,
                            is_top_upvoted: false,
                        });
                        scores.push(model.score_text(&question, &answer.body, None)?);
                        taken += 1;
                    }
                }
            }
        }
        tasks.push(RankingTask {
            question_id: post.question.id.clone(),
            candidates,
            scores,
        });
    }

    let tasks_out = config.artifact(RANKING_TASKS);
    write_jsonl(&tasks_out, &tasks)?;
    run.outputs.push(tasks_out);

    let ranking_mrr = if tasks.is_empty() { 0.0 } else { mrr(&tasks)? };
    let (ranking_ndcg, ndcg_skipped) = mean_ndcg(&tasks, config.eval.ndcg_cutoff);

    // pairwise accuracy over held-out pairs, with and without evidence
    let mut plain = Vec::new();
    let mut with_evidence = Vec::new();
    let mut deltas = Vec::new();
    let mut source_scores: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for pair in &holdout_pairs {
        let question = posts_by_id
            .get(pair.question_id.as_str())
            .map(|p| p.question.full_text())
            .unwrap_or_default();
        if question.is_empty() {
            continue;
        }
        let pos = model.score_text(&question, &pair.pos.text, None)?;
        let neg = model.score_text(&question, &pair.neg.text, None)?;
        plain.push(ScoredPair {
            preferred: pos,
            other: neg,
        });
        source_scores.entry(source_label(pair.pos.source)).or_default().push(pos);
        source_scores.entry(source_label(pair.neg.source)).or_default().push(neg);
        if let Some(evidence) = &pair.evidence {
            let texts: Vec<String> = evidence.iter().map(|p| p.text.clone()).collect();
            let pos_e = model.score_text(&question, &pair.pos.text, Some(&texts))?;
            let neg_e = model.score_text(&question, &pair.neg.text, Some(&texts))?;
            with_evidence.push(ScoredPair {
                preferred: pos_e,
                other: neg_e,
            });
            deltas.push(pos_e - pos);
        }
    }

    let agreement_report = match &config.paths.annotations {
        Some(path) => {
            let rows: Vec<AnnotationRow> = read_jsonl(path)?;
            let mut annotated = Vec::new();
            for row in &rows {
                let votes: Vec<Side> = row
                    .votes
                    .iter()
                    .map(|v| match v.as_str() {
                        "a" | "A" => Ok(Side::A),
                        "b" | "B" => Ok(Side::B),
                        other => Err(Error::config(format!("bad vote: {other}"))),
                    })
                    .collect::<Result<_>>()?;
                annotated.push(AnnotatedPair {
                    votes,
                    score_a: model.score_text(&row.question, &row.answer_a, None)?,
                    score_b: model.score_text(&row.question, &row.answer_b, None)?,
                });
            }
            Some(agreement(&annotated))
        }
        None => None,
    };

    let mut per_axiom_pairs = BTreeMap::new();
    for pair in &validated {
        *per_axiom_pairs
            .entry(format!("axiom{}", pair.axiom))
            .or_insert(0usize) += 1;
    }

    let report = EvalReport {
        mrr: ranking_mrr,
        ndcg: ranking_ndcg,
        ndcg_skipped_tasks: ndcg_skipped,
        ranking_tasks: tasks.len(),
        pairwise_accuracy: pairwise_accuracy(&plain),
        pairwise_accuracy_with_evidence: (!with_evidence.is_empty())
            .then(|| pairwise_accuracy(&with_evidence)),
        evidence_delta_mean: (!deltas.is_empty())
            .then(|| deltas.iter().sum::<f64>() / deltas.len() as f64),
        agreement: agreement_report,
        per_axiom_pairs,
    };
    run.count("ranking_tasks", tasks.len() as u64);
    run.count("holdout_pairs_scored", plain.len() as u64);
    run.count("mrr_permille", (report.mrr * 1000.0).round() as u64);

    let report_out = config.artifact(EVAL_REPORT);
    std::fs::write(
        &report_out,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Parse {
            message: e.to_string(),
            offset: None,
        })?,
    )?;
    run.outputs.push(report_out);

    // score-distribution histograms per answer source, for external plotting
    let all_scores: Vec<f64> = source_scores.values().flatten().copied().collect();
    let (lo, hi) = score_range(&all_scores);
    let mut csv = String::from("source,bin_low,bin_high,count\n");
    for (source, scores) in &source_scores {
        for (bin_lo, bin_hi, count) in
            score_histogram(scores, config.eval.histogram_bins, lo, hi)
        {
            csv.push_str(&format!("{source},{bin_lo:.6},{bin_hi:.6},{count}\n"));
        }
    }
    let hist_out = config.artifact(HISTOGRAMS);
    std::fs::write(&hist_out, csv)?;
    run.outputs.push(hist_out);
    Ok(())
}

fn source_label(source: AnswerSource) -> &'static str {
    source.as_str()
}

fn score_range(scores: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &s in scores {
        if s.is_finite() {
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn stage_report(config: &PipelineConfig, run: &mut StageRun) -> Result<()> {
    let eval_report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(config.artifact(EVAL_REPORT))?).map_err(
            |e| Error::Parse {
                message: format!("eval report: {e}"),
                offset: None,
            },
        )?;
    let train_report: TrainReport =
        serde_json::from_str(&std::fs::read_to_string(config.artifact(TRAIN_REPORT))?).map_err(
            |e| Error::Parse {
                message: format!("train report: {e}"),
                offset: None,
            },
        )?;
    let margins_manifest = StageManifest::read(&config.manifest_path("margins")).ok();

    let total_pairs: usize = eval_report.per_axiom_pairs.values().sum();
    let mut text = String::new();
    text.push_str("pair counts by axiom\n");
    text.push_str("--------------------\n");
    for (axiom, count) in &eval_report.per_axiom_pairs {
        text.push_str(&format!("{axiom:<10} {count:>8}\n"));
    }
    text.push_str(&format!("{:<10} {total_pairs:>8}\n\n", "total"));

    text.push_str("training\n");
    text.push_str("--------\n");
    text.push_str(&format!(
        "steps {}  examples {}  questions {}\n",
        train_report.steps, train_report.examples, train_report.questions
    ));
    if let Some(mode_note) = margins_manifest
        .as_ref()
        .and_then(|m| m.notes.iter().find(|n| n.starts_with("margin mode")))
    {
        text.push_str(&format!("{mode_note}\n"));
    }
    if let Some(first) = train_report.segment_mean_loss.first() {
        let last = train_report.segment_mean_loss.last().unwrap();
        text.push_str(&format!("mean loss {first:.4} -> {last:.4}\n"));
    }
    if let Some(accuracy) = train_report.holdout_accuracy {
        text.push_str(&format!("holdout pairwise accuracy {accuracy:.4}\n"));
    }
    text.push('\n');

    text.push_str("evaluation\n");
    text.push_str("----------\n");
    text.push_str(&format!(
        "ranking tasks {}   mrr {:.4}   ndcg {:.4} (skipped {})\n",
        eval_report.ranking_tasks,
        eval_report.mrr,
        eval_report.ndcg,
        eval_report.ndcg_skipped_tasks
    ));
    text.push_str(&format!(
        "pairwise accuracy {:.4}",
        eval_report.pairwise_accuracy
    ));
    if let Some(acc) = eval_report.pairwise_accuracy_with_evidence {
        text.push_str(&format!("   with evidence {acc:.4}"));
    }
    text.push('\n');
    if let Some(delta) = eval_report.evidence_delta_mean {
        text.push_str(&format!("mean evidence delta {delta:+.4}\n"));
    }
    if let Some(agreement) = &eval_report.agreement {
        text.push_str(&format!(
            "agreement {:.4} (agree {}, disagree {}, excluded {})\n",
            agreement.agreement, agreement.agree, agreement.disagree, agreement.excluded
        ));
    }
    text.push_str(&format!("histograms: {}\n", HISTOGRAMS));

    let text_out = config.artifact(REPORT_TEXT);
    std::fs::write(&text_out, &text)?;
    run.outputs.push(text_out);

    #[derive(Serialize)]
    struct ReportJson<'a> {
        eval: &'a EvalReport,
        train: &'a TrainReport,
        total_pairs: usize,
    }
    let json_out = config.artifact(REPORT_JSON);
    std::fs::write(
        &json_out,
        serde_json::to_string_pretty(&ReportJson {
            eval: &eval_report,
            train: &train_report,
            total_pairs,
        })
        .map_err(|e| Error::Parse {
            message: e.to_string(),
            offset: None,
        })?,
    )?;
    run.outputs.push(json_out);

    run.count("total_pairs", total_pairs as u64);
    Ok(())
}
