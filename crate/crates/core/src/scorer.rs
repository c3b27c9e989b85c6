//! Pointwise answer scorer: sparse hashed text features, a linear model,
//! and pairwise margin training.
//!
//! The model scores a linearized (question, optional evidence, answer)
//! input and trains on contrastive pairs with the hinge objective
//! `L = max(0, margin - (f(x+) - f(x-)))`: zero once the positive leads by
//! at least the margin. Training draws one question per step, uniformly, and
//! batches all of that question's pairs so heavily-answered posts do not
//! dominate.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{fnv1a64, tokenize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Hashed feature space size is `2^hash_bits`.
    pub hash_bits: u8,
    pub word_ngrams: (u8, u8),
    pub char_ngrams: (u8, u8),
    pub question_token_cap: usize,
    pub total_token_cap: usize,
    /// Hashed question x answer unigram interactions.
    pub interactions: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            hash_bits: 20,
            word_ngrams: (1, 2),
            char_ngrams: (3, 5),
            question_token_cap: 256,
            total_token_cap: 2048,
            interactions: true,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        1usize << self.hash_bits
    }
}

/// Sparse feature vector over a `2^b` hashed space; entries are sorted by
/// index and unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub entries: Vec<(u32, f64)>,
    pub dim: usize,
}

impl FeatureVector {
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, v)| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&self, factor: f64) -> FeatureVector {
        FeatureVector {
            entries: self.entries.iter().map(|&(i, v)| (i, v * factor)).collect(),
            dim: self.dim,
        }
    }
}

struct Accumulator {
    mask: u64,
    slots: HashMap<u32, f64>,
}

impl Accumulator {
    fn new(cfg: &FeatureConfig) -> Self {
        Accumulator {
            mask: (cfg.dim() - 1) as u64,
            slots: HashMap::new(),
        }
    }

    fn add(&mut self, feature: &str, value: f64) {
        let idx = (fnv1a64(feature.as_bytes()) & self.mask) as u32;
        *self.slots.entry(idx).or_insert(0.0) += value;
    }

    fn finish(self, dim: usize) -> FeatureVector {
        let mut entries: Vec<(u32, f64)> = self.slots.into_iter().collect();
        entries.sort_unstable_by_key(|&(i, _)| i);
        FeatureVector { entries, dim }
    }
}

fn add_word_ngrams(acc: &mut Accumulator, ns: &str, tokens: &[String], range: (u8, u8)) {
    for n in range.0..=range.1 {
        let n = n as usize;
        if n == 0 || tokens.len() < n {
            continue;
        }
        for window in tokens.windows(n) {
            acc.add(&format!("{ns}|w{n}|{}", window.join(" ")), 1.0);
        }
    }
}

fn add_char_ngrams(acc: &mut Accumulator, ns: &str, text: &str, range: (u8, u8)) {
    let chars: Vec<char> = text.chars().collect();
    for n in range.0..=range.1 {
        let n = n as usize;
        if n == 0 || chars.len() < n {
            continue;
        }
        for window in chars.windows(n) {
            let gram: String = window.iter().collect();
            acc.add(&format!("{ns}|c{n}|{gram}"), 1.0);
        }
    }
}

/// Featurize a (question, answer, optional evidence) input.
///
/// The question is truncated to `question_token_cap` tokens and the whole
/// input to `total_token_cap`, answer before evidence, so the question and
/// answer features of an input do not depend on whether evidence was
/// attached. Fields are namespaced; evidence-dependent features live only
/// in the evidence namespace.
pub fn featurize(
    question: &str,
    answer: &str,
    evidence: Option<&[String]>,
    cfg: &FeatureConfig,
) -> Result<FeatureVector> {
    let q_tokens = {
        let mut t = tokenize(question);
        t.truncate(cfg.question_token_cap);
        t
    };
    let mut a_tokens = tokenize(answer);
    if q_tokens.is_empty() || a_tokens.is_empty() {
        return Err(Error::contract("question and answer must be non-empty"));
    }
    a_tokens.truncate(cfg.total_token_cap.saturating_sub(q_tokens.len()));

    let evidence_budget = cfg
        .total_token_cap
        .saturating_sub(q_tokens.len() + a_tokens.len());
    let e_tokens: Vec<String> = match evidence {
        Some(passages) => passages
            .iter()
            .flat_map(|p| tokenize(p))
            .take(evidence_budget)
            .collect(),
        None => Vec::new(),
    };

    let mut acc = Accumulator::new(cfg);
    add_word_ngrams(&mut acc, "q", &q_tokens, cfg.word_ngrams);
    add_word_ngrams(&mut acc, "a", &a_tokens, cfg.word_ngrams);
    add_char_ngrams(&mut acc, "q", &q_tokens.join(" "), cfg.char_ngrams);
    add_char_ngrams(&mut acc, "a", &a_tokens.join(" "), cfg.char_ngrams);

    if cfg.interactions {
        let mut q_uniq: Vec<&String> = q_tokens.iter().collect();
        q_uniq.sort_unstable();
        q_uniq.dedup();
        let mut a_uniq: Vec<&String> = a_tokens.iter().collect();
        a_uniq.sort_unstable();
        a_uniq.dedup();
        for qt in &q_uniq {
            for at in &a_uniq {
                acc.add(&format!("x|{qt}|{at}"), 1.0);
            }
        }
    }

    acc.add("s|answer_log_len", (1.0 + a_tokens.len() as f64).ln());

    if evidence.is_some() {
        add_word_ngrams(&mut acc, "e", &e_tokens, cfg.word_ngrams);
        add_char_ngrams(&mut acc, "e", &e_tokens.join(" "), cfg.char_ngrams);
        let e_set: std::collections::HashSet<&String> = e_tokens.iter().collect();
        let mut a_set: Vec<&String> = a_tokens.iter().collect();
        a_set.sort_unstable();
        a_set.dedup();
        let overlap = a_set.iter().filter(|t| e_set.contains(**t)).count() as f64
            / a_set.len() as f64;
        acc.add("e|answer_overlap", overlap);
    }

    Ok(acc.finish(cfg.dim()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: FeatureConfig,
    pub seed: u64,
}

impl ScorerModel {
    /// All-zero initialization, so step-0 behavior is exactly predictable.
    pub fn new(config: FeatureConfig, seed: u64) -> Self {
        let dim = config.dim();
        ScorerModel {
            weights: vec![0.0; dim],
            bias: 0.0,
            config,
            seed,
        }
    }

    pub fn score(&self, fv: &FeatureVector) -> Result<f64> {
        if fv.dim != self.weights.len() {
            return Err(Error::contract(format!(
                "feature dim {} does not match model dim {}",
                fv.dim,
                self.weights.len()
            )));
        }
        let dot: f64 = fv
            .entries
            .iter()
            .map(|&(i, v)| self.weights[i as usize] * v)
            .sum();
        Ok(dot + self.bias)
    }

    pub fn score_text(
        &self,
        question: &str,
        answer: &str,
        evidence: Option<&[String]>,
    ) -> Result<f64> {
        self.score(&featurize(question, answer, evidence, &self.config)?)
    }

    const CHECKPOINT_FORMAT: &'static str = "prefax-scorer";
    const CHECKPOINT_VERSION: u32 = 1;

    /// Checkpoint layout: one JSON header line, then `dim` little-endian
    /// f64 weights. Round-trips scores bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'c> {
            format: &'static str,
            version: u32,
            config: &'c FeatureConfig,
            seed: u64,
            bias: f64,
            dim: usize,
        }
        let header = Header {
            format: Self::CHECKPOINT_FORMAT,
            version: Self::CHECKPOINT_VERSION,
            config: &self.config,
            seed: self.seed,
            bias: self.bias,
            dim: self.weights.len(),
        };
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut file, &header).map_err(|e| Error::Parse {
            message: e.to_string(),
            offset: None,
        })?;
        file.write_all(b"\n")?;
        for w in &self.weights {
            file.write_all(&w.to_le_bytes())?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
            config: FeatureConfig,
            seed: u64,
            bias: f64,
            dim: usize,
        }
        let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
            message: format!("checkpoint header: {e}"),
            offset: None,
        })?;
        if header.format != Self::CHECKPOINT_FORMAT || header.version != Self::CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint {}/{}",
                header.format, header.version
            )));
        }
        if header.dim != header.config.dim() {
            return Err(Error::config("checkpoint dim mismatch"));
        }
        let mut weights = vec![0.0f64; header.dim];
        let mut buf = [0u8; 8];
        for w in weights.iter_mut() {
            reader.read_exact(&mut buf)?;
            *w = f64::from_le_bytes(buf);
        }
        Ok(ScorerModel {
            weights,
            bias: header.bias,
            config: header.config,
            seed: header.seed,
        })
    }
}

/// `max(0, margin - (f(x+) - f(x-)))`.
pub fn pair_loss(model: &ScorerModel, pos: &FeatureVector, neg: &FeatureVector, margin: f64) -> Result<f64> {
    let gap = model.score(pos)? - model.score(neg)?;
    Ok((margin - gap).max(0.0))
}

#[derive(Debug, Clone, Default)]
pub struct PairGrad {
    pub weights: Vec<(u32, f64)>,
    pub bias: f64,
}

/// Subgradient of the pair loss: zero when the hinge is inactive, otherwise
/// `x- - x+` on the weights. The bias cancels out of the score gap, so its
/// gradient is always zero.
pub fn pair_grad(
    model: &ScorerModel,
    pos: &FeatureVector,
    neg: &FeatureVector,
    margin: f64,
) -> Result<PairGrad> {
    if pair_loss(model, pos, neg, margin)? == 0.0 {
        return Ok(PairGrad::default());
    }
    Ok(PairGrad {
        weights: sparse_diff(neg, pos),
        bias: 0.0,
    })
}

/// `a - b` over sorted sparse entries, dropping exact zeros.
fn sparse_diff(a: &FeatureVector, b: &FeatureVector) -> Vec<(u32, f64)> {
    let mut out = Vec::with_capacity(a.entries.len() + b.entries.len());
    let (mut i, mut j) = (0, 0);
    while i < a.entries.len() || j < b.entries.len() {
        match (a.entries.get(i), b.entries.get(j)) {
            (Some(&(ia, va)), Some(&(ib, vb))) => {
                if ia == ib {
                    let v = va - vb;
                    if v != 0.0 {
                        out.push((ia, v));
                    }
                    i += 1;
                    j += 1;
                } else if ia < ib {
                    out.push((ia, va));
                    i += 1;
                } else {
                    out.push((ib, -vb));
                    j += 1;
                }
            }
            (Some(&(ia, va)), None) => {
                out.push((ia, va));
                i += 1;
            }
            (None, Some(&(ib, vb))) => {
                out.push((ib, -vb));
                j += 1;
            }
            (None, None) => break,
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Probability of dropping the evidence side of an evidence-bearing pair
    /// for one step, so the model learns both the `(q, a)` and `(q, e, a)`
    /// input forms.
    pub evidence_dropout: f64,
    pub l2: f64,
    /// Shard per-pair gradient computation across threads. Reduction stays
    /// in pair order, so results are bit-identical to the serial path.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            warmup_steps: 1000,
            total_steps: 16_000,
            seed: 0,
            evidence_dropout: 0.5,
            l2: 0.0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps must not exceed total_steps"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.evidence_dropout) {
            return Err(Error::config("evidence_dropout must be a probability"));
        }
        Ok(())
    }
}

/// A pair with its texts resolved, ready for featurization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainExample {
    pub question_id: String,
    pub question: String,
    pub pos: String,
    pub neg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<String>>,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub examples: usize,
    pub questions: usize,
    /// Mean loss over ten equal segments of the step sequence.
    pub segment_mean_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_accuracy: Option<f64>,
}

struct PreparedPair {
    with_evidence: Option<(FeatureVector, FeatureVector)>,
    plain: (FeatureVector, FeatureVector),
    margin: f64,
}

struct PreparedQuestion {
    pairs: Vec<PreparedPair>,
}

fn prepare(examples: &[TrainExample], cfg: &FeatureConfig) -> Result<Vec<PreparedQuestion>> {
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<&TrainExample>> = HashMap::new();
    for ex in examples {
        grouped
            .entry(ex.question_id.as_str())
            .or_insert_with(|| {
                order.push(ex.question_id.as_str());
                Vec::new()
            })
            .push(ex);
    }
    order.sort_unstable();

    let mut prepared = Vec::with_capacity(order.len());
    for qid in order {
        let mut pairs = Vec::new();
        for ex in &grouped[qid] {
            let plain = (
                featurize(&ex.question, &ex.pos, None, cfg)?,
                featurize(&ex.question, &ex.neg, None, cfg)?,
            );
            let with_evidence = match &ex.evidence {
                Some(ev) if !ev.is_empty() => Some((
                    featurize(&ex.question, &ex.pos, Some(ev), cfg)?,
                    featurize(&ex.question, &ex.neg, Some(ev), cfg)?,
                )),
                _ => None,
            };
            pairs.push(PreparedPair {
                with_evidence,
                plain,
                margin: ex.margin,
            });
        }
        prepared.push(PreparedQuestion { pairs });
    }
    Ok(prepared)
}

/// Train with plain SGD: linear warmup to a flat rate, one uniformly-drawn
/// question per step with all its pairs as the batch. Deterministic under
/// the config seed.
pub fn train(
    examples: &[TrainExample],
    feature_config: &FeatureConfig,
    config: &TrainConfig,
    holdout: Option<&[TrainExample]>,
) -> Result<(ScorerModel, TrainReport)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::contract("no training examples"));
    }
    let prepared = prepare(examples, feature_config)?;
    let mut model = ScorerModel::new(feature_config.clone(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let segments = 10usize;
    let mut segment_losses = vec![0.0f64; segments];
    let mut segment_counts = vec![0usize; segments];

    for step in 0..config.total_steps {
        let lr = if config.warmup_steps > 0 && step < config.warmup_steps {
            config.learning_rate * (step + 1) as f64 / config.warmup_steps as f64
        } else {
            config.learning_rate
        };

        let question = &prepared[rng.gen_range(0..prepared.len())];
        let batch: Vec<(&FeatureVector, &FeatureVector, f64)> = question
            .pairs
            .iter()
            .map(|pair| {
                let use_evidence = pair.with_evidence.is_some()
                    && rng.gen::<f64>() >= config.evidence_dropout;
                let (pos, neg) = if use_evidence {
                    pair.with_evidence.as_ref().unwrap()
                } else {
                    &pair.plain
                };
                (pos, neg, pair.margin)
            })
            .collect();

        let grads = batch_grads(&model, &batch, config.parallel)?;
        let mut step_loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (loss, grad) in &grads {
            step_loss += loss;
            for &(idx, g) in &grad.weights {
                let w = &mut model.weights[idx as usize];
                *w -= lr * scale * (g + config.l2 * *w);
            }
        }
        step_loss *= scale;
        if !step_loss.is_finite() {
            return Err(Error::Train { step });
        }
        let segment = step * segments / config.total_steps.max(1);
        segment_losses[segment] += step_loss;
        segment_counts[segment] += 1;
    }

    let segment_mean_loss = segment_losses
        .iter()
        .zip(&segment_counts)
        .filter(|(_, &c)| c > 0)
        .map(|(&l, &c)| l / c as f64)
        .collect();

    let holdout_accuracy = match holdout {
        Some(pairs) if !pairs.is_empty() => Some(holdout_pairwise_accuracy(&model, pairs)?),
        _ => None,
    };

    let report = TrainReport {
        steps: config.total_steps,
        examples: examples.len(),
        questions: prepared.len(),
        segment_mean_loss,
        holdout_accuracy,
    };
    Ok((model, report))
}

type LossAndGrad = (f64, PairGrad);

fn batch_grads(
    model: &ScorerModel,
    batch: &[(&FeatureVector, &FeatureVector, f64)],
    parallel: bool,
) -> Result<Vec<LossAndGrad>> {
    let eval = |&(pos, neg, margin): &(&FeatureVector, &FeatureVector, f64)| -> Result<LossAndGrad> {
        let loss = pair_loss(model, pos, neg, margin)?;
        let grad = if loss == 0.0 {
            PairGrad::default()
        } else {
            PairGrad {
                weights: sparse_diff(neg, pos),
                bias: 0.0,
            }
        };
        Ok((loss, grad))
    };

    if !parallel || batch.len() < 8 {
        return batch.iter().map(eval).collect();
    }

    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(batch.len());
    let chunk = batch.len().div_ceil(threads);
    let mut out: Vec<Option<Result<Vec<LossAndGrad>>>> = Vec::new();
    out.resize_with(threads, || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for piece in batch.chunks(chunk) {
            handles.push(scope.spawn(move || piece.iter().map(eval).collect::<Result<Vec<_>>>()));
        }
        for (slot, handle) in out.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("gradient worker panicked"));
        }
    });
    // fold chunk results back in pair order
    let mut flat = Vec::with_capacity(batch.len());
    for slot in out.into_iter().flatten() {
        flat.extend(slot?);
    }
    Ok(flat)
}

/// Fraction of pairs where the positive side scores strictly higher,
/// evidence attached when the pair carries it.
pub fn holdout_pairwise_accuracy(model: &ScorerModel, pairs: &[TrainExample]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in pairs {
        let ev = ex.evidence.as_deref();
        let pos = model.score_text(&ex.question, &ex.pos, ev)?;
        let neg = model.score_text(&ex.question, &ex.neg, ev)?;
        if pos - neg > 1e-9 {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// The question index drawn at each training step, exposed for sampling
/// diagnostics.
pub fn question_draw_sequence(num_questions: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| rng.gen_range(0..num_questions))
        .collect()
}
