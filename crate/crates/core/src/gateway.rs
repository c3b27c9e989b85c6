//! Prompt templates, text-generation providers, and tagged-response parsing.
//!
//! Providers are pluggable: an HTTP chat provider for real endpoints, a
//! fixture provider that replays recorded responses keyed by a SHA-256 hash
//! of the rendered prompt, and a synthetic provider that fabricates
//! deterministic, well-formed responses so the pipeline runs with no
//! recorded data at all. Responses end at the `=====` terminator.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{fnv1a64, split_sentences};

pub const TERMINATOR: &str = "=====";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    GroundedAnswer,
    ClosedBook,
    CorruptClaims,
    IrrelevantGrounding,
    CombineAnswers,
    CritiqueThenScore,
}

impl TemplateId {
    pub fn all() -> [TemplateId; 6] {
        [
            TemplateId::GroundedAnswer,
            TemplateId::ClosedBook,
            TemplateId::CorruptClaims,
            TemplateId::IrrelevantGrounding,
            TemplateId::CombineAnswers,
            TemplateId::CritiqueThenScore,
        ]
    }

    pub fn text(self) -> &'static str {
        match self {
            TemplateId::GroundedAnswer => GROUNDED_ANSWER,
            TemplateId::ClosedBook => CLOSED_BOOK,
            TemplateId::CorruptClaims => CORRUPT_CLAIMS,
            TemplateId::IrrelevantGrounding => IRRELEVANT_GROUNDING,
            TemplateId::CombineAnswers => COMBINE_ANSWERS,
            TemplateId::CritiqueThenScore => CRITIQUE_THEN_SCORE,
        }
    }
}

const GROUNDED_ANSWER: &str = r#"### Consider the evidence offered in the following Passages:
### Evidence: $EvidencePassages
### Question: $Question
### Instructions: Please carefully write a useful, thorough, well-structured and concise answer to the Question: "$Question" that cites salient information stated in the Evidence Passages. The answer must include relevant facts, analysis, key events, entities, figures, dates, or other verifiable information to be convincing. Use the Passages to ground your answer, but avoid those that are irrelevant to the question or do not support key points in your answer. If you choose to use them, please cite Passages in parentheses e.g. "(Passage 4)" or "(Passage 4, 5)"; do not use dashes. When you are done, please conclude your response with "====="
### Grounded Answer:"#;

const CLOSED_BOOK: &str = r#"Question: $Question
### Please answer the Question as best as you can. Conclude your Answer with "=====".
### Answer:"#;

const CORRUPT_CLAIMS: &str = r#"### Question: $Question
### Evidence: $EvidencePassages
### Answer: $Answer
### Instructions: 1) List the factual and verifiable claims in the above Answer between <Claim> and </Claim> tags. If there are none, output a blank string: <Claim></Claim>.
Then 2) Corrupt some of the above Claims in a believable way by either inverting their meaning, changing numbers in them, or altering them using related concepts. List the new corrupted facts between <CorruptedClaim> and </CorruptedClaim> tags.
Then 3) rewrite the Answer between <CorruptedAnswer> and </CorruptedAnswer> tags to have both obvious and subtle flaws using the corrupted facts. When you are finished, please conclude your response with "====="."#;

const IRRELEVANT_GROUNDING: &str = r#"### Consider the evidence offered in the following Passages:
### Evidence: $EvidencePassages
### Question: $Question
### Instructions: Please answer the Question: "$Question" using *only* the information stated in the Passages above. Even if you think your own knowledge would be better than what the Passages say, do not incorporate external information outside of what is in the Passages. Please cite Passages in parentheses e.g. "(Passage 4)" or "(Passage 4, 5)". When you are done, please conclude your response with "====="
### Answer:"#;

const COMBINE_ANSWERS: &str = r#"### Below you are given a Question and two candidate answers, Answer A and Answer B
### Question: $Question
### Answer A: $AnswerA
### Answer B: $AnswerB
### Instructions: Above are two answers to the question: "$Question". Please read them carefully and output an improved answer to the question; you may choose to incorporate elements from both or either Answer A and Answer B into the new answer as appropriate, or include additional information not present in the answers if it provides value-add. When you are finished, conclude your revised answer with "=====".
Improved Answer:"#;

const CRITIQUE_THEN_SCORE: &str = r#"Below you are given a Question and two candidate Answers, Answer A and Answer B.
### Question: $Question

### Answer A: $AnswerA

### Answer B: $AnswerB

### Keep in mind the following Guidelines when evaluating the Answers:

Guidelines:
- Usefulness: A Useful answer adds value by providing in-depth analysis, actionable steps, and relevant information that helps users make informed decisions, complete tasks, and understand complex problems in a simpler way. It also considers real-world scenarios, cause and effect relationships, and historical context to enhance the user's understanding.
- Relevance: A Relevant answer directly addresses the question's intent in a sensible and specific manner, without being overly broad, redundant, or distracting. It should be clear, on-topic, and provide helpful information tailored to the question asked.
- Truthfulness: Truthfulness in an answer means providing accurate and verifiable information, without making false claims, unverifiable statements, or promoting misleading information. It should be based on facts and reliable sources, and openly address any misconceptions or biases in the question's premise.
- Groundedness: A Grounded answer provides information supported by reliable sources and follows a logical chain of reasoning, instilling confidence in its accuracy. The answer should be based on credible evidence, address uncertainties, and avoid relying on personal opinions, rumors, or hearsay.
- Thoroughness involves considering the full scope of a question, addressing multiple perspectives, scenarios, and outcomes, and ensuring all important aspects are covered without omission. It requires analyzing pros and cons, empathizing with various stakeholders, and addressing different interpretations or facets of a question.

### Instructions: Above are two Answers to the Question: "$Question". Please read them carefully along with the Guidelines for how to evaluate an answer's quality. Then:
1) Thoroughly *critique* each Answer with respect to the Guidelines, formatted in *bullet points* between "<CritiqueA>" and "</CritiqueA>", "<CritiqueB>" and "</CritiqueB>". Each bullet is between sub-tags of either <strength>, <weakness>, or <missinginfo>. A <strength> is where the Answer makes a good point that follows the Guidelines and contributes to a helpful response. A <weakness> is where the Answer makes an incorrect, irrelevant, unreasonable or overly broad claim that fails to address the full scope of the Question, or otherwise falls short of the Guidelines. <missinginfo> is when some key event, facts or other material information is omitted but should have included to strengthen the Answer.
2) *Explain* which Answer is better and why, i.e. how well it adheres to the Guidelines, between "<Explanation>" and "</Explanation>" tags.
3) Finally, *score* each Answer on 1-100, where 100 is a perfect Answer. Indicate the score between "<ScoreA>" and "</ScoreA>", "<ScoreB>" and "</ScoreB>" tags."
When you are finished, conclude your response with "=====".

<CritiqueA>"#;

/// Substitute `$Name` placeholders. Every placeholder in the template must
/// have a binding; substitution is byte-exact.
pub fn render_prompt(template_id: TemplateId, bindings: &BTreeMap<String, String>) -> Result<String> {
    render_template(template_id.text(), bindings)
}

fn render_template(template: &str, bindings: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos + 1..];
        let name: String = rest
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
            .collect();
        if name.is_empty() {
            out.push('$');
            continue;
        }
        match bindings.get(&name) {
            Some(value) => out.push_str(value),
            None => return Err(Error::Template { placeholder: name }),
        }
        rest = &rest[name.len()..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenParams {
    fn default() -> Self {
        // temperature 0 everywhere: reproducibility beats variety here
        GenParams {
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub raw: String,
    pub truncated: String,
    pub provider_meta: BTreeMap<String, String>,
}

pub fn prompt_hash(prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    format!("{:x}", hasher.finalize())
}

/// Cut the response at the first terminator sequence.
pub fn truncate_at_terminator(raw: &str) -> (&str, bool) {
    match raw.find(TERMINATOR) {
        Some(pos) => (&raw[..pos], true),
        None => (raw, false),
    }
}

pub trait TextProvider: Send + Sync {
    fn name(&self) -> &'static str;
    fn complete_raw(&self, prompt: &str, params: &GenParams) -> Result<String>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixtureRecord {
    prompt_hash: String,
    raw: String,
}

/// Recorded responses, line-delimited JSON `{prompt_hash, raw}`.
#[derive(Debug, Default)]
pub struct FixtureStore {
    records: HashMap<String, String>,
}

impl FixtureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut records = HashMap::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                message: format!("fixture line {}: {}", lineno + 1, e),
                offset: Some(lineno),
            })?;
            records.insert(rec.prompt_hash, rec.raw);
        }
        Ok(FixtureStore { records })
    }

    pub fn get(&self, hash: &str) -> Option<&String> {
        self.records.get(hash)
    }

    pub fn insert(&mut self, hash: String, raw: String) {
        self.records.insert(hash, raw);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Write all records sorted by hash so the file is reproducible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut hashes: Vec<&String> = self.records.keys().collect();
        hashes.sort();
        let mut file = std::fs::File::create(path)?;
        for hash in hashes {
            let rec = FixtureRecord {
                prompt_hash: hash.clone(),
                raw: self.records[hash].clone(),
            };
            serde_json::to_writer(&mut file, &rec).map_err(|e| Error::Parse {
                message: e.to_string(),
                offset: None,
            })?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Replays recorded responses; a miss is an error naming the hash so stale
/// fixtures fail loudly instead of silently regenerating.
pub struct FixtureProvider {
    store: FixtureStore,
}

impl FixtureProvider {
    pub fn new(store: FixtureStore) -> Self {
        Self { store }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(Self::new(FixtureStore::load(path)?))
    }
}

impl TextProvider for FixtureProvider {
    fn name(&self) -> &'static str {
        "fixture"
    }

    fn complete_raw(&self, prompt: &str, _params: &GenParams) -> Result<String> {
        let hash = prompt_hash(prompt);
        self.store
            .get(&hash)
            .cloned()
            .ok_or(Error::FixtureMiss { hash })
    }
}

/// Wraps another provider and appends every (hash, response) to a fixture
/// store on disk. Single writer; the mutex serializes appends.
pub struct RecordingProvider {
    inner: Box<dyn TextProvider>,
    state: Mutex<FixtureStore>,
    path: PathBuf,
}

impl RecordingProvider {
    pub fn new(inner: Box<dyn TextProvider>, path: PathBuf) -> Result<Self> {
        let state = if path.exists() {
            FixtureStore::load(&path)?
        } else {
            FixtureStore::new()
        };
        Ok(Self {
            inner,
            state: Mutex::new(state),
            path,
        })
    }
}

impl TextProvider for RecordingProvider {
    fn name(&self) -> &'static str {
        "recording"
    }

    fn complete_raw(&self, prompt: &str, params: &GenParams) -> Result<String> {
        let raw = self.inner.complete_raw(prompt, params)?;
        let mut store = self.state.lock().expect("fixture store poisoned");
        store.insert(prompt_hash(prompt), raw.clone());
        store.save(&self.path)?;
        Ok(raw)
    }
}

/// Token-bucket rate limiter, `requests_per_minute` sustained.
pub struct TokenBucket {
    state: Mutex<BucketState>,
    capacity: f64,
    refill_per_sec: f64,
}

struct BucketState {
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn per_minute(requests_per_minute: u32) -> Self {
        let capacity = f64::from(requests_per_minute.max(1));
        TokenBucket {
            state: Mutex::new(BucketState {
                tokens: capacity,
                last: Instant::now(),
            }),
            capacity,
            refill_per_sec: capacity / 60.0,
        }
    }

    /// Block until a request token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("token bucket poisoned");
                let now = Instant::now();
                let elapsed = now.duration_since(st.last).as_secs_f64();
                st.tokens = (st.tokens + elapsed * self.refill_per_sec).min(self.capacity);
                st.last = now;
                if st.tokens >= 1.0 {
                    st.tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.tokens) / self.refill_per_sec)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Chat-completion provider over a generic HTTP JSON interface:
/// request `{model, messages, temperature, max_tokens}`, response `{text}`.
pub struct HttpChatProvider {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub rate: TokenBucket,
}

impl TextProvider for HttpChatProvider {
    fn name(&self) -> &'static str {
        "http"
    }

    fn complete_raw(&self, prompt: &str, params: &GenParams) -> Result<String> {
        self.rate.acquire();
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
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
            text: String,
        }
        let reply: Reply = response.into_json().map_err(|e| Error::Transport {
            message: format!("bad completion response: {e}"),
            attempts: 1,
            retryable: false,
        })?;
        Ok(reply.text)
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 250,
        }
    }
}

/// Front door for generation: renders templates, calls the provider with
/// retry on transient failures, and truncates at the terminator.
pub struct Gateway {
    provider: Box<dyn TextProvider>,
    pub params: GenParams,
    pub retry: RetryPolicy,
    pub model_label: String,
}

impl Gateway {
    pub fn new(provider: Box<dyn TextProvider>, params: GenParams) -> Self {
        Gateway {
            provider,
            params,
            retry: RetryPolicy::default(),
            model_label: String::new(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_model_label(mut self, label: impl Into<String>) -> Self {
        self.model_label = label.into();
        self
    }

    pub fn provider_name(&self) -> &'static str {
        self.provider.name()
    }

    pub fn complete(&self, prompt: &str) -> Result<GenerationResult> {
        if prompt.is_empty() {
            return Err(Error::contract("prompt must be non-empty"));
        }
        let mut attempt = 0;
        let raw = loop {
            attempt += 1;
            match self.provider.complete_raw(prompt, &self.params) {
                Ok(raw) => break raw,
                Err(Error::Transport {
                    retryable: true, ..
                }) if attempt < self.retry.max_attempts => {
                    let delay = self.retry.base_delay_ms * (1 << (attempt - 1));
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(Error::Transport { message, retryable, .. }) => {
                    return Err(Error::Transport {
                        message,
                        attempts: attempt,
                        retryable,
                    })
                }
                Err(other) => return Err(other),
            }
        };
        let (truncated, found) = truncate_at_terminator(&raw);
        let mut provider_meta = BTreeMap::new();
        provider_meta.insert("provider".to_string(), self.provider.name().to_string());
        provider_meta.insert("prompt_hash".to_string(), prompt_hash(prompt));
        if !self.model_label.is_empty() {
            provider_meta.insert("model".to_string(), self.model_label.clone());
        }
        if !found {
            provider_meta.insert("terminator_missing".to_string(), "true".to_string());
        }
        Ok(GenerationResult {
            raw: raw.clone(),
            truncated: truncated.to_string(),
            provider_meta,
        })
    }

    /// Render a template and complete it in one step.
    pub fn generate(
        &self,
        template_id: TemplateId,
        bindings: &BTreeMap<String, String>,
    ) -> Result<GenerationResult> {
        let prompt = render_prompt(template_id, bindings)?;
        let mut result = self.complete(&prompt)?;
        result
            .provider_meta
            .insert("template".to_string(), format!("{template_id:?}"));
        Ok(result)
    }
}

/// Contents of each well-formed `<tag>…</tag>` span, in order, trimmed.
pub fn parse_tagged(text: &str, tag: &str) -> Result<Vec<String>> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut spans = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find(&open) {
        let start = cursor + rel;
        let content_start = start + open.len();
        match text[content_start..].find(&close) {
            Some(rel_close) => {
                let content = &text[content_start..content_start + rel_close];
                spans.push(content.trim().to_string());
                cursor = content_start + rel_close + close.len();
            }
            None => {
                return Err(Error::Parse {
                    message: format!("unbalanced <{tag}>"),
                    offset: Some(start),
                })
            }
        }
    }
    Ok(spans)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CritiqueScores {
    pub score_a: i64,
    pub score_b: i64,
    pub critique_a: String,
    pub critique_b: String,
}

/// Extract 1-100 scores and critiques from a critique-then-score response.
/// Scores are strict (they gate margins); critiques are informational, so a
/// missing critique span only produces a warning.
pub fn parse_critique_scores(text: &str) -> Result<(CritiqueScores, Vec<String>)> {
    let score_a = parse_score(text, "ScoreA")?;
    let score_b = parse_score(text, "ScoreB")?;
    let mut warnings = Vec::new();
    let critique_a = first_span_or_warn(text, "CritiqueA", &mut warnings)?;
    let critique_b = first_span_or_warn(text, "CritiqueB", &mut warnings)?;
    Ok((
        CritiqueScores {
            score_a,
            score_b,
            critique_a,
            critique_b,
        },
        warnings,
    ))
}

fn parse_score(text: &str, tag: &str) -> Result<i64> {
    let spans = parse_tagged(text, tag)?;
    let span = spans.first().ok_or_else(|| Error::Parse {
        message: format!("missing <{tag}>"),
        offset: None,
    })?;
    let value: i64 = span.trim().parse().map_err(|_| Error::Parse {
        message: format!("non-integer <{tag}>: {span:?}"),
        offset: None,
    })?;
    if !(1..=100).contains(&value) {
        return Err(Error::Range(format!("<{tag}> = {value}, expected 1-100")));
    }
    Ok(value)
}

fn first_span_or_warn(text: &str, tag: &str, warnings: &mut Vec<String>) -> Result<String> {
    // tolerate a missing close tag here too; critique text is best-effort
    match parse_tagged(text, tag) {
        Ok(spans) => match spans.into_iter().next() {
            Some(span) => Ok(span),
            None => {
                warnings.push(format!("missing <{tag}>"));
                Ok(String::new())
            }
        },
        Err(_) => {
            warnings.push(format!("unbalanced <{tag}>"));
            Ok(String::new())
        }
    }
}

/// Deterministic stand-in for a real chat model. It recognizes which
/// template produced the prompt and fabricates a response with the right
/// structure, derived entirely from the prompt text and the provider seed.
pub struct SyntheticProvider {
    pub seed: u64,
}

impl SyntheticProvider {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn mix(&self, prompt: &str) -> u64 {
        fnv1a64(prompt.as_bytes()) ^ self.seed.rotate_left(29)
    }
}

fn section<'t>(prompt: &'t str, header: &str, stops: &[&str]) -> Option<&'t str> {
    let start = prompt.find(header)? + header.len();
    let rest = &prompt[start..];
    let end = stops
        .iter()
        .filter_map(|s| rest.find(s))
        .min()
        .unwrap_or(rest.len());
    Some(rest[..end].trim())
}

impl TextProvider for SyntheticProvider {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn complete_raw(&self, prompt: &str, _params: &GenParams) -> Result<String> {
        let h = self.mix(prompt);
        if prompt.contains("### Grounded Answer:") {
            let evidence = section(prompt, "### Evidence:", &["### Question:"]).unwrap_or("");
            let question = section(prompt, "### Question:", &["### Instructions:"]).unwrap_or("");
            let mut out = format!("Regarding \"{question}\": ");
            for (i, sentence) in split_sentences(evidence).iter().take(3).enumerate() {
                out.push_str(&format!("{} (Passage {}). ", sentence.trim_end_matches('.'), i + 1));
            }
            out.push_str("In short, the cited passages support this conclusion. =====");
            Ok(out)
        } else if prompt.contains("### Please answer the Question as best as you can.") {
            let question = section(prompt, "Question:", &["### Please answer"]).unwrap_or("");
            let hedge = ["Generally speaking", "In most cases", "Broadly"][(h % 3) as usize];
            Ok(format!(
                "{hedge}, {question} comes down to a few known considerations. \
                 A practical rule of thumb is option {}. Checking primary sources is advised. =====",
                (h % 7) + 1
            ))
        } else if prompt.contains("List the factual and verifiable claims") {
            let answer = section(prompt, "### Answer:", &["### Instructions:"]).unwrap_or("");
            let sentences = split_sentences(answer);
            if sentences.is_empty() {
                return Ok("<Claim></Claim> =====".to_string());
            }
            let mut claims = String::new();
            let mut corrupted = String::new();
            let mut rewritten = String::new();
            for (i, s) in sentences.iter().take(4).enumerate() {
                let twist = corrupt_sentence(s, h.wrapping_add(i as u64));
                claims.push_str(&format!("<Claim>{s}</Claim>\n"));
                corrupted.push_str(&format!("<CorruptedClaim>{twist}</CorruptedClaim>\n"));
                rewritten.push_str(&twist);
                rewritten.push(' ');
            }
            Ok(format!(
                "{claims}{corrupted}<CorruptedAnswer>{}</CorruptedAnswer> =====",
                rewritten.trim()
            ))
        } else if prompt.contains("Improved Answer:") {
            let a = section(prompt, "### Answer A:", &["### Answer B:"]).unwrap_or("");
            let b = section(prompt, "### Answer B:", &["### Instructions:"]).unwrap_or("");
            let take_a = split_sentences(a);
            let take_b = split_sentences(b);
            let na = take_a.len().div_ceil(2);
            let nb = take_b.len().div_ceil(2);
            let mut out = String::new();
            for s in take_a.iter().take(na) {
                out.push_str(s);
                out.push(' ');
            }
            out.push_str("Moreover, ");
            for s in take_b.iter().take(nb) {
                out.push_str(s);
                out.push(' ');
            }
            out.push_str("Taken together these points give a fuller picture. =====");
            Ok(out)
        } else if prompt.contains("Keep in mind the following Guidelines") {
            // completes after the seeded <CritiqueA> tag, so no opening tag
            // here; scores lean on length and citations, like a real judge
            let a = section(prompt, "### Answer A:", &["### Answer B:"]).unwrap_or("");
            let b = section(prompt, "### Answer B:", &["### Keep in mind"]).unwrap_or("");
            let grade = |text: &str, noise: u64| -> i64 {
                let words = text.split_whitespace().count() as i64;
                let cites = if text.contains("(Passage") { 12 } else { 0 };
                (38 + words.min(400) / 12 + cites + (noise % 13) as i64).min(100)
            };
            let score_a = grade(a, h);
            let score_b = grade(b, h >> 21);
            Ok(format!(
                "<strength>clear structure</strength>\n<weakness>light on sources</weakness>\n</CritiqueA>\n\
                 <CritiqueB><strength>direct</strength>\n<weakness>narrow scope</weakness></CritiqueB>\n\
                 <Explanation>Answer {} covers the question more fully.</Explanation>\n\
                 <ScoreA>{score_a}</ScoreA> <ScoreB>{score_b}</ScoreB> =====",
                if score_a >= score_b { "A" } else { "B" }
            ))
        } else if prompt.contains("using *only* the information stated in the Passages above") {
            let evidence = section(prompt, "### Evidence:", &["### Question:"]).unwrap_or("");
            let mut out = String::from("Based strictly on the passages: ");
            for (i, sentence) in split_sentences(evidence).iter().take(3).enumerate() {
                out.push_str(&format!("{} (Passage {}). ", sentence.trim_end_matches('.'), i + 1));
            }
            out.push_str("Nothing beyond the passages is used. =====");
            Ok(out)
        } else {
            Ok(format!("Synthetic response {h:016x}. ====="))
        }
    }
}

fn corrupt_sentence(sentence: &str, h: u64) -> String {
    // invert meaning or bump a number, whichever applies first
    let mut tokens: Vec<String> = sentence.split_whitespace().map(str::to_string).collect();
    for tok in tokens.iter_mut() {
        if let Ok(num) = tok.trim_matches(|c: char| !c.is_ascii_digit()).parse::<i64>() {
            if !tok.trim_matches(|c: char| !c.is_ascii_digit()).is_empty() {
                let bumped = num + 1 + (h % 3) as i64;
                *tok = tok.replace(&num.to_string(), &bumped.to_string());
                return tokens.join(" ");
            }
        }
    }
    for (i, tok) in tokens.iter().enumerate() {
        if matches!(tok.to_lowercase().as_str(), "is" | "are" | "was" | "can" | "does" | "will") {
            let mut out = tokens.clone();
            out.insert(i + 1, "not".to_string());
            return out.join(" ");
        }
    }
    tokens.insert(0, "Contrary to common belief,".to_string());
    tokens.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn combine_template_substitutes_both_answers() {
        let rendered = render_prompt(
            TemplateId::CombineAnswers,
            &bind(&[
                ("Question", "why?"),
                ("AnswerA", "first body"),
                ("AnswerB", "second body"),
            ]),
        )
        .unwrap();
        assert!(rendered.contains("first body"));
        assert!(rendered.contains("second body"));
        assert!(!rendered.contains('$'));
    }

    #[test]
    fn missing_binding_names_the_placeholder() {
        let err = render_prompt(
            TemplateId::CombineAnswers,
            &bind(&[("AnswerA", "a"), ("AnswerB", "b")]),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "unbound placeholder: Question");
    }

    #[test]
    fn grounded_template_keeps_citation_instructions() {
        let text = TemplateId::GroundedAnswer.text();
        assert!(text.contains("cites salient information stated in"));
        assert!(text.contains("cite Passages in parentheses"));
    }

    #[test]
    fn corruption_template_names_the_claim_tags() {
        let text = TemplateId::CorruptClaims.text();
        assert!(text.contains("between <Claim> and </Claim> tags"));
        assert!(text.contains("output a blank string: <Claim></Claim>"));
    }

    #[test]
    fn truncation_stops_at_terminator() {
        assert_eq!(truncate_at_terminator("foo =====tail"), ("foo ", true));
        assert_eq!(truncate_at_terminator("no end"), ("no end", false));
    }

    #[test]
    fn gateway_notes_missing_terminator() {
        struct Echo;
        impl TextProvider for Echo {
            fn name(&self) -> &'static str {
                "echo"
            }
            fn complete_raw(&self, prompt: &str, _p: &GenParams) -> Result<String> {
                Ok(prompt.to_string())
            }
        }
        let gw = Gateway::new(Box::new(Echo), GenParams::default());
        let r = gw.complete("plain").unwrap();
        assert_eq!(r.truncated, "plain");
        assert_eq!(r.provider_meta.get("terminator_missing").map(String::as_str), Some("true"));
    }

    #[test]
    fn empty_prompt_is_a_contract_error() {
        let gw = Gateway::new(Box::new(SyntheticProvider::new(0)), GenParams::default());
        assert!(matches!(gw.complete(""), Err(Error::Contract(_))));
    }

    #[test]
    fn token_bucket_grants_burst_then_throttles() {
        let bucket = TokenBucket::per_minute(600); // 10/s, capacity 600
        let start = std::time::Instant::now();
        for _ in 0..5 {
            bucket.acquire();
        }
        assert!(start.elapsed() < Duration::from_millis(50));

        let tiny = TokenBucket::per_minute(6000); // 100/s refill
        {
            let mut st = tiny.state.lock().unwrap();
            st.tokens = 0.0;
        }
        let start = std::time::Instant::now();
        tiny.acquire();
        // had to wait roughly one refill interval (10ms at 100/s)
        assert!(start.elapsed() >= Duration::from_millis(5));
    }

    #[test]
    fn fixture_provider_replays_and_misses_loudly() {
        let mut store = FixtureStore::new();
        store.insert(prompt_hash("hello"), "world =====".to_string());
        let gw = Gateway::new(Box::new(FixtureProvider::new(store)), GenParams::default());
        let a = gw.complete("hello").unwrap();
        let b = gw.complete("hello").unwrap();
        assert_eq!(a.truncated, b.truncated);
        assert_eq!(a.truncated, "world ");

        match gw.complete("unseen") {
            Err(Error::FixtureMiss { hash }) => assert_eq!(hash, prompt_hash("unseen")),
            other => panic!("expected fixture miss, got {other:?}"),
        }
    }

    #[test]
    fn fixture_store_round_trips_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixtures.jsonl");
        let mut store = FixtureStore::new();
        store.insert("bb".into(), "two".into());
        store.insert("aa".into(), "one".into());
        store.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.contains("\"aa\""));
        let loaded = FixtureStore::load(&path).unwrap();
        assert_eq!(loaded.get("bb").map(String::as_str), Some("two"));
    }

    #[test]
    fn retry_exhaustion_reports_attempts() {
        struct Flaky;
        impl TextProvider for Flaky {
            fn name(&self) -> &'static str {
                "flaky"
            }
            fn complete_raw(&self, _prompt: &str, _p: &GenParams) -> Result<String> {
                Err(Error::Transport {
                    message: "503".into(),
                    attempts: 1,
                    retryable: true,
                })
            }
        }
        let gw = Gateway::new(Box::new(Flaky), GenParams::default()).with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 0,
        });
        match gw.complete("x") {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn parse_tagged_extracts_in_order() {
        let spans = parse_tagged("<Claim>a</Claim><Claim> b </Claim>", "Claim").unwrap();
        assert_eq!(spans, vec!["a", "b"]);
    }

    #[test]
    fn blank_span_is_a_legal_signal() {
        assert_eq!(parse_tagged("<Claim></Claim>", "Claim").unwrap(), vec![""]);
    }

    #[test]
    fn unbalanced_tag_reports_offset() {
        match parse_tagged("xx<Claim>a", "Claim") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, Some(2)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn critique_scores_parse() {
        let (scores, warnings) = parse_critique_scores(
            "<CritiqueA>ca</CritiqueA><CritiqueB>cb</CritiqueB><ScoreA>87</ScoreA><ScoreB>62</ScoreB>",
        )
        .unwrap();
        assert_eq!(scores.score_a, 87);
        assert_eq!(scores.score_b, 62);
        assert_eq!(scores.critique_a, "ca");
        assert!(warnings.is_empty());
    }

    #[test]
    fn out_of_range_score_is_rejected() {
        let err =
            parse_critique_scores("<ScoreA>101</ScoreA><ScoreB>50</ScoreB>").unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn missing_critique_is_lenient() {
        let (scores, warnings) = parse_critique_scores(
            "<CritiqueA>ca</CritiqueA><ScoreA>70</ScoreA><ScoreB>60</ScoreB>",
        )
        .unwrap();
        assert_eq!(scores.critique_b, "");
        assert!(warnings.iter().any(|w| w.contains("CritiqueB")));
    }

    #[test]
    fn synthetic_corruption_response_is_well_formed() {
        let p = SyntheticProvider::new(11);
        let bindings = bind(&[
            ("Question", "Why do leaves change color?"),
            ("EvidencePassages", "Passage 1: Chlorophyll breaks down in autumn."),
            ("Answer", "Chlorophyll masks other pigments. It degrades when days shorten. Carotenoids are 2 times more stable."),
        ]);
        let prompt = render_prompt(TemplateId::CorruptClaims, &bindings).unwrap();
        let raw = p.complete_raw(&prompt, &GenParams::default()).unwrap();
        let (truncated, found) = truncate_at_terminator(&raw);
        assert!(found);
        let claims = parse_tagged(truncated, "Claim").unwrap();
        let corrupted = parse_tagged(truncated, "CorruptedClaim").unwrap();
        let answer = parse_tagged(truncated, "CorruptedAnswer").unwrap();
        assert_eq!(claims.len(), corrupted.len());
        assert_eq!(answer.len(), 1);
        assert_ne!(answer[0], bindings["Answer"]);
        // deterministic
        let again = p.complete_raw(&prompt, &GenParams::default()).unwrap();
        assert_eq!(raw, again);
    }

    proptest! {
        #[test]
        fn truncated_never_contains_terminator(
            prefix in "[a-z =]{0,40}",
            suffix in "[a-z =]{0,40}",
            with_term in proptest::bool::ANY,
        ) {
            let raw = if with_term {
                format!("{prefix}====={suffix}")
            } else {
                // strip any accidental full terminator from the random text
                prefix.replace("=====", "=")
            };
            let (truncated, _) = truncate_at_terminator(&raw);
            prop_assert!(!truncated.contains(TERMINATOR));
        }

        #[test]
        fn render_then_parse_recovers_tag_contents(
            payloads in prop::collection::vec("[a-zA-Z0-9 ,.]{0,30}", 1..5),
        ) {
            // tags injected through a template binding come back out exactly
            let tagged: String = payloads
                .iter()
                .map(|p| format!("<Claim>{p}</Claim>"))
                .collect();
            let rendered = render_prompt(
                TemplateId::CorruptClaims,
                &bind(&[
                    ("Question", "q"),
                    ("EvidencePassages", "e"),
                    ("Answer", tagged.as_str()),
                ]),
            ).unwrap();
            let spans = parse_tagged(&rendered, "Claim").unwrap();
            // the $Answer section precedes the instructions, which themselves
            // contain "<Claim> and </Claim>" plus the blank example span
            let expected: Vec<String> = payloads
                .iter()
                .map(|p| p.trim().to_string())
                .chain(["and".to_string(), String::new()])
                .collect();
            prop_assert_eq!(spans, expected);
        }
    }
}
