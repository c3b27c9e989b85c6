//! Ingest, filter, and subsample CQA-style archives into normalized
//! question/answer records.
//!
//! Two input formats are supported: Stack-Exchange-style `Posts` XML rows
//! (PostTypeId/ParentId/Score/Body attributes) and line-delimited JSON.
//! Malformed rows are counted, never fatal; orphan answers are dropped so the
//! output always has referential integrity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::str::FromStr;

use quick_xml::events::Event;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{derive_seed, strip_html};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuestionRecord {
    pub id: String,
    pub forum: String,
    pub title: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnswerRecord {
    pub id: String,
    pub question_id: String,
    pub body: String,
    pub upvotes: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author_id: Option<String>,
}

impl QuestionRecord {
    /// Title plus body, the text fed to prompts and featurization.
    pub fn full_text(&self) -> String {
        if self.body.trim().is_empty() {
            self.title.clone()
        } else {
            format!("{}\n{}", self.title, self.body)
        }
    }
}

/// A question with its answers; the unit the downstream pair constructors
/// operate on.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Post {
    pub question: QuestionRecord,
    pub answers: Vec<AnswerRecord>,
}

impl Post {
    /// Answers ordered by (upvotes desc, id asc); the stable order every
    /// upvote-ranked construction uses.
    pub fn answers_by_upvotes(&self) -> Vec<&AnswerRecord> {
        let mut refs: Vec<&AnswerRecord> = self.answers.iter().collect();
        refs.sort_by(|a, b| b.upvotes.cmp(&a.upvotes).then_with(|| a.id.cmp(&b.id)));
        refs
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub posts: Vec<Post>,
}

impl Corpus {
    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn post(&self, question_id: &str) -> Option<&Post> {
        self.posts.iter().find(|p| p.question.id == question_id)
    }

    pub fn stats(&self) -> CorpusStats {
        let mut per_forum = BTreeMap::new();
        let mut num_answers = 0usize;
        for post in &self.posts {
            *per_forum.entry(post.question.forum.clone()).or_insert(0) += 1;
            num_answers += post.answers.len();
        }
        let num_questions = self.posts.len();
        CorpusStats {
            num_questions,
            num_answers,
            answers_per_question_mean: if num_questions == 0 {
                0.0
            } else {
                num_answers as f64 / num_questions as f64
            },
            per_forum,
        }
    }

    /// Serialize as line-delimited JSON, one post per line.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for post in &self.posts {
            serde_json::to_writer(&mut w, post).map_err(|e| Error::Parse {
                message: e.to_string(),
                offset: None,
            })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Corpus> {
        let mut posts = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let post: Post = serde_json::from_str(&line).map_err(|e| Error::Parse {
                message: format!("corpus line {}: {}", lineno + 1, e),
                offset: Some(lineno),
            })?;
            posts.push(post);
        }
        Ok(Corpus { posts })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_questions: usize,
    pub num_answers: usize,
    pub answers_per_question_mean: f64,
    pub per_forum: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveFormat {
    XmlRows,
    Jsonl,
}

impl FromStr for ArchiveFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xml-rows" => Ok(ArchiveFormat::XmlRows),
            "jsonl" => Ok(ArchiveFormat::Jsonl),
            other => Err(Error::config(format!("unknown archive format: {other}"))),
        }
    }
}

#[derive(Debug)]
pub struct ParsedArchive {
    pub questions: Vec<QuestionRecord>,
    pub answers: Vec<AnswerRecord>,
    pub skipped: usize,
}

impl ParsedArchive {
    /// Group answers under their questions, preserving question input order.
    pub fn into_corpus(self) -> Corpus {
        let mut by_question: HashMap<String, Vec<AnswerRecord>> = HashMap::new();
        for answer in self.answers {
            by_question
                .entry(answer.question_id.clone())
                .or_default()
                .push(answer);
        }
        let posts = self
            .questions
            .into_iter()
            .map(|question| {
                let answers = by_question.remove(&question.id).unwrap_or_default();
                Post { question, answers }
            })
            .collect();
        Corpus { posts }
    }
}

/// Parse an archive of posts. Every returned answer references a returned
/// question; rows that cannot be normalized are counted in `skipped`.
///
/// Ids are namespaced by forum (`forum/raw_id`) to keep them globally unique
/// when multiple archives are merged.
pub fn parse_archive<R: BufRead>(
    source: R,
    format: ArchiveFormat,
    default_forum: &str,
) -> Result<ParsedArchive> {
    let (mut questions, mut answers, mut skipped) = match format {
        ArchiveFormat::XmlRows => parse_xml_rows(source, default_forum)?,
        ArchiveFormat::Jsonl => parse_jsonl(source, default_forum)?,
    };

    // referential integrity: drop orphan answers, duplicate ids
    let mut seen_q = HashSet::new();
    questions.retain(|q| {
        let fresh = seen_q.insert(q.id.clone());
        if !fresh {
            skipped += 1;
        }
        fresh
    });
    let mut seen_a = HashSet::new();
    answers.retain(|a| {
        if !seen_q.contains(&a.question_id) || !seen_a.insert(a.id.clone()) {
            skipped += 1;
            false
        } else {
            true
        }
    });

    Ok(ParsedArchive {
        questions,
        answers,
        skipped,
    })
}

type RawRecords = (Vec<QuestionRecord>, Vec<AnswerRecord>, usize);

fn parse_xml_rows<R: BufRead>(source: R, forum: &str) -> Result<RawRecords> {
    let mut reader = quick_xml::Reader::from_reader(source);
    reader.trim_text(true);
    let mut buf = Vec::new();
    let mut questions = Vec::new();
    let mut answers = Vec::new();
    let mut skipped = 0usize;

    loop {
        match reader.read_event_into(&mut buf) {
            Ok(Event::Empty(e)) | Ok(Event::Start(e)) => {
                if e.name().as_ref() != b"row" {
                    buf.clear();
                    continue;
                }
                let mut attrs: HashMap<String, String> = HashMap::new();
                let mut bad = false;
                for attr in e.attributes() {
                    match attr {
                        Ok(a) => {
                            let key = String::from_utf8_lossy(a.key.as_ref()).to_string();
                            match a.unescape_value() {
                                Ok(v) => {
                                    attrs.insert(key, v.to_string());
                                }
                                Err(_) => bad = true,
                            }
                        }
                        Err(_) => bad = true,
                    }
                }
                if bad || !ingest_xml_row(&attrs, forum, &mut questions, &mut answers) {
                    skipped += 1;
                }
            }
            Ok(Event::Eof) => break,
            Ok(_) => {}
            Err(e) => {
                return Err(Error::Parse {
                    message: format!("xml: {e}"),
                    offset: Some(reader.buffer_position()),
                })
            }
        }
        buf.clear();
    }
    Ok((questions, answers, skipped))
}

fn ingest_xml_row(
    attrs: &HashMap<String, String>,
    forum: &str,
    questions: &mut Vec<QuestionRecord>,
    answers: &mut Vec<AnswerRecord>,
) -> bool {
    let id = match attrs.get("Id") {
        Some(id) => id,
        None => return false,
    };
    let body = strip_html(attrs.get("Body").map(String::as_str).unwrap_or(""));
    match attrs.get("PostTypeId").map(String::as_str) {
        Some("1") => {
            let title = strip_html(attrs.get("Title").map(String::as_str).unwrap_or(""));
            if title.is_empty() {
                return false;
            }
            questions.push(QuestionRecord {
                id: format!("{forum}/{id}"),
                forum: forum.to_string(),
                title,
                body,
                created: attrs.get("CreationDate").cloned(),
            });
            true
        }
        Some("2") => {
            let parent = match attrs.get("ParentId") {
                Some(p) => p,
                None => return false,
            };
            let upvotes = match attrs.get("Score").map(|s| s.parse::<i64>()) {
                Some(Ok(v)) => v,
                _ => return false,
            };
            if body.is_empty() {
                return false;
            }
            answers.push(AnswerRecord {
                id: format!("{forum}/{id}"),
                question_id: format!("{forum}/{parent}"),
                body,
                upvotes,
                author_id: attrs.get("OwnerUserId").map(|u| format!("{forum}/{u}")),
            });
            true
        }
        // other post types (wiki, tag info, ...) are not Q/A material
        _ => false,
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    #[serde(default)]
    question_id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    body: String,
    #[serde(default)]
    upvotes: Option<i64>,
    #[serde(default)]
    forum: Option<String>,
    #[serde(default)]
    author_id: Option<String>,
    #[serde(default)]
    created: Option<String>,
}

fn parse_jsonl<R: BufRead>(source: R, default_forum: &str) -> Result<RawRecords> {
    let mut questions = Vec::new();
    let mut answers = Vec::new();
    let mut skipped = 0usize;

    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let forum = record.forum.as_deref().unwrap_or(default_forum).to_string();
        match record.question_id {
            Some(parent) => {
                let body = strip_html(&record.body);
                let upvotes = match record.upvotes {
                    Some(v) => v,
                    None => {
                        skipped += 1;
                        continue;
                    }
                };
                if body.is_empty() {
                    skipped += 1;
                    continue;
                }
                answers.push(AnswerRecord {
                    id: format!("{forum}/{}", record.id),
                    question_id: format!("{forum}/{parent}"),
                    body,
                    upvotes,
                    author_id: record.author_id,
                });
            }
            None => {
                let title = strip_html(record.title.as_deref().unwrap_or(""));
                if title.is_empty() {
                    skipped += 1;
                    continue;
                }
                questions.push(QuestionRecord {
                    id: format!("{forum}/{}", record.id),
                    forum,
                    title,
                    body: strip_html(&record.body),
                    created: record.created,
                });
            }
        }
    }
    Ok((questions, answers, skipped))
}

/// Keep posts with at least `min_answers` answers, at least one positively
/// upvoted answer, and at least one ordered answer pair whose upvote gap
/// satisfies `gap_ratio` (or whose low side is non-positive).
pub fn filter_posts(corpus: &Corpus, min_answers: usize, gap_ratio: f64) -> Corpus {
    assert!(gap_ratio > 1.0, "gap_ratio must exceed 1");
    let posts = corpus
        .posts
        .iter()
        .filter(|post| {
            post.answers.len() >= min_answers
                && post.answers.iter().any(|a| a.upvotes > 0)
                && has_gap_pair(&post.answers, gap_ratio)
        })
        .cloned()
        .collect();
    Corpus { posts }
}

fn has_gap_pair(answers: &[AnswerRecord], gap_ratio: f64) -> bool {
    for hi in answers {
        for lo in answers {
            if hi.id == lo.id {
                continue;
            }
            let qualifies = (lo.upvotes > 0 && hi.upvotes as f64 >= gap_ratio * lo.upvotes as f64)
                || (hi.upvotes > 0 && lo.upvotes <= 0);
            if qualifies {
                return true;
            }
        }
    }
    false
}

/// Cap the number of posts per forum, selecting uniformly without replacement.
/// Forums absent from `caps` are kept whole. Deterministic under `seed`.
pub fn subsample_by_forum(corpus: &Corpus, caps: &BTreeMap<String, usize>, seed: u64) -> Corpus {
    let mut by_forum: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, post) in corpus.posts.iter().enumerate() {
        by_forum
            .entry(post.question.forum.as_str())
            .or_default()
            .push(idx);
    }

    let mut keep: HashSet<usize> = HashSet::new();
    for (forum, mut indices) in by_forum {
        match caps.get(forum) {
            Some(&cap) if cap < indices.len() => {
                indices.sort_by(|&a, &b| {
                    corpus.posts[a]
                        .question
                        .id
                        .cmp(&corpus.posts[b].question.id)
                });
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, forum));
                let (sampled, _) = indices.partial_shuffle(&mut rng, cap);
                keep.extend(sampled.iter().copied());
            }
            _ => keep.extend(indices),
        }
    }

    let posts = corpus
        .posts
        .iter()
        .enumerate()
        .filter(|(idx, _)| keep.contains(idx))
        .map(|(_, post)| post.clone())
        .collect();
    Corpus { posts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn jsonl_archive(lines: &[&str]) -> ParsedArchive {
        parse_archive(Cursor::new(lines.join("\n")), ArchiveFormat::Jsonl, "t").unwrap()
    }

    fn post(qid: &str, upvotes: &[i64]) -> Post {
        Post {
            question: QuestionRecord {
                id: qid.to_string(),
                forum: "t".to_string(),
                title: format!("question {qid}"),
                body: "body".to_string(),
                created: None,
            },
            answers: upvotes
                .iter()
                .enumerate()
                .map(|(i, &v)| AnswerRecord {
                    id: format!("{qid}-a{i}"),
                    question_id: qid.to_string(),
                    body: format!("answer {i}"),
                    upvotes: v,
                    author_id: None,
                })
                .collect(),
        }
    }

    #[test]
    fn parses_question_with_two_answers() {
        let parsed = jsonl_archive(&[
            r#"{"id":"1","title":"How?","body":"<p>how</p>"}"#,
            r#"{"id":"2","question_id":"1","body":"like this","upvotes":5}"#,
            r#"{"id":"3","question_id":"1","body":"or this","upvotes":2}"#,
        ]);
        assert_eq!(parsed.questions.len(), 1);
        assert_eq!(parsed.answers.len(), 2);
        assert_eq!(parsed.skipped, 0);
        assert_eq!(parsed.questions[0].id, "t/1");
        assert_eq!(parsed.answers[0].question_id, "t/1");
    }

    #[test]
    fn orphan_answer_is_dropped_and_counted() {
        let parsed = jsonl_archive(&[
            r#"{"id":"1","title":"How?","body":"b"}"#,
            r#"{"id":"2","question_id":"999","body":"orphan","upvotes":1}"#,
        ]);
        assert_eq!(parsed.questions.len(), 1);
        assert!(parsed.answers.is_empty());
        assert_eq!(parsed.skipped, 1);
    }

    #[test]
    fn malformed_json_line_is_counted_not_fatal() {
        let parsed = jsonl_archive(&[
            r#"{"id":"1","title":"ok","body":"b"}"#,
            "{not json",
        ]);
        assert_eq!(parsed.questions.len(), 1);
        assert_eq!(parsed.skipped, 1);
    }

    #[test]
    fn parses_xml_rows() {
        let xml = r#"<?xml version="1.0"?>
<posts>
  <row Id="1" PostTypeId="1" Title="Why is the sky blue?" Body="&lt;p&gt;why&lt;/p&gt;" Score="3" />
  <row Id="2" PostTypeId="2" ParentId="1" Body="&lt;p&gt;Rayleigh scattering&lt;/p&gt;" Score="7" OwnerUserId="9" />
  <row Id="3" PostTypeId="2" ParentId="1" Body="&lt;p&gt;Optics&lt;/p&gt;" Score="2" />
  <row Id="4" PostTypeId="4" Body="tag wiki" />
</posts>"#;
        let parsed = parse_archive(Cursor::new(xml), ArchiveFormat::XmlRows, "phys").unwrap();
        assert_eq!(parsed.questions.len(), 1);
        assert_eq!(parsed.answers.len(), 2);
        assert_eq!(parsed.skipped, 1); // the tag-wiki row
        assert_eq!(parsed.questions[0].title, "Why is the sky blue?");
        assert_eq!(parsed.answers[0].body, "Rayleigh scattering");
        assert_eq!(parsed.answers[0].author_id.as_deref(), Some("phys/9"));
    }

    #[test]
    fn unknown_format_tag_is_config_error() {
        assert!(matches!(
            "parquet".parse::<ArchiveFormat>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn filter_keeps_qualifying_gap() {
        let corpus = Corpus {
            posts: vec![post("q1", &[5, 3])],
        };
        assert_eq!(filter_posts(&corpus, 2, 1.3).posts.len(), 1);
    }

    #[test]
    fn filter_drops_equal_votes() {
        let corpus = Corpus {
            posts: vec![post("q1", &[3, 3])],
        };
        assert!(filter_posts(&corpus, 2, 1.3).posts.is_empty());
    }

    #[test]
    fn filter_drops_posts_without_positive_upvotes() {
        let corpus = Corpus {
            posts: vec![post("q1", &[0, -2])],
        };
        assert!(filter_posts(&corpus, 2, 1.3).posts.is_empty());
    }

    #[test]
    fn filter_is_idempotent() {
        let corpus = Corpus {
            posts: vec![
                post("q1", &[5, 3]),
                post("q2", &[3, 3]),
                post("q3", &[9]),
                post("q4", &[4, -1]),
            ],
        };
        let once = filter_posts(&corpus, 2, 1.3);
        let twice = filter_posts(&once, 2, 1.3);
        assert_eq!(once.posts, twice.posts);
    }

    #[test]
    fn subsample_zero_cap_removes_forum() {
        let corpus = Corpus {
            posts: vec![post("q1", &[1]), post("q2", &[1])],
        };
        let caps = BTreeMap::from([("t".to_string(), 0)]);
        assert!(subsample_by_forum(&corpus, &caps, 7).posts.is_empty());
    }

    #[test]
    fn subsample_large_cap_is_identity() {
        let corpus = Corpus {
            posts: vec![post("q1", &[1]), post("q2", &[1])],
        };
        let caps = BTreeMap::from([("t".to_string(), 10)]);
        assert_eq!(subsample_by_forum(&corpus, &caps, 7).posts.len(), 2);
    }

    #[test]
    fn subsample_is_deterministic_and_subset() {
        let corpus = Corpus {
            posts: (0..20).map(|i| post(&format!("q{i:02}"), &[1])).collect(),
        };
        let caps = BTreeMap::from([("t".to_string(), 8)]);
        let a = subsample_by_forum(&corpus, &caps, 123);
        let b = subsample_by_forum(&corpus, &caps, 123);
        assert_eq!(a.posts, b.posts);
        assert_eq!(a.posts.len(), 8);
        for p in &a.posts {
            assert!(corpus.posts.contains(p));
        }
        let c = subsample_by_forum(&corpus, &caps, 124);
        assert!(a.posts != c.posts || a.posts.len() == corpus.posts.len());
    }

    #[test]
    fn stats_totals_match_forum_sums() {
        let mut p2 = post("q2", &[1, 2, 3]);
        p2.question.forum = "u".to_string();
        let corpus = Corpus {
            posts: vec![post("q1", &[1]), p2],
        };
        let stats = corpus.stats();
        assert_eq!(stats.num_questions, 2);
        assert_eq!(stats.num_answers, 4);
        assert_eq!(stats.per_forum.values().sum::<usize>(), stats.num_questions);
        assert!((stats.answers_per_question_mean - 2.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_jsonl_round_trips() {
        let corpus = Corpus {
            posts: vec![post("q1", &[5, 3]), post("q2", &[2])],
        };
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf).unwrap();
        let back = Corpus::read_jsonl(Cursor::new(buf)).unwrap();
        assert_eq!(back.posts, corpus.posts);
    }
}
