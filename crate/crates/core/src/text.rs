//! Tokenization, HTML stripping, and n-gram helpers shared across modules.

use std::collections::HashSet;

/// Lowercased unicode-whitespace word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

/// Whitespace tokens with original casing (utilization scoring works on
/// the raw surface form).
pub fn raw_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Set of word n-grams over whitespace tokens. Tokens inside an n-gram are
/// joined with a separator that cannot occur via whitespace splitting.
pub fn ngram_set(text: &str, n: usize) -> HashSet<String> {
    let tokens = raw_tokens(text);
    if n == 0 || tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).map(|w| w.join("\u{1f}")).collect()
}

/// FNV-1a, used wherever the crate needs a hash that is stable across
/// platforms and releases (std's `DefaultHasher` is neither).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Mix a string into a seed, for deriving per-key RNG streams.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    seed ^ fnv1a64(key.as_bytes()).rotate_left(17)
}

/// Strip HTML markup down to plain text: tags removed, code-block contents
/// kept verbatim, entities decoded, block boundaries turned into newlines.
pub fn strip_html(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let bytes = html.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' && is_tag_start(bytes, i) {
            let end = match find_tag_end(bytes, i) {
                Some(e) => e,
                None => {
                    // unterminated tag: keep the rest as text
                    out.push_str(&html[i..]);
                    break;
                }
            };
            let tag = &html[i + 1..end];
            if block_boundary(tag) {
                if !out.ends_with('\n') {
                    out.push('\n');
                }
            } else if !out.ends_with(char::is_whitespace) && !out.is_empty() {
                // inline tags still separate words in source like `a<b>b</b>`
                if tag_name(tag) != "code" && tag_name(tag) != "a" && !tag.starts_with('/') {
                    out.push(' ');
                }
            }
            i = end + 1;
        } else {
            let ch = html[i..].chars().next().unwrap();
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    let decoded = decode_entities(&out);
    collapse_blank_lines(decoded.trim())
}

fn is_tag_start(bytes: &[u8], i: usize) -> bool {
    match bytes.get(i + 1) {
        Some(c) => c.is_ascii_alphabetic() || *c == b'/' || *c == b'!',
        None => false,
    }
}

fn find_tag_end(bytes: &[u8], start: usize) -> Option<usize> {
    bytes[start..].iter().position(|&b| b == b'>').map(|p| start + p)
}

fn tag_name(tag: &str) -> String {
    tag.trim_start_matches('/')
        .split(|c: char| c.is_whitespace() || c == '>' || c == '/')
        .next()
        .unwrap_or("")
        .to_ascii_lowercase()
}

fn block_boundary(tag: &str) -> bool {
    matches!(
        tag_name(tag).as_str(),
        "p" | "br" | "div" | "li" | "ul" | "ol" | "pre" | "blockquote" | "tr" | "table" | "h1"
            | "h2" | "h3" | "h4" | "h5" | "h6" | "hr"
    )
}

fn decode_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        let semi = rest[..rest.len().min(12)].find(';');
        match semi {
            Some(s) => {
                let entity = &rest[1..s];
                match decode_entity(entity) {
                    Some(decoded) => {
                        out.push_str(&decoded);
                        rest = &rest[s + 1..];
                    }
                    None => {
                        out.push('&');
                        rest = &rest[1..];
                    }
                }
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn decode_entity(entity: &str) -> Option<String> {
    match entity {
        "amp" => Some("&".into()),
        "lt" => Some("<".into()),
        "gt" => Some(">".into()),
        "quot" => Some("\"".into()),
        "apos" => Some("'".into()),
        "nbsp" => Some(" ".into()),
        _ => {
            let code = if let Some(hex) = entity.strip_prefix("#x").or_else(|| entity.strip_prefix("#X")) {
                u32::from_str_radix(hex, 16).ok()?
            } else {
                entity.strip_prefix('#')?.parse::<u32>().ok()?
            };
            char::from_u32(code).map(|c| c.to_string())
        }
    }
}

fn collapse_blank_lines(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut blank_run = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            blank_run += 1;
            if blank_run > 1 {
                continue;
            }
            out.push('\n');
        } else {
            blank_run = 0;
            out.push_str(line.trim_end());
            out.push('\n');
        }
    }
    out.trim_end().to_string()
}

/// Naive sentence splitter used by the synthetic text provider.
pub(crate) fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        current.push(ch);
        if matches!(ch, '.' | '?' | '!') {
            let s = current.trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            current.clear();
        }
    }
    let tail = current.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}
