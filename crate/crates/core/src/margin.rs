//! Margin computation for preference pairs.
//!
//! Three strategies: the log-ratio of upvotes for human-written pairs, a
//! fixed constant for generated pairs, and AI-feedback scores that reject
//! pairs whose score gap is too small to trust.

use serde::{Deserialize, Serialize};

use crate::axioms::PreferencePair;
use crate::error::{Error, Result};
use crate::gateway::CritiqueScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    UpvoteRatio,
    Fixed,
    AiFeedback,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarginSpec {
    pub mode: MarginMode,
    pub fixed_value: f64,
    pub min_score_gap: i64,
    /// Divisor mapping an accepted score gap to a margin. With the default
    /// 20, the minimum accepted gap (5) lands exactly on the fixed constant
    /// (0.25), keeping the two generated-pair regimes on one scale.
    pub scale: f64,
    /// Upper bound on any margin; extreme upvote ratios would otherwise
    /// dominate the hinge.
    pub cap: f64,
}

impl MarginSpec {
    pub fn with_mode(mode: MarginMode) -> Self {
        MarginSpec {
            mode,
            ..Default::default()
        }
    }
}

impl Default for MarginSpec {
    fn default() -> Self {
        MarginSpec {
            mode: MarginMode::UpvoteRatio,
            fixed_value: 0.25,
            min_score_gap: 5,
            scale: 20.0,
            cap: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginOutcome {
    Accept(f64),
    /// AI feedback found the pair too close to call; it leaves training.
    Reject {
        score_gap: i64,
    },
}

/// Margin for one pair under `spec`. Upvote-ratio mode requires human
/// answers on both sides; AI-feedback mode requires critique scores for
/// (pos, neg) as (A, B).
pub fn compute_margin(
    pair: &PreferencePair,
    spec: &MarginSpec,
    scores: Option<&CritiqueScores>,
) -> Result<MarginOutcome> {
    let margin = match spec.mode {
        MarginMode::UpvoteRatio => {
            let (pos, neg) = match (pair.pos.upvotes, pair.neg.upvotes) {
                (Some(p), Some(n)) => (p, n),
                _ => {
                    return Err(Error::config(
                        "upvote_ratio margin requires human answers with upvotes on both sides",
                    ))
                }
            };
            let ratio = pos.max(1) as f64 / neg.max(1) as f64;
            ratio.log10().max(0.0)
        }
        MarginMode::Fixed => spec.fixed_value,
        MarginMode::AiFeedback => {
            let scores = scores.ok_or_else(|| {
                Error::config("ai_feedback margin requires critique scores")
            })?;
            let gap = scores.score_a - scores.score_b;
            if gap < spec.min_score_gap {
                return Ok(MarginOutcome::Reject { score_gap: gap });
            }
            gap as f64 / spec.scale
        }
    };
    Ok(MarginOutcome::Accept(margin.min(spec.cap)))
}
