//! Think / imagine / answer transcripts.
//!
//! ```text
//! episode := round* final
//! round   := "<think>" text "</think>" "<imagine>" action "</imagine>"
//! final   := "<think>" text "</think>" "<answer>" letter "</answer>"
//! action  := ("forward" | "left" | "right") whitespace decimal
//! ```
//!
//! Whitespace between blocks is ignored, tags are case-sensitive and think
//! text may not contain `<`. Parsing is total: every input yields either an
//! [`Episode`] or a non-empty list of positioned violations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sim::{ActionKind, PrimitiveAction};

pub const DEFAULT_MAX_ROUNDS: usize = 3;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const IMAGINE_OPEN: &str = "<imagine>";
const IMAGINE_CLOSE: &str = "</imagine>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub think: String,
    pub action: PrimitiveAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub rounds: Vec<Round>,
    pub final_think: String,
    pub answer: char,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    MissingThink,
    UnclosedTag,
    NestedTag,
    MissingImagineOrAnswer,
    MalformedAction,
    MalformedLetter,
    MissingAnswer,
    DuplicateAnswer,
    TrailingContent,
    DepthExceeded,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::MissingThink => "missing-think",
            ViolationKind::UnclosedTag => "unclosed-tag",
            ViolationKind::NestedTag => "nested-tag",
            ViolationKind::MissingImagineOrAnswer => "missing-imagine-or-answer",
            ViolationKind::MalformedAction => "malformed-action",
            ViolationKind::MalformedLetter => "malformed-letter",
            ViolationKind::MissingAnswer => "missing-answer",
            ViolationKind::DuplicateAnswer => "duplicate-answer",
            ViolationKind::TrailingContent => "trailing-content",
            ViolationKind::DepthExceeded => "depth-exceeded",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Byte offset into the input.
    pub position: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatDiagnostics {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl FormatDiagnostics {
    fn single(position: usize, kind: ViolationKind) -> Self {
        Self {
            valid: false,
            violations: vec![Violation { position, kind }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SerializeError {
    #[error("think text may not contain '<'")]
    ThinkContainsTag,
    #[error("invalid action magnitude {0}")]
    InvalidAction(f64),
    #[error("answer must be a single uppercase letter, got {0:?}")]
    InvalidLetter(char),
}

pub fn parse(text: &str) -> Result<Episode, FormatDiagnostics> {
    parse_with_limit(text, DEFAULT_MAX_ROUNDS)
}

pub fn parse_with_limit(text: &str, max_rounds: usize) -> Result<Episode, FormatDiagnostics> {
    Parser { text, pos: 0 }.episode(max_rounds)
}

/// Structural check only; `valid` mirrors whether [`parse_with_limit`] succeeds.
pub fn diagnose(text: &str, max_rounds: usize) -> FormatDiagnostics {
    match parse_with_limit(text, max_rounds) {
        Ok(_) => FormatDiagnostics {
            valid: true,
            violations: Vec::new(),
        },
        Err(d) => d,
    }
}

pub fn serialize(episode: &Episode) -> Result<String, SerializeError> {
    let mut out = serialize_rounds(&episode.rounds)?;
    push_think(&mut out, &episode.final_think)?;
    if !episode.answer.is_ascii_uppercase() {
        return Err(SerializeError::InvalidLetter(episode.answer));
    }
    out.push_str(ANSWER_OPEN);
    out.push(episode.answer);
    out.push_str(ANSWER_CLOSE);
    Ok(out)
}

/// The think/imagine prefix of an episode that has not answered yet.
pub fn serialize_rounds(rounds: &[Round]) -> Result<String, SerializeError> {
    let mut out = String::new();
    for round in rounds {
        push_think(&mut out, &round.think)?;
        if round.action.validate().is_err() {
            return Err(SerializeError::InvalidAction(round.action.magnitude));
        }
        out.push_str(IMAGINE_OPEN);
        out.push_str(&round.action.to_string());
        out.push_str(IMAGINE_CLOSE);
    }
    Ok(out)
}

fn push_think(out: &mut String, think: &str) -> Result<(), SerializeError> {
    if think.contains('<') {
        return Err(SerializeError::ThinkContainsTag);
    }
    out.push_str(THINK_OPEN);
    out.push_str(think);
    out.push_str(THINK_CLOSE);
    Ok(())
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

enum Block {
    Imagine(PrimitiveAction),
    Answer(char),
}

impl<'a> Parser<'a> {
    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, tag: &str) -> bool {
        if self.rest().starts_with(tag) {
            self.pos += tag.len();
            true
        } else {
            false
        }
    }

    /// Reads block content up to `close`, which must be the next tag.
    fn content(&mut self, open_at: usize, close: &str) -> Result<(&'a str, usize), FormatDiagnostics> {
        let rest = self.rest();
        match rest.find('<') {
            None => Err(FormatDiagnostics::single(open_at, ViolationKind::UnclosedTag)),
            Some(i) if rest[i..].starts_with(close) => {
                let start = self.pos;
                self.pos += i + close.len();
                Ok((&rest[..i], start))
            }
            Some(i) => {
                let kind = if rest[i..].starts_with("</") {
                    ViolationKind::UnclosedTag
                } else {
                    ViolationKind::NestedTag
                };
                Err(FormatDiagnostics::single(self.pos + i, kind))
            }
        }
    }

    fn episode(mut self, max_rounds: usize) -> Result<Episode, FormatDiagnostics> {
        let mut rounds = Vec::new();
        loop {
            self.skip_ws();
            let at = self.pos;
            if self.rest().is_empty() {
                return Err(FormatDiagnostics::single(at, ViolationKind::MissingAnswer));
            }
            if !self.eat(THINK_OPEN) {
                return Err(FormatDiagnostics::single(at, ViolationKind::MissingThink));
            }
            let (think, _) = self.content(at, THINK_CLOSE)?;
            self.skip_ws();
            match self.block()? {
                Block::Imagine(action) => {
                    if rounds.len() == max_rounds {
                        return Err(FormatDiagnostics::single(at, ViolationKind::DepthExceeded));
                    }
                    rounds.push(Round {
                        think: think.to_string(),
                        action,
                    });
                }
                Block::Answer(answer) => {
                    self.skip_ws();
                    if !self.rest().is_empty() {
                        let kind = if self.rest().contains(ANSWER_OPEN) {
                            ViolationKind::DuplicateAnswer
                        } else {
                            ViolationKind::TrailingContent
                        };
                        return Err(FormatDiagnostics::single(self.pos, kind));
                    }
                    return Ok(Episode {
                        rounds,
                        final_think: think.to_string(),
                        answer,
                    });
                }
            }
        }
    }

    fn block(&mut self) -> Result<Block, FormatDiagnostics> {
        let at = self.pos;
        if self.eat(IMAGINE_OPEN) {
            let (body, body_at) = self.content(at, IMAGINE_CLOSE)?;
            parse_action(body.trim())
                .map(Block::Imagine)
                .ok_or_else(|| FormatDiagnostics::single(body_at, ViolationKind::MalformedAction))
        } else if self.eat(ANSWER_OPEN) {
            let (body, body_at) = self.content(at, ANSWER_CLOSE)?;
            let mut chars = body.trim().chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_uppercase() => Ok(Block::Answer(c)),
                _ => Err(FormatDiagnostics::single(body_at, ViolationKind::MalformedLetter)),
            }
        } else {
            Err(FormatDiagnostics::single(at, ViolationKind::MissingImagineOrAnswer))
        }
    }
}

fn parse_action(body: &str) -> Option<PrimitiveAction> {
    let split = body.find(char::is_whitespace)?;
    let kind = ActionKind::from_keyword(&body[..split])?;
    let number = body[split..].trim_start();
    if !is_plain_decimal(number) {
        return None;
    }
    let magnitude: f64 = number.parse().ok()?;
    let action = PrimitiveAction { kind, magnitude };
    action.validate().ok().map(|_| action)
}

/// `digits ('.' digits)?` with no sign and no exponent.
fn is_plain_decimal(s: &str) -> bool {
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    digits(int) && frac.is_none_or(digits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_round_episode() {
        let e = parse("<think>scan</think><imagine>left 27</imagine><think>done</think><answer>B</answer>").unwrap();
        assert_eq!(e.rounds.len(), 1);
        assert_eq!(e.rounds[0].action, PrimitiveAction::left(27.0));
        assert_eq!(e.rounds[0].think, "scan");
        assert_eq!(e.answer, 'B');
    }

    #[test]
    fn zero_rounds() {
        let e = parse("<think>t</think><answer>A</answer>").unwrap();
        assert!(e.rounds.is_empty());
        assert_eq!(e.answer, 'A');
    }

    #[test]
    fn imagine_without_think() {
        let d = parse("<imagine>forward 1</imagine><answer>A</answer>").unwrap_err();
        assert!(!d.valid);
        assert_eq!(
            d.violations,
            vec![Violation {
                position: 0,
                kind: ViolationKind::MissingThink
            }]
        );
    }

    #[test]
    fn whitespace_between_blocks() {
        let e = parse("  <think>a b</think>\n <imagine> forward 0.5 </imagine>\t<think></think> <answer>C</answer>\n")
            .unwrap();
        assert_eq!(e.rounds[0].action, PrimitiveAction::forward(0.5));
        assert_eq!(e.rounds[0].think, "a b");
        assert_eq!(e.final_think, "");
    }

    fn kind_of(text: &str) -> ViolationKind {
        parse(text).unwrap_err().violations[0].kind
    }

    #[test]
    fn structural_violations() {
        assert_eq!(kind_of(""), ViolationKind::MissingAnswer);
        assert_eq!(kind_of("<think>x"), ViolationKind::UnclosedTag);
        assert_eq!(
            kind_of("<think>x<think>y</think></think><answer>A</answer>"),
            ViolationKind::NestedTag
        );
        assert_eq!(kind_of("<think>x</imagine>"), ViolationKind::UnclosedTag);
        assert_eq!(kind_of("<think>x</think>"), ViolationKind::MissingImagineOrAnswer);
        assert_eq!(
            kind_of("<think>x</think><imagine>left 5</imagine>"),
            ViolationKind::MissingAnswer
        );
        assert_eq!(
            kind_of("<think>x</think><answer>A</answer><answer>B</answer>"),
            ViolationKind::DuplicateAnswer
        );
        assert_eq!(
            kind_of("<think>x</think><answer>A</answer>junk"),
            ViolationKind::TrailingContent
        );
        assert_eq!(
            kind_of("<answer>A</answer><think>x</think>"),
            ViolationKind::MissingThink
        );
        assert_eq!(
            kind_of("<Think>x</Think><answer>A</answer>"),
            ViolationKind::MissingThink
        );
    }

    #[test]
    fn malformed_payloads() {
        for body in [
            "up 3", "left", "left -3", "left 0", "left 1e3", "left .5", "left 5.", "left3", "left 3 4",
        ] {
            let text = format!("<think>x</think><imagine>{body}</imagine><think>y</think><answer>A</answer>");
            assert_eq!(kind_of(&text), ViolationKind::MalformedAction, "{body}");
        }
        for body in ["a", "AB", "", "1"] {
            let text = format!("<think>x</think><answer>{body}</answer>");
            assert_eq!(kind_of(&text), ViolationKind::MalformedLetter, "{body}");
        }
    }

    #[test]
    fn violation_positions() {
        let d = parse("<think>x</think><imagine>jump 2</imagine>").unwrap_err();
        assert_eq!(d.violations[0].position, "<think>x</think><imagine>".len());
        let d = parse("<think>x</think>  <foo>").unwrap_err();
        assert_eq!(d.violations[0].position, "<think>x</think>  ".len());
    }

    #[test]
    fn depth_limit() {
        let round = "<think>x</think><imagine>left 15</imagine>";
        let fin = "<think>y</think><answer>A</answer>";
        let ok = format!("{}{fin}", round.repeat(3));
        assert!(parse(&ok).is_ok());
        let deep = format!("{}{fin}", round.repeat(4));
        assert_eq!(kind_of(&deep), ViolationKind::DepthExceeded);
        assert!(parse_with_limit(&deep, 4).is_ok());
    }

    #[test]
    fn canonical_serialization() {
        let e = Episode {
            rounds: vec![Round {
                think: "look".into(),
                action: PrimitiveAction::left(0.4),
            }],
            final_think: "ok".into(),
            answer: 'D',
        };
        let s = serialize(&e).unwrap();
        assert_eq!(
            s,
            "<think>look</think><imagine>left 0.4</imagine><think>ok</think><answer>D</answer>"
        );
        assert_eq!(parse(&s).unwrap(), e);

        let zero = "<think>t</think><answer>A</answer>";
        assert_eq!(serialize(&parse(zero).unwrap()).unwrap(), zero);
    }

    #[test]
    fn serialize_rejects_invalid() {
        let mut e = Episode {
            rounds: vec![],
            final_think: "a<b".into(),
            answer: 'A',
        };
        assert_eq!(serialize(&e), Err(SerializeError::ThinkContainsTag));
        e.final_think = "ok".into();
        e.answer = 'a';
        assert!(serialize(&e).is_err());
        e.answer = 'A';
        e.rounds.push(Round {
            think: String::new(),
            action: PrimitiveAction::forward(0.0),
        });
        assert_eq!(serialize(&e), Err(SerializeError::InvalidAction(0.0)));
    }

    #[test]
    fn multibyte_input_does_not_panic() {
        for s in [
            "<think>é</think><answer>Ä</answer>",
            "<think>ü",
            "ß<think>",
            "<think>x</think><imagine>left 日本</imagine>",
        ] {
            assert!(parse(s).is_err());
        }
    }
}
