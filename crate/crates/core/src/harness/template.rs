//! Prompt templates with data-driven position maps.
//!
//! A template is JSON: prompt text containing `{question}` and `{answer}`
//! placeholders exactly once each, plus role annotations expressed as a
//! token offset relative to a named anchor. Rendering tokenizes the five
//! text segments separately (so anchor positions are exact), then
//! re-tokenizes the full string and demands agreement — a vocabulary whose
//! tokens merge across segment boundaries is rejected rather than silently
//! shifting every role index. Templates must be authored so the token after
//! the answer is a standalone newline and the final token is a colon.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::PositionRole;
use crate::metrics::{ConfidenceLexicon, CATEGORICAL_CLASSES};
use crate::model::Vocab;

// ---------------------------------------------------------------------------
// template data
// ---------------------------------------------------------------------------

/// Token-index landmarks computed while rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    PromptStart,
    QuestionStart,
    QuestionEnd,
    AnswerStart,
    AnswerEnd,
    PromptEnd,
}

/// A role's position: `anchor + offset` in token units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleOffset {
    pub anchor: Anchor,
    pub offset: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    /// default lexicon id for this template (configs may override)
    pub lexicon: String,
    pub text: String,
    pub roles: BTreeMap<PositionRole, RoleOffset>,
    /// first-token position of each confidence class listed in the prompt
    #[serde(default)]
    pub class_tokens: Vec<RoleOffset>,
}

const MINIMAL_0_9: &str = include_str!("../../templates/minimal0_9.json");
const NUMERIC_0_100: &str = include_str!("../../templates/numeric0_100.json");
const CATEGORICAL: &str = include_str!("../../templates/categorical.json");

const TOY_NUMERIC_LEXICON: &str = include_str!("../../lexicons/toy_numeric0_9.json");
const TOY_CATEGORICAL_LEXICON: &str = include_str!("../../lexicons/toy_categorical.json");

impl PromptTemplate {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: PromptTemplate = serde_json::from_str(text)
            .map_err(|e| Error::Template(format!("template parse: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn builtin_ids() -> &'static [&'static str] {
        &["minimal0_9", "numeric0_100", "categorical"]
    }

    /// A template shipped with the crate, by id.
    pub fn builtin(id: &str) -> Result<Self> {
        let text = match id {
            "minimal0_9" => MINIMAL_0_9,
            "numeric0_100" => NUMERIC_0_100,
            "categorical" => CATEGORICAL,
            _ => {
                return Err(Error::Template(format!(
                    "unknown template {id:?}; builtins are {:?}",
                    Self::builtin_ids()
                )))
            }
        };
        Self::from_json(text)
    }

    /// Resolve an id as a builtin, else as a file path.
    pub fn resolve(id_or_path: &str) -> Result<Self> {
        if Self::builtin_ids().contains(&id_or_path) {
            return Self::builtin(id_or_path);
        }
        let text = std::fs::read_to_string(id_or_path)
            .map_err(|e| Error::Template(format!("template {id_or_path}: {e}")))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for placeholder in ["{question}", "{answer}"] {
            let count = self.text.matches(placeholder).count();
            if count != 1 {
                return Err(Error::Template(format!(
                    "template {}: {placeholder} must appear exactly once, found {count}",
                    self.id
                )));
            }
        }
        let q = self.text.find("{question}").unwrap();
        let a = self.text.find("{answer}").unwrap();
        if q >= a {
            return Err(Error::Template(format!(
                "template {}: question must precede answer",
                self.id
            )));
        }
        for role in [
            PositionRole::AnswerNewline,
            PositionRole::AfterAnswerNewline,
            PositionRole::ReadoutColon,
            PositionRole::LastAnswerToken,
            PositionRole::FirstAnswerToken,
        ] {
            if !self.roles.contains_key(&role) {
                return Err(Error::Template(format!(
                    "template {}: missing role {role:?}",
                    self.id
                )));
            }
        }
        if !self.class_tokens.is_empty() && self.class_tokens.len() != CATEGORICAL_CLASSES {
            return Err(Error::Template(format!(
                "template {}: {} class tokens, need 0 or {CATEGORICAL_CLASSES}",
                self.id,
                self.class_tokens.len()
            )));
        }
        Ok(())
    }
}

/// A lexicon shipped with the crate (authored for the planted toy
/// vocabulary), by id.
pub fn builtin_lexicon(id: &str) -> Result<ConfidenceLexicon> {
    match id {
        "toy_numeric0_9" => ConfidenceLexicon::from_json(TOY_NUMERIC_LEXICON),
        "toy_categorical" => ConfidenceLexicon::from_json(TOY_CATEGORICAL_LEXICON),
        _ => Err(Error::Config(format!(
            "unknown lexicon {id:?}; builtins are [\"toy_numeric0_9\", \"toy_categorical\"]"
        ))),
    }
}

/// Resolve a lexicon id as a builtin, else as a file path.
pub fn resolve_lexicon(id_or_path: &str) -> Result<ConfidenceLexicon> {
    if matches!(id_or_path, "toy_numeric0_9" | "toy_categorical") {
        return builtin_lexicon(id_or_path);
    }
    let text = std::fs::read_to_string(id_or_path)
        .map_err(|e| Error::Config(format!("lexicon {id_or_path}: {e}")))?;
    ConfidenceLexicon::from_json(&text)
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

/// Every role of one rendered prompt, as token indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMap {
    pub question_span: Range<usize>,
    pub answer_span: Range<usize>,
    /// the newline right after the answer (== `answer_span.end`)
    pub answer_newline: usize,
    pub after_answer_newline: usize,
    /// final prompt token; the read-out class is generated after it
    pub readout_colon: usize,
    /// colon of the class-list instruction block, where present
    pub instruction_colon: Option<usize>,
    pub last_answer_token: usize,
    pub first_answer_token: usize,
    pub class_tokens: Vec<usize>,
}

impl PositionMap {
    pub fn resolve(&self, role: PositionRole) -> Option<usize> {
        match role {
            PositionRole::AnswerNewline => Some(self.answer_newline),
            PositionRole::AfterAnswerNewline => Some(self.after_answer_newline),
            PositionRole::ReadoutColon => Some(self.readout_colon),
            PositionRole::InstructionColon => self.instruction_colon,
            PositionRole::LastAnswerToken => Some(self.last_answer_token),
            PositionRole::FirstAnswerToken => Some(self.first_answer_token),
        }
    }

    pub fn resolve_required(&self, role: PositionRole) -> Result<usize> {
        self.resolve(role)
            .ok_or_else(|| Error::Template(format!("role {role:?} is not defined for this prompt")))
    }
}

struct Anchors {
    question: Range<usize>,
    answer: Range<usize>,
    end: usize,
}

impl Anchors {
    fn base(&self, anchor: Anchor) -> usize {
        match anchor {
            Anchor::PromptStart => 0,
            Anchor::QuestionStart => self.question.start,
            Anchor::QuestionEnd => self.question.end,
            Anchor::AnswerStart => self.answer.start,
            Anchor::AnswerEnd => self.answer.end,
            Anchor::PromptEnd => self.end,
        }
    }

    fn at(&self, name: &str, ro: &RoleOffset) -> Result<usize> {
        let pos = self.base(ro.anchor) as i64 + ro.offset;
        if pos < 0 || pos >= self.end as i64 {
            return Err(Error::Template(format!(
                "role {name}: {:?}{:+} resolves to {pos}, outside 0..{}",
                ro.anchor, ro.offset, self.end
            )));
        }
        Ok(pos as usize)
    }
}

/// Render a trial into token ids and a verified position map.
pub fn render_prompt(
    template: &PromptTemplate,
    vocab: &Vocab,
    question: &str,
    answer: &str,
) -> Result<(Vec<u32>, PositionMap)> {
    template.validate()?;
    let q_at = template.text.find("{question}").unwrap();
    let a_at = template.text.find("{answer}").unwrap();
    let prefix = &template.text[..q_at];
    let middle = &template.text[q_at + "{question}".len()..a_at];
    let suffix = &template.text[a_at + "{answer}".len()..];

    let segments = [prefix, question, middle, answer, suffix];
    let mut tokens: Vec<u32> = Vec::new();
    let mut bounds = [0usize; 6];
    for (i, seg) in segments.iter().enumerate() {
        let ids = vocab.encode(seg)?;
        tokens.extend_from_slice(&ids);
        bounds[i + 1] = tokens.len();
    }

    // a token merging across a segment boundary would silently shift every
    // anchor; demand piecewise and whole-string tokenizations agree
    let rendered: String = segments.concat();
    let whole = vocab.encode(&rendered)?;
    if whole != tokens {
        return Err(Error::Tokenization(format!(
            "template {}: tokens merge across segment boundaries ({} piecewise vs {} whole)",
            template.id,
            tokens.len(),
            whole.len()
        )));
    }

    let anchors = Anchors {
        question: bounds[1]..bounds[2],
        answer: bounds[3]..bounds[4],
        end: tokens.len(),
    };
    if anchors.question.is_empty() || anchors.answer.is_empty() {
        return Err(Error::Template(format!(
            "template {}: empty question or answer span",
            template.id
        )));
    }

    let mut resolved: BTreeMap<PositionRole, usize> = BTreeMap::new();
    for (role, ro) in &template.roles {
        resolved.insert(*role, anchors.at(&format!("{role:?}"), ro)?);
    }
    let get = |role: PositionRole| -> usize { resolved[&role] };

    let map = PositionMap {
        question_span: anchors.question.clone(),
        answer_span: anchors.answer.clone(),
        answer_newline: get(PositionRole::AnswerNewline),
        after_answer_newline: get(PositionRole::AfterAnswerNewline),
        readout_colon: get(PositionRole::ReadoutColon),
        instruction_colon: resolved.get(&PositionRole::InstructionColon).copied(),
        last_answer_token: get(PositionRole::LastAnswerToken),
        first_answer_token: get(PositionRole::FirstAnswerToken),
        class_tokens: template
            .class_tokens
            .iter()
            .enumerate()
            .map(|(k, ro)| anchors.at(&format!("class {k}"), ro))
            .collect::<Result<Vec<_>>>()?,
    };
    check_map(template, vocab, &tokens, &map)?;
    Ok((tokens, map))
}

/// The position-map invariants: the answer-newline really is a standalone
/// newline token one past the answer span, the read-out colon is the final
/// token, the control position sits right after the newline, and spans are
/// ordered and disjoint.
fn check_map(
    template: &PromptTemplate,
    vocab: &Vocab,
    tokens: &[u32],
    map: &PositionMap,
) -> Result<()> {
    let fail = |role: &str, msg: String| {
        Err(Error::Template(format!(
            "template {}: role {role}: {msg}",
            template.id
        )))
    };
    if map.answer_newline != map.answer_span.end {
        return fail(
            "answer_newline",
            format!(
                "index {} is not one past the answer span {:?}",
                map.answer_newline, map.answer_span
            ),
        );
    }
    let newline_tok = vocab.token(tokens[map.answer_newline])?;
    if newline_tok != "\n" {
        return fail(
            "answer_newline",
            format!("token {newline_tok:?} is not a standalone newline"),
        );
    }
    if map.after_answer_newline != map.answer_newline + 1 {
        return fail(
            "after_answer_newline",
            format!(
                "index {} is not answer_newline + 1",
                map.after_answer_newline
            ),
        );
    }
    if map.readout_colon != tokens.len() - 1 {
        return fail(
            "readout_colon",
            format!("index {} is not the final prompt index", map.readout_colon),
        );
    }
    let colon_tok = vocab.token(tokens[map.readout_colon])?;
    if !colon_tok.ends_with(':') {
        return fail(
            "readout_colon",
            format!("token {colon_tok:?} is not a colon"),
        );
    }
    if map.first_answer_token != map.answer_span.start
        || map.last_answer_token + 1 != map.answer_span.end
    {
        return fail(
            "first_answer_token/last_answer_token",
            format!(
                "roles ({}, {}) disagree with the answer span {:?}",
                map.first_answer_token, map.last_answer_token, map.answer_span
            ),
        );
    }
    if map.question_span.end > map.answer_span.start {
        return fail(
            "spans",
            format!(
                "question {:?} and answer {:?} must be ordered and disjoint",
                map.question_span, map.answer_span
            ),
        );
    }
    if let Some(ic) = map.instruction_colon {
        let tok = vocab.token(tokens[ic])?;
        if !tok.ends_with(':') {
            return fail("instruction_colon", format!("token {tok:?} is not a colon"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
