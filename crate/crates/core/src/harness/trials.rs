//! Trial ingestion (line-delimited JSON), preparation against a template,
//! and seeded partitioning into confidence groups.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::template::{render_prompt, PositionMap, PromptTemplate};
use crate::model::Vocab;

// ---------------------------------------------------------------------------
// trial records
// ---------------------------------------------------------------------------

/// One question-answer pair with a correctness grade. `level` carries the
/// generator's ground-truth confidence for planted trials and is absent for
/// ingested real data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: u64,
    pub question: String,
    pub answer: String,
    pub correct: bool,
    #[serde(
        rename = "planted_level",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub level: Option<u8>,
}

#[derive(Debug, Deserialize)]
struct RawTrial {
    #[serde(default)]
    id: Option<u64>,
    question: String,
    answer: String,
    correct: bool,
    #[serde(rename = "planted_level", default)]
    planted_level: Option<u8>,
}

/// A trial tokenized under a template, with its verified position map.
#[derive(Debug, Clone)]
pub struct PreparedTrial {
    pub trial: Trial,
    pub tokens: Vec<u32>,
    pub map: PositionMap,
}

/// Parse line-delimited JSON trials. Blank lines are skipped; malformed
/// lines report their line number; duplicate questions keep the first
/// occurrence.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTrial = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("trial file line {}: {e}", lineno + 1)))?;
        if !seen.insert(raw.question.clone()) {
            continue;
        }
        out.push(Trial {
            id: raw.id.unwrap_or(lineno as u64),
            question: raw.question,
            answer: raw.answer,
            correct: raw.correct,
            level: raw.planted_level,
        });
    }
    Ok(out)
}

/// Tokenize trials under a template, dropping nothing: any trial that fails
/// to render is an error naming the trial.
pub fn prepare_trials(
    trials: Vec<Trial>,
    vocab: &Vocab,
    template: &PromptTemplate,
) -> Result<Vec<PreparedTrial>> {
    trials
        .into_iter()
        .map(|trial| {
            let (tokens, map) = render_prompt(template, vocab, &trial.question, &trial.answer)
                .map_err(|e| Error::Data(format!("trial {}: {e}", trial.id)))?;
            Ok(PreparedTrial { trial, tokens, map })
        })
        .collect()
}

/// Load, dedup, tokenize, and invariant-check a trial file.
pub fn load_trials(
    path: &Path,
    vocab: &Vocab,
    template: &PromptTemplate,
) -> Result<Vec<PreparedTrial>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    prepare_trials(parse_trials(&text)?, vocab, template)
}

/// Write trials as line-delimited JSON.
pub fn save_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut buf = Vec::new();
    for t in trials {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    let mut f =
        fs::File::create(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    f.write_all(&buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// partitioning
// ---------------------------------------------------------------------------

/// Draw `n_high` indices whose class is in `high_classes` and `n_low` from
/// `low_classes`, by seed. `classes[i]` is trial i's confidence class
/// (`None` = unclassified, never drawn). Without replacement, a shortfall
/// is an error reporting the deficit.
pub fn partition_trials(
    classes: &[Option<usize>],
    high_classes: &[usize],
    low_classes: &[usize],
    n_high: usize,
    n_low: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if high_classes.iter().any(|c| low_classes.contains(c)) {
        return Err(Error::Config(
            "high and low class sets must be disjoint".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |wanted: &[usize], n: usize, side: &str| -> Result<Vec<usize>> {
        let mut pool: Vec<usize> = classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_some_and(|c| wanted.contains(&c)))
            .map(|(i, _)| i)
            .collect();
        if with_replacement {
            if pool.is_empty() && n > 0 {
                return Err(Error::InsufficientTrials(format!(
                    "no {side}-side trials in classes {wanted:?}"
                )));
            }
            return Ok((0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect());
        }
        if pool.len() < n {
            return Err(Error::InsufficientTrials(format!(
                "{side} side needs {n} trials from classes {wanted:?}, only {} available",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        pool.truncate(n);
        Ok(pool)
    };
    let high = draw(high_classes, n_high, "high")?;
    let low = draw(low_classes, n_low, "low")?;
    Ok((high, low))
}

// ---------------------------------------------------------------------------
