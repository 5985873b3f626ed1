//! Dataset readers and the normalized record format.
//!
//! The normalized format is JSON Lines with one record per candidate:
//!
//! ```text
//! {"label":1,"context":["hi there","hello"],"document":["i like ski ."],"response":"me too"}
//! ```
//!
//! Twenty consecutive records sharing a context and document form one
//! candidate set. An optional `planted` field carries the index of the
//! grounding sentence for synthetic corpora.
//!
//! Raw inputs:
//! * `persona`: ParlAI-style PersonaChat text (`N your persona: ...` lines
//!   followed by `N query\tresponse\t\tcand|cand|...` turns).
//! * `cmudog`: tab-separated `label\tcontext\tdocument\tresponse` lines where
//!   utterances are joined by ` __eou__ ` and sentences by ` __eos__ `;
//!   twenty consecutive lines form a set.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, CorpusConfig, RawCandidateSet, CANDIDATES_PER_SET};
use crate::error::{CsnError, Result};

pub const UTTERANCE_SEP: &str = "__eou__";
pub const SENTENCE_SEP: &str = "__eos__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Persona,
    Cmudog,
    Records,
}

impl FromStr for DatasetFormat {
    type Err = CsnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "persona" => Ok(Self::Persona),
            "cmudog" => Ok(Self::Cmudog),
            "records" | "jsonl" => Ok(Self::Records),
            other => Err(CsnError::Config(format!(
                "unknown dataset format {other:?} (expected persona, cmudog or records)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub label: u8,
    pub context: Vec<String>,
    pub document: Vec<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<usize>,
}

pub fn load_dataset(path: &Path, format: DatasetFormat, config: &CorpusConfig) -> Result<Vec<RawCandidateSet>> {
    config.validate()?;
    let text = fs::read_to_string(path).map_err(|e| CsnError::io(path, e))?;
    let sets = match format {
        DatasetFormat::Records => parse_records(path, &text)?,
        DatasetFormat::Persona => parse_persona(path, &text)?,
        DatasetFormat::Cmudog => parse_cmudog(path, &text)?,
    };
    Ok(sets.into_iter().map(|s| s.truncated(config)).collect())
}

pub fn read_records(path: &Path) -> Result<Vec<RawCandidateSet>> {
    let text = fs::read_to_string(path).map_err(|e| CsnError::io(path, e))?;
    parse_records(path, &text)
}

pub fn write_records(path: &Path, sets: &[RawCandidateSet]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CsnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let join = |t: &Vec<String>| t.join(" ");
    for set in sets {
        let context: Vec<String> = set.context.iter().map(join).collect();
        let document: Vec<String> = set.document.iter().map(join).collect();
        for (i, cand) in set.candidates.iter().enumerate() {
            let rec = Record {
                label: u8::from(i == set.positive_index),
                context: context.clone(),
                document: document.clone(),
                response: join(cand),
                planted: set.planted,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| CsnError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| CsnError::io(path, e))
}

/// Groups per-candidate records into sets of twenty.
fn group_records(path: &Path, records: Vec<(usize, Record)>) -> Result<Vec<RawCandidateSet>> {
    let mut sets = Vec::with_capacity(records.len() / CANDIDATES_PER_SET);
    let mut chunks = records.chunks_exact(CANDIDATES_PER_SET);
    for chunk in chunks.by_ref() {
        let (first_line, first) = &chunk[0];
        let mut positive = None;
        for (pos, (line, rec)) in chunk.iter().enumerate() {
            if rec.context != first.context || rec.document != first.document {
                return Err(parse_err(
                    path,
                    *line,
                    format!("record does not share the context/document of the set starting at line {first_line}"),
                ));
            }
            if rec.label > 1 {
                return Err(parse_err(path, *line, format!("label {} is not 0 or 1", rec.label)));
            }
            if rec.label == 1 {
                if positive.is_some() {
                    return Err(parse_err(path, *line, "second positive in candidate set".into()));
                }
                positive = Some(pos);
            }
        }
        let positive_index =
            positive.ok_or_else(|| parse_err(path, *first_line, "candidate set without a positive".into()))?;
        let context: Vec<Vec<String>> = first.context.iter().map(|u| tokenize(u)).collect();
        let document: Vec<Vec<String>> = first.document.iter().map(|s| tokenize(s)).collect();
        if context.is_empty() || document.is_empty() {
            return Err(parse_err(path, *first_line, "empty context or document".into()));
        }
        sets.push(RawCandidateSet {
            context,
            document,
            candidates: chunk.iter().map(|(_, r)| tokenize(&r.response)).collect(),
            positive_index,
            planted: first.planted,
        });
    }
    let rest = chunks.remainder();
    if !rest.is_empty() {
        return Err(CsnError::CandidateCount {
            path: path.to_path_buf(),
            line: rest[0].0,
            found: rest.len(),
            expected: CANDIDATES_PER_SET,
        });
    }
    Ok(sets)
}

fn parse_err(path: &Path, line: usize, message: String) -> CsnError {
    CsnError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn parse_records(path: &Path, text: &str) -> Result<Vec<RawCandidateSet>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        records.push((i + 1, rec));
    }
    group_records(path, records)
}

fn parse_cmudog(path: &Path, text: &str) -> Result<Vec<RawCandidateSet>> {
    let split = |s: &str, sep: &str| -> Vec<String> {
        s.split(sep)
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(String::from)
            .collect()
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let label: u8 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad label {:?}", fields[0])))?;
        records.push((
            i + 1,
            Record {
                label,
                context: split(fields[1], UTTERANCE_SEP),
                document: split(fields[2], SENTENCE_SEP),
                response: fields[3].trim().to_string(),
                planted: None,
            },
        ));
    }
    group_records(path, records)
}

/// ParlAI PersonaChat text: one candidate set per dialogue turn, the speaker's
/// persona lines form the grounding document, and the context is every
/// previous utterance of the dialogue plus the current query.
fn parse_persona(path: &Path, text: &str) -> Result<Vec<RawCandidateSet>> {
    const PERSONA_PREFIX: &str = "your persona:";
    const PARTNER_PREFIX: &str = "partner's persona:";
    let mut sets = Vec::new();
    let mut persona: Vec<Vec<String>> = Vec::new();
    let mut history: Vec<Vec<String>> = Vec::new();
    let mut in_dialogue = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (num, body) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(path, lineno, "missing turn index".into()))?;
        let num: usize = num
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad turn index {num:?}")))?;
        if num == 1 {
            persona.clear();
            history.clear();
            in_dialogue = false;
        }
        if let Some(p) = body.strip_prefix(PERSONA_PREFIX) {
            if in_dialogue {
                return Err(parse_err(path, lineno, "persona line inside a dialogue".into()));
            }
            persona.push(tokenize(p));
            continue;
        }
        if body.starts_with(PARTNER_PREFIX) {
            continue;
        }
        in_dialogue = true;
        let fields: Vec<&str> = body.split('\t').collect();
        if fields.len() < 4 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected query, response, reward and candidates, found {} fields", fields.len()),
            ));
        }
        let query = tokenize(fields[0]);
        let response_text = fields[1].trim();
        let candidates: Vec<&str> = fields[3].split('|').map(str::trim).collect();
        if candidates.len() != CANDIDATES_PER_SET {
            return Err(CsnError::CandidateCount {
                path: path.to_path_buf(),
                line: lineno,
                found: candidates.len(),
                expected: CANDIDATES_PER_SET,
            });
        }
        let positive_index = candidates
            .iter()
            .rposition(|c| *c == response_text)
            .ok_or_else(|| parse_err(path, lineno, "true response missing from candidates".into()))?;
        if persona.is_empty() {
            return Err(parse_err(path, lineno, "dialogue without persona lines".into()));
        }
        history.push(query);
        sets.push(RawCandidateSet {
            context: history.clone(),
            document: persona.clone(),
            candidates: candidates.iter().map(|c| tokenize(c)).collect(),
            positive_index,
            planted: None,
        });
        history.push(tokenize(response_text));
    }
    Ok(sets)
}
