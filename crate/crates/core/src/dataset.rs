//! Record ingestion, the figure-text cleaning rule, vocabulary, tokenization
//! and batching.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const CLS: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<cls>"];

/// One figure: its inside-the-chart text, the source article's abstract, the caption,
/// and a key into a feature file standing in for the image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScicapRecord {
    pub id: String,
    #[serde(default)]
    pub figure_text: String,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub feature_ref: String,
}

/// Reads a JSON-lines file. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<ScicapRecord>> {
    let file = fs::File::open(path.as_ref())?;
    parse_records(BufReader::new(file))
}

pub fn parse_records(reader: impl BufRead) -> Result<Vec<ScicapRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScicapRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "record id must be non-empty".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: impl AsRef<Path>, records: &[ScicapRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path.as_ref())?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input_count: usize,
    pub kept_count: usize,
    pub removed_ids: Vec<String>,
    pub rule: String,
    pub min_text_len: usize,
}

/// Keeps a record iff its trimmed figure text has at least `min_text_len`
/// characters. Order is preserved.
pub fn clean(records: Vec<ScicapRecord>, min_text_len: usize) -> (Vec<ScicapRecord>, CleanReport) {
    let input_count = records.len();
    let mut kept = Vec::with_capacity(records.len());
    let mut removed_ids = Vec::new();
    for r in records {
        if r.figure_text.trim().chars().count() >= min_text_len {
            kept.push(r);
        } else {
            removed_ids.push(r.id);
        }
    }
    let report = CleanReport {
        input_count,
        kept_count: kept.len(),
        removed_ids,
        rule: format!("keep iff trimmed figure_text has >= {min_text_len} characters"),
        min_text_len,
    };
    (kept, report)
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
    pub min_freq: usize,
    pub max_size: usize,
}

impl Vocabulary {
    /// Builds from caption, figure text and abstract tokens. Tokens seen at
    /// least `min_freq` times are ranked by (frequency desc, token asc) and
    /// the first `max_size - 5` are assigned ids from 5 upward.
    pub fn build(records: &[ScicapRecord], min_freq: usize, max_size: usize) -> Result<Self> {
        if max_size < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Config(format!(
                "vocabulary max_size must be at least {}, got {max_size}",
                SPECIAL_TOKENS.len() + 1
            )));
        }
        if records.is_empty() {
            return Err(Error::Contract(
                "cannot build a vocabulary from zero records".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for r in records {
            for text in [&r.caption, &r.figure_text, &r.abstract_text] {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&tok.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());

        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Vocabulary::from_tokens(tokens, min_freq, max_size))
    }

    /// Rebuilds from an id-ordered token list (specials included).
    pub fn from_tokens(id_to_token: Vec<String>, min_freq: usize, max_size: usize) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
            min_freq,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Token ids without specials; out-of-vocabulary words map to UNK.
    pub fn encode_text(&self, text: &str, max_len: usize) -> Vec<usize> {
        tokenize(text)
            .iter()
            .take(max_len)
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// `[BOS] + ids + [EOS]`, truncated to `max_len` with EOS kept last.
    pub fn encode_caption(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 3 {
            return Err(Error::Config(format!(
                "caption max_len must be at least 3, got {max_len}"
            )));
        }
        let mut ids = vec![BOS];
        ids.extend(self.encode_text(text, max_len - 2));
        ids.push(EOS);
        Ok(ids)
    }

    /// Joins the non-special tokens with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIAL_TOKENS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let v: Vocabulary = serde_json::from_slice(&fs::read(path.as_ref())?)?;
        Ok(Vocabulary::from_tokens(
            v.id_to_token,
            v.min_freq,
            v.max_size,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub id: String,
    pub caption_ids: Vec<usize>,
    pub figure_text_ids: Vec<usize>,
    pub abstract_ids: Vec<usize>,
    pub feature_ref: String,
}

impl TokenizedExample {
    pub fn from_record(
        record: &ScicapRecord,
        vocab: &Vocabulary,
        max_caption_len: usize,
        max_text_len: usize,
    ) -> Result<Self> {
        Ok(TokenizedExample {
            id: record.id.clone(),
            caption_ids: vocab.encode_caption(&record.caption, max_caption_len)?,
            figure_text_ids: vocab.encode_text(&record.figure_text, max_text_len),
            abstract_ids: vocab.encode_text(&record.abstract_text, max_text_len),
            feature_ref: record.feature_ref.clone(),
        })
    }

    pub fn caption_len(&self) -> usize {
        self.caption_ids.len()
    }
}

/// A group of examples with captions right-padded to a common length.
/// Figure text and abstract ids stay unpadded on the examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<TokenizedExample>,
    pub caption_ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_examples(examples: Vec<TokenizedExample>, pad_id: usize) -> Self {
        let width = examples.iter().map(|e| e.caption_len()).max().unwrap_or(0);
        let mut caption_ids = Vec::with_capacity(examples.len());
        let mut mask = Vec::with_capacity(examples.len());
        for e in &examples {
            let mut ids = e.caption_ids.clone();
            let mut m = vec![true; ids.len()];
            ids.resize(width, pad_id);
            m.resize(width, false);
            caption_ids.push(ids);
            mask.push(m);
        }
        Batch {
            examples,
            caption_ids,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn width(&self) -> usize {
        self.caption_ids.first().map_or(0, Vec::len)
    }
}

/// Shuffles deterministically under `seed`, then cuts into batches of
/// `batch_size` (the last may be smaller).
pub fn batch(
    examples: &[TokenizedExample],
    batch_size: usize,
    pad_id: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Contract("cannot batch zero examples".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let picked = chunk.iter().map(|&i| examples[i].clone()).collect();
            Batch::from_examples(picked, pad_id)
        })
        .collect())
}
