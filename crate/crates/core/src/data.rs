//! Vocabulary, word-level tokenizer, TSV pair ingestion and the synthetic
//! aspect-matching task.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const RESERVED_TOKENS: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED_TOKENS {
            v.push(t.to_string());
        }
        v
    }

    fn push(&mut self, token: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Adds `token` unless present; returns its id.
    pub fn add(&mut self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&id) => id,
            None => self.push(token.to_string()),
        }
    }

    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    /// One token per line; the token on line `i` (0-based) gets id `i + 3`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v = Vocab::new();
        for (i, line) in text.lines().enumerate() {
            let token = line.trim_end_matches('\r');
            if token.is_empty() || v.index.contains_key(token) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("empty or duplicate vocabulary entry `{token}`"),
                });
            }
            v.push(token.to_string());
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[RESERVED_TOKENS.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercased words, with each punctuation character as its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            words.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// `[CLS]` followed by word ids (UNK when unknown), truncated to `max_len` ids.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    std::iter::once(CLS_ID)
        .chain(split_words(text).iter().map(|w| vocab.id(w)))
        .take(max_len.max(1))
        .collect()
}

/// Inverse of [`tokenize`] for vocabularies of plain lowercase words.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| id != CLS_ID && id != PAD_ID)
        .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairExample {
    pub id: String,
    pub seq_a: Vec<u32>,
    pub seq_b: Vec<u32>,
    pub label: usize,
}

/// Class names, with the class treated as positive for F1 and pair ranking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    pub names: Vec<String>,
    pub positive: usize,
}

impl LabelSet {
    pub fn new(names: Vec<String>, positive: usize) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::config("labels", "at least two labels are required"));
        }
        if positive >= names.len() {
            return Err(Error::config(
                "positive_label",
                "must name one of the labels",
            ));
        }
        Ok(LabelSet { names, positive })
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<PairExample>,
    pub labels: LabelSet,
}

/// Reads `text_a<TAB>text_b<TAB>label` lines. Blank lines are skipped; any other
/// line that does not parse is an error.
pub fn load_tsv_pairs(
    path: &Path,
    vocab: &Vocab,
    labels: &LabelSet,
    max_len: usize,
) -> Result<Vec<PairExample>> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let label = labels.index(cols[2].trim()).ok_or_else(|| {
            parse_err(format!(
                "unknown label `{}`; permitted labels: {}",
                cols[2].trim(),
                labels.names.join(", ")
            ))
        })?;
        out.push(PairExample {
            id: format!("{name}:{}", i + 1),
            seq_a: tokenize(cols[0], vocab, max_len),
            seq_b: tokenize(cols[1], vocab, max_len),
            label,
        });
    }
    Ok(out)
}

pub fn write_tsv_pairs(
    path: &Path,
    examples: &[PairExample],
    vocab: &Vocab,
    labels: &LabelSet,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        writeln!(
            f,
            "{}\t{}\t{}",
            detokenize(&ex.seq_a, vocab),
            detokenize(&ex.seq_b, vocab),
            labels.names[ex.label]
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Sentences for the encode/match pipeline: `id<TAB>text` per line, or bare text
/// (the id is then the 1-based line number).
pub fn load_sentences(
    path: &Path,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<(String, Vec<u32>)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = match line.split_once('\t') {
            Some((id, body)) => (id.to_string(), body),
            None => ((i + 1).to_string(), line),
        };
        out.push((id, tokenize(body, vocab, max_len)));
    }
    Ok(out)
}

/// Synthetic pair task: each sequence holds one token from each aspect's disjoint
/// token group, in shuffled order, and a pair matches iff every aspect agrees.
#[derive(Clone, Debug)]
pub struct AspectTask {
    pub num_aspects: usize,
    pub vocab_per_aspect: usize,
    pub vocab: Vocab,
    pub train: Dataset,
    /// Held out for model selection; empty unless requested.
    pub val: Dataset,
    pub test: Dataset,
}

pub const MISMATCH: usize = 0;
pub const MATCH: usize = 1;

pub fn aspect_labels() -> LabelSet {
    LabelSet {
        names: vec!["mismatch".into(), "match".into()],
        positive: MATCH,
    }
}

pub fn aspect_token(aspect: usize, j: usize) -> String {
    format!("a{aspect}t{j}")
}

pub fn aspect_vocab(num_aspects: usize, vocab_per_aspect: usize) -> Vocab {
    let names: Vec<String> = (0..num_aspects)
        .flat_map(|a| (0..vocab_per_aspect).map(move |j| aspect_token(a, j)))
        .collect();
    Vocab::from_tokens(names.iter().map(String::as_str))
}

/// Aspect of a token id in the vocabulary built by [`aspect_vocab`].
pub fn aspect_of(id: u32, vocab_per_aspect: usize) -> Option<usize> {
    (id as usize)
        .checked_sub(RESERVED_TOKENS.len())
        .map(|i| i / vocab_per_aspect)
}

type Assignment = Vec<u8>;

pub fn gen_aspect_task(
    num_aspects: usize,
    vocab_per_aspect: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<AspectTask> {
    gen_aspect_task_with_val(num_aspects, vocab_per_aspect, n_train, 0, n_test, seed)
}

/// Like [`gen_aspect_task`], plus a validation split disjoint from both others.
/// The train and test splits do not depend on `n_val`.
pub fn gen_aspect_task_with_val(
    num_aspects: usize,
    vocab_per_aspect: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<AspectTask> {
    if num_aspects < 2 {
        return Err(Error::Argument(
            "the aspect task needs at least 2 aspects".into(),
        ));
    }
    if !(2..=256).contains(&vocab_per_aspect) {
        return Err(Error::Argument(
            "vocab_per_aspect must lie in [2, 256]".into(),
        ));
    }
    let distinct = (vocab_per_aspect as f64).powi(num_aspects as i32);
    let splits = [n_train, n_val, n_test];
    let positives = splits.iter().map(|n| n / 2).sum::<usize>() as f64;
    let negatives = splits.iter().map(|n| n - n / 2).sum::<usize>() as f64;
    if positives > distinct || negatives > distinct * (distinct - 1.0) / 2.0 {
        return Err(Error::Argument(format!(
            "{n_train} + {n_val} + {n_test} examples do not fit {num_aspects} aspects of {vocab_per_aspect} tokens"
        )));
    }

    let vocab = aspect_vocab(num_aspects, vocab_per_aspect);
    let mut seen = HashSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = gen_split(
        "train",
        n_train,
        num_aspects,
        vocab_per_aspect,
        &mut rng,
        &mut seen,
    )?;
    rng.set_stream(1);
    let test = gen_split(
        "test",
        n_test,
        num_aspects,
        vocab_per_aspect,
        &mut rng,
        &mut seen,
    )?;
    rng.set_stream(3);
    let val = gen_split(
        "val",
        n_val,
        num_aspects,
        vocab_per_aspect,
        &mut rng,
        &mut seen,
    )?;
    Ok(AspectTask {
        num_aspects,
        vocab_per_aspect,
        vocab,
        train: Dataset {
            examples: train,
            labels: aspect_labels(),
        },
        val: Dataset {
            examples: val,
            labels: aspect_labels(),
        },
        test: Dataset {
            examples: test,
            labels: aspect_labels(),
        },
    })
}

fn gen_split(
    prefix: &str,
    n: usize,
    num_aspects: usize,
    vpa: usize,
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<(Assignment, Assignment)>,
) -> Result<Vec<PairExample>> {
    let n_pos = n / 2;
    let mut labels: Vec<usize> = (0..n)
        .map(|i| if i < n_pos { MATCH } else { MISMATCH })
        .collect();
    labels.shuffle(rng);
    let max_attempts = 1000 * n.max(1);
    let mut attempts = 0;
    let mut out = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let (a, b) = loop {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Argument(format!(
                    "could not draw {n} distinct {prefix} pairs"
                )));
            }
            let a: Assignment = (0..num_aspects)
                .map(|_| rng.gen_range(0..vpa) as u8)
                .collect();
            let mut b = a.clone();
            if label == MISMATCH {
                let changed = rng.gen_range(1..=num_aspects);
                let mut aspects: Vec<usize> = (0..num_aspects).collect();
                aspects.shuffle(rng);
                for &asp in &aspects[..changed] {
                    let shift = rng.gen_range(1..vpa) as u8;
                    b[asp] = ((b[asp] as usize + shift as usize) % vpa) as u8;
                }
            }
            let key = if a <= b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            };
            if seen.insert(key) {
                break (a, b);
            }
        };
        out.push(PairExample {
            id: format!("{prefix}-{i}"),
            seq_a: aspect_sequence(&a, vpa, rng),
            seq_b: aspect_sequence(&b, vpa, rng),
            label,
        });
    }
    Ok(out)
}

fn aspect_sequence(assignment: &[u8], vpa: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut tokens: Vec<u32> = assignment
        .iter()
        .enumerate()
        .map(|(asp, &j)| (RESERVED_TOKENS.len() + asp * vpa + j as usize) as u32)
        .collect();
    tokens.shuffle(rng);
    std::iter::once(CLS_ID).chain(tokens).collect()
}

/// Raw synthetic sequences for the encode/match pipeline, ids `seq-0000` upward.
pub fn gen_aspect_sequences(
    num_aspects: usize,
    vocab_per_aspect: usize,
    n: usize,
    seed: u64,
) -> Vec<(String, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    (0..n)
        .map(|i| {
            let a: Assignment = (0..num_aspects)
                .map(|_| rng.gen_range(0..vocab_per_aspect) as u8)
                .collect();
            (
                format!("seq-{i:04}"),
                aspect_sequence(&a, vocab_per_aspect, &mut rng),
            )
        })
        .collect()
}
