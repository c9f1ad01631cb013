//! Text corpora, vocabularies, word vectors, padded batches and synthetic
//! tasks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::glorot_bound;
use crate::encoder::Mask;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved pad and unknown entries.
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Adds every distinct token in first-seen order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Format("vocabulary must start with <pad> <unk>".into()));
        }
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in &tokens {
            if v.index.contains_key(t.as_str()) {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
            v.insert(t);
        }
        Ok(v)
    }

    /// Vocabulary of synthetic ids `0..size`, spelled `w{id}` past the
    /// reserved entries.
    pub fn synthetic(size: usize) -> Self {
        let mut v = Self::new();
        for id in 2..size {
            v.insert(&format!("w{id}"));
        }
        v
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TsvRow {
    pub label: String,
    pub tokens: Vec<String>,
}

/// Rows of a `label<TAB>text` file, in file order. Text is split on
/// whitespace; casing is kept.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TsvCorpus {
    pub rows: Vec<TsvRow>,
}

pub fn load_tsv(path: impl AsRef<Path>) -> Result<TsvCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    parse_tsv(&text)
}

pub fn parse_tsv(text: &str) -> Result<TsvCorpus> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {lineno}: expected label<TAB>text")))?;
        if label.is_empty() {
            return Err(Error::Format(format!("line {lineno}: empty label")));
        }
        let tokens: Vec<String> = body.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::Format(format!("line {lineno}: empty text")));
        }
        rows.push(TsvRow {
            label: label.to_string(),
            tokens,
        });
    }
    Ok(TsvCorpus { rows })
}

impl TsvCorpus {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct labels in order of first appearance.
    pub fn label_names(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for r in &self.rows {
            if !seen.contains(&r.label) {
                seen.push(r.label.clone());
            }
        }
        seen
    }

    pub fn class_count(&self) -> usize {
        self.label_names().len()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::build(self.rows.iter().flat_map(|r| r.tokens.iter().map(String::as_str)))
    }

    /// Maps tokens through `vocab` (unknown → [`UNK`]) and labels through
    /// their position in `labels`.
    pub fn to_dataset(&self, vocab: &Vocab, labels: &[String]) -> Result<Dataset> {
        let examples = self
            .rows
            .iter()
            .enumerate()
            .map(|(n, r)| {
                let label = labels
                    .iter()
                    .position(|l| *l == r.label)
                    .ok_or_else(|| Error::Input(format!("row {}: unknown label {:?}", n + 1, r.label)))?;
                Ok(Example {
                    label,
                    tokens: r.tokens.iter().map(|t| vocab.id(t)).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Dataset::new(examples, labels.len())
    }

    pub fn to_tsv_string(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&r.label);
            out.push('\t');
            out.push_str(&r.tokens.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv_string())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub class_count: usize,
    pub max_len: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, class_count: usize) -> Result<Self> {
        for (n, e) in examples.iter().enumerate() {
            if e.label >= class_count {
                return Err(Error::Input(format!("example {n}: label {} >= {class_count}", e.label)));
            }
            if e.tokens.is_empty() {
                return Err(Error::Input(format!("example {n}: empty sequence")));
            }
        }
        let max_len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        Ok(Dataset {
            examples,
            class_count,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Text form with tokens spelled through `vocab` and labels as their ids.
    pub fn to_corpus(&self, vocab: &Vocab) -> TsvCorpus {
        TsvCorpus {
            rows: self
                .examples
                .iter()
                .map(|e| TsvRow {
                    label: e.label.to_string(),
                    tokens: e.tokens.iter().map(|&t| vocab.token(t).to_string()).collect(),
                })
                .collect(),
        }
    }
}

/// `V×E` word-vector table. Row [`PAD`] is zero and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub table: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> EmbeddingTable<T> {
    /// Glorot-uniform rows, trainable.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = glorot_bound(vocab_size, dim);
        let mut table = Tensor::from_fn([vocab_size, dim], |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)));
        table.data_mut()[..dim].fill(T::zero());
        EmbeddingTable { table, trainable: true }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

/// Reads `token v1 … vE` lines. Vocabulary tokens found in the file take the
/// file's values, the rest are drawn Glorot-uniform from `seed`. The table
/// is frozen.
pub fn load_word_vectors<T: Real>(path: impl AsRef<Path>, vocab: &Vocab, seed: u64) -> Result<EmbeddingTable<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    parse_word_vectors(&text, vocab, seed)
}

pub fn parse_word_vectors<T: Real>(text: &str, vocab: &Vocab, seed: u64) -> Result<EmbeddingTable<T>> {
    let mut dim = None;
    let mut found: Vec<(usize, Vec<f64>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("line {}: expected finite vector components", n + 1)));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(e) if e != values.len() => {
                return Err(Error::Format(format!(
                    "line {}: {} components, earlier lines have {e}",
                    n + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        if let Some(id) = vocab.get(token) {
            found.push((id, values));
        }
    }
    let dim = dim.ok_or_else(|| Error::Format("no word vectors found".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = EmbeddingTable::<T>::random(vocab.len(), dim, &mut rng);
    for (id, values) in found {
        if id == PAD {
            continue;
        }
        let row = &mut table.table.data_mut()[id * dim..(id + 1) * dim];
        for (r, v) in row.iter_mut().zip(values) {
            *r = T::from_f64_lossy(v);
        }
    }
    table.trainable = false;
    Ok(table)
}

/// A padded batch. `ids` is `B×T` with [`PAD`] past each true length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Mask,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        let steps = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let ids = examples
            .iter()
            .map(|e| {
                let mut row = e.tokens.clone();
                row.resize(steps, PAD);
                row
            })
            .collect();
        let mask = Mask::from_lengths(examples.iter().map(|e| e.tokens.len()).collect(), steps)?;
        Ok(Batch {
            ids,
            mask,
            labels: examples.iter().map(|e| e.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Token ids flattened batch-major (`b·T + t`).
    pub fn flat_ids(&self) -> Vec<usize> {
        self.ids.concat()
    }

    /// Rows `[start, start+len)` as their own batch, keeping this batch's
    /// timestep count.
    pub fn sub_batch(&self, start: usize, len: usize) -> Result<Batch> {
        let end = start + len;
        Ok(Batch {
            ids: self.ids[start..end].to_vec(),
            mask: Mask::from_lengths(self.mask.lengths()[start..end].to_vec(), self.mask.steps())?,
            labels: self.labels[start..end].to_vec(),
        })
    }
}

/// Splits `dataset` into padded batches, shuffled by `shuffle_seed` when
/// given. Every example appears exactly once.
pub fn batch_pad(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&Example> = chunk.iter().map(|&i| &dataset.examples[i]).collect();
            Batch::from_examples(&members)
        })
        .collect()
}

/// Class tokens and the first distractor id of the first-token task.
pub const FIRST_TOKEN_CLASSES: [usize; 2] = [2, 3];
const FIRST_DISTRACTOR: usize = 4;

/// Sequences whose label is fixed by their first token (2 → class 0,
/// 3 → class 1) followed by `steps − 1` uniform distractors from
/// `[4, vocab_size)`. Train and test come from one seeded stream.
pub fn gen_first_token_task(n_train: usize, n_test: usize, steps: usize, vocab_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if vocab_size <= FIRST_DISTRACTOR || steps < 2 {
        return Err(Error::Contract(format!(
            "first-token task needs vocab_size >= 5 and T >= 2 (got {vocab_size}, {steps})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Result<Dataset> {
        let examples = (0..n)
            .map(|_| {
                let label = rng.gen_range(0..2);
                let mut tokens = vec![FIRST_TOKEN_CLASSES[label]];
                tokens.extend((1..steps).map(|_| rng.gen_range(FIRST_DISTRACTOR..vocab_size)));
                Example { label, tokens }
            })
            .collect();
        Dataset::new(examples, 2)
    };
    let train = draw(n_train)?;
    let test = draw(n_test)?;
    Ok((train, test))
}

/// Uniform random tokens from `[2, vocab_size)` with independent uniform
/// binary labels: learnable only by memorization.
pub fn gen_random_label_task(n: usize, steps: usize, vocab_size: usize, seed: u64) -> Result<Dataset> {
    if vocab_size <= 2 || steps == 0 {
        return Err(Error::Contract("random-label task needs vocab_size >= 3 and T >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| Example {
            label: rng.gen_range(0..2),
            tokens: (0..steps).map(|_| rng.gen_range(2..vocab_size)).collect(),
        })
        .collect();
    Dataset::new(examples, 2)
}
