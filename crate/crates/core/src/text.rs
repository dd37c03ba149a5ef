//! Corpus ingestion: tokenization, vocabulary, fixed-length encoding and
//! stratified train/validation/test splits.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Lowercases, splits on whitespace and peels leading/trailing punctuation off
/// each word as single-character tokens. Interior punctuation stays in the word.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let Some(start) = chars.iter().position(|&c| !is_punct(c)) else {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        };
        let end = chars.iter().rposition(|&c| !is_punct(c)).unwrap();
        tokens.extend(chars[..start].iter().map(|c| c.to_string()));
        tokens.push(chars[start..=end].iter().collect());
        tokens.extend(chars[end + 1..].iter().map(|c| c.to_string()));
    }
    tokens
}

/// Token ids with `0 = PAD` and `1 = UNK` reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocabulary::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// frequency and then lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::invalid("min_freq must be at least 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut documents = 0;
        for doc in corpus {
            documents += 1;
            for tok in tokenize(doc) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if documents == 0 {
            return Err(Error::invalid(
                "cannot build a vocabulary from an empty corpus",
            ));
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::invalid(
                "vocabulary must start with the reserved <pad> and <unk> entries",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(2) {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn build_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    min_freq: usize,
) -> Result<Vocabulary> {
    Vocabulary::build(corpus, min_freq)
}

/// A document as exactly `l_max` ids, right-padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    pub token_ids: Vec<usize>,
    pub true_length: usize,
}

pub fn encode(text: &str, vocab: &Vocabulary, l_max: usize) -> Encoded {
    assert!(l_max >= 1, "l_max must be positive");
    let mut token_ids: Vec<usize> = tokenize(text)
        .iter()
        .take(l_max)
        .map(|t| vocab.id(t))
        .collect();
    let true_length = token_ids.len();
    token_ids.resize(l_max, PAD);
    Encoded {
        token_ids,
        true_length,
    }
}

/// Tokens of the unpadded prefix.
pub fn decode(encoded: &Encoded, vocab: &Vocabulary) -> Vec<String> {
    encoded.token_ids[..encoded.true_length]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN).to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Line index of the document in its source dataset.
    pub id: usize,
    pub token_ids: Vec<usize>,
    pub true_length: usize,
    pub label: usize,
}

/// Labeled raw documents with labels indexed in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub texts: Vec<String>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
}

impl Dataset {
    /// Parses `label<TAB>text` lines; blank lines are skipped but still count
    /// toward line numbering in errors.
    pub fn parse(content: &str, source: &str) -> Result<Self> {
        let mut ds = Dataset::default();
        let mut label_ids: HashMap<String, usize> = HashMap::new();
        for (lineno, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((label, text)) = line.split_once('\t') else {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: lineno + 1,
                    msg: "expected `label<TAB>text`".into(),
                });
            };
            let label = label.trim();
            if label.is_empty() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: lineno + 1,
                    msg: "empty label".into(),
                });
            }
            let next = label_ids.len();
            let id = *label_ids.entry(label.to_string()).or_insert_with(|| {
                ds.label_names.push(label.to_string());
                next
            });
            ds.texts.push(text.to_string());
            ds.labels.push(id);
        }
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path)?;
        Self::parse(&content, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (text, &label) in self.texts.iter().zip(&self.labels) {
            out.push_str(&self.label_names[label]);
            out.push('\t');
            out.push_str(text);
            out.push('\n');
        }
        out
    }

    /// Encodes the documents at `indices`, keeping their dataset index as the example id.
    pub fn encode_indices(
        &self,
        indices: &[usize],
        vocab: &Vocabulary,
        l_max: usize,
    ) -> Vec<Example> {
        indices
            .iter()
            .map(|&i| {
                let enc = encode(&self.texts[i], vocab, l_max);
                Example {
                    id: i,
                    token_ids: enc.token_ids,
                    true_length: enc.true_length,
                    label: self.labels[i],
                }
            })
            .collect()
    }

    pub fn encode_all(&self, vocab: &Vocabulary, l_max: usize) -> Vec<Example> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.encode_indices(&all, vocab, l_max)
    }

    /// Re-indexes labels against a known label list, e.g. a trained model's.
    pub fn relabel(&self, names: &[String]) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| {
                let name = &self.label_names[l];
                names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::invalid(format!("label {name:?} unknown to the model")))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub validation_fraction_of_train: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, validation_fraction_of_train: f64, seed: u64) -> Self {
        SplitSpec {
            train_fraction,
            test_fraction: 1.0 - train_fraction,
            validation_fraction_of_train,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.train_fraction)
            || !open(self.test_fraction)
            || !open(self.validation_fraction_of_train)
        {
            return Err(Error::invalid(format!(
                "split fractions must lie in (0, 1): {self:?}"
            )));
        }
        if (self.train_fraction + self.test_fraction - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("train and test fractions must sum to 1"));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::new(0.8, 0.05, 0)
    }
}

/// Disjoint dataset index sets, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Seeded, label-stratified split. Test takes `round(N * test_fraction)`,
/// validation takes `round(rest * validation_fraction_of_train)`, train the remainder.
pub fn split(labels: &[usize], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let n = labels.len();
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng::stream(spec.seed, 0x5917);
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    // Interleave classes by fractional rank so that every prefix of the ordering
    // holds each class in proportion to its size.
    let mut order: Vec<(usize, usize, usize)> = Vec::with_capacity(n);
    for (c, members) in by_class.iter().enumerate() {
        for (r, &i) in members.iter().enumerate() {
            order.push((c, r, i));
        }
    }
    order.sort_by(|&(ca, ra, _), &(cb, rb, _)| {
        let lhs = (2 * ra as u128 + 1) * by_class[cb].len() as u128;
        let rhs = (2 * rb as u128 + 1) * by_class[ca].len() as u128;
        lhs.cmp(&rhs).then(ca.cmp(&cb))
    });

    let n_test = ((n as f64) * spec.test_fraction).round() as usize;
    let n_rest = n - n_test;
    let n_val = ((n_rest as f64) * spec.validation_fraction_of_train).round() as usize;
    let ids: Vec<usize> = order.into_iter().map(|(_, _, i)| i).collect();
    let mut test = ids[..n_test].to_vec();
    let mut val = ids[n_test..n_test + n_val].to_vec();
    let mut train = ids[n_test + n_val..].to_vec();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();

    let mut warnings = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
            if !part.iter().any(|&i| labels[i] == c) {
                let msg = format!("class {c} is absent from the {name} split");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    Ok(Splits {
        train,
        val,
        test,
        warnings,
    })
}
