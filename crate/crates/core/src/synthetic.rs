//! A two-class keyword corpus: every document mixes neutral filler with
//! keywords of its own class only, so a bag-of-keywords rule labels it exactly.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng;
use crate::text::{tokenize, Dataset};

pub const POSITIVE: [&str; 6] = [
    "excellent",
    "wonderful",
    "superb",
    "delightful",
    "brilliant",
    "charming",
];
pub const NEGATIVE: [&str; 6] = [
    "terrible", "awful", "dreadful", "horrible", "tedious", "clumsy",
];

const FILLER: [&str; 40] = [
    "the",
    "a",
    "film",
    "movie",
    "story",
    "plot",
    "actor",
    "scene",
    "was",
    "is",
    "and",
    "of",
    "with",
    "it",
    "this",
    "that",
    "ending",
    "music",
    "camera",
    "script",
    "director",
    "cast",
    "really",
    "quite",
    "very",
    "some",
    "moments",
    "time",
    "watch",
    "seen",
    "people",
    "screen",
    "character",
    "dialogue",
    "pace",
    "hour",
    "night",
    "friend",
    "show",
    "part",
];

pub const LABELS: [&str; 2] = ["pos", "neg"];

/// `n` documents with balanced, alternating labels, 8 to 30 tokens each.
pub fn keyword_corpus(n: usize, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, 0x5e7);
    let mut ds = Dataset {
        label_names: LABELS.iter().map(|s| s.to_string()).collect(),
        ..Dataset::default()
    };
    for i in 0..n {
        let label = i % 2;
        let keywords: &[&str] = if label == 0 { &POSITIVE } else { &NEGATIVE };
        let len = rng.gen_range(8..=30);
        let n_keys = rng.gen_range(1..=3);
        let mut words: Vec<&str> = (0..len - n_keys)
            .map(|_| *FILLER.choose(&mut rng).unwrap())
            .collect();
        for _ in 0..n_keys {
            let at = rng.gen_range(0..=words.len());
            words.insert(at, keywords.choose(&mut rng).unwrap());
        }
        let mut text = words.join(" ");
        if rng.gen_bool(0.5) {
            text.push('.');
        }
        ds.texts.push(text);
        ds.labels.push(label);
    }
    ds
}

/// Label by keyword counts; `None` when the document has no keyword or a tie.
pub fn keyword_oracle(text: &str) -> Option<usize> {
    let tokens = tokenize(text);
    let count = |set: &[&str]| tokens.iter().filter(|t| set.contains(&t.as_str())).count();
    let (p, n) = (count(&POSITIVE), count(&NEGATIVE));
    match p.cmp(&n) {
        std::cmp::Ordering::Greater => Some(0),
        std::cmp::Ordering::Less => Some(1),
        std::cmp::Ordering::Equal => None,
    }
}
