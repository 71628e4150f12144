//! Deterministic caption augmentation: single-word deletion or synonym
//! replacement, and feature-space mixing of two training pairs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};

/// Word -> interchangeable words.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymTable {
    map: BTreeMap<String, Vec<String>>,
}

impl SynonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: impl Into<String>, synonyms: Vec<String>) {
        self.map.insert(word.into(), synonyms);
    }

    pub fn synonyms(&self, word: &str) -> &[String] {
        self.map.get(word).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.map.iter()
    }
}

/// Per-word vectors; a caption's feature contribution is the sum over its
/// words (unknown words contribute nothing).
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    dim: usize,
    map: BTreeMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        Self { dim, map: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, word: impl Into<String>, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            bail!(Contract, "word vector has {} entries, expected {}", v.len(), self.dim);
        }
        self.map.insert(word.into(), v);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.map.get(word).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn pool(&self, tokens: &[String]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.dim];
        for t in tokens {
            if let Some(v) = self.map.get(t) {
                out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    /// Probability that a caption receives one word edit.
    pub word_edit_probability: f64,
    pub synonyms: SynonymTable,
    /// Mixed pairs added to each training epoch.
    pub mix_count: usize,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { word_edit_probability: 0.8, synonyms: SynonymTable::new(), mix_count: 0, rng_seed: 0 }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.word_edit_probability) {
            bail!(Config, "word edit probability must lie in [0, 1], got {}", self.word_edit_probability);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionEdit {
    Delete(usize),
    /// Replace the word at `position` with its `choice`-th synonym.
    Replace {
        position: usize,
        choice: usize,
    },
}

impl CaptionEdit {
    pub fn apply(&self, tokens: &[String], synonyms: &SynonymTable) -> Result<Vec<String>> {
        let mut out = tokens.to_vec();
        match *self {
            CaptionEdit::Delete(pos) => {
                if pos >= out.len() {
                    bail!(Contract, "deletion position {pos} outside caption of {} words", out.len());
                }
                out.remove(pos);
            }
            CaptionEdit::Replace { position, choice } => {
                let Some(word) = out.get(position) else {
                    bail!(Contract, "replacement position {position} outside caption of {} words", out.len());
                };
                let Some(syn) = synonyms.synonyms(word).get(choice) else {
                    bail!(Contract, "word {word:?} has no synonym #{choice}");
                };
                out[position] = syn.clone();
            }
        }
        Ok(out)
    }
}

/// With probability `word_edit_probability`, deletes or replaces (fair coin)
/// one uniformly chosen word. Replacement is skipped when the word has no
/// synonym; deletion is skipped on single-word captions.
pub fn augment_caption<R: Rng + ?Sized>(
    tokens: &[String],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Vec<String>> {
    if tokens.is_empty() {
        bail!(Data, "cannot augment an empty caption");
    }
    cfg.validate()?;
    if !rng.gen_bool(cfg.word_edit_probability) {
        return Ok(tokens.to_vec());
    }
    let position = rng.gen_range(0..tokens.len());
    let delete = rng.gen_bool(0.5);
    if delete {
        if tokens.len() == 1 {
            return Ok(tokens.to_vec());
        }
        return CaptionEdit::Delete(position).apply(tokens, &cfg.synonyms);
    }
    let options = cfg.synonyms.synonyms(&tokens[position]).len();
    if options == 0 {
        return Ok(tokens.to_vec());
    }
    let choice = rng.gen_range(0..options);
    CaptionEdit::Replace { position, choice }.apply(tokens, &cfg.synonyms)
}

/// One audio-feature / caption pair as seen by the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
    pub tokens: Vec<String>,
    pub synthetic: bool,
}

/// Equal-gain mix of two pairs: features averaged, captions joined with "and".
pub fn mix_pairs(a: &TrainingPair, b: &TrainingPair) -> Result<TrainingPair> {
    if a.audio.len() != b.audio.len() || a.text.len() != b.text.len() {
        bail!(Contract, "cannot mix pairs with different feature widths");
    }
    let avg = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| 0.5 * p + 0.5 * q).collect::<Vec<f64>>();
    let mut tokens = a.tokens.clone();
    tokens.push(String::from("and"));
    tokens.extend(b.tokens.iter().cloned());
    Ok(TrainingPair { audio: avg(&a.audio, &b.audio), text: avg(&a.text, &b.text), tokens, synthetic: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn table() -> SynonymTable {
        let mut t = SynonymTable::new();
        t.insert("dog", words("hound puppy"));
        t.insert("barks", words("yaps"));
        t
    }

    #[test]
    fn zero_probability_is_identity() {
        let cfg = AugmentationConfig { word_edit_probability: 0.0, synonyms: table(), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(
                augment_caption(&words("a dog barks loudly"), &cfg, &mut rng).unwrap(),
                words("a dog barks loudly")
            );
        }
    }

    #[test]
    fn deletion_removes_one_word() {
        let out = CaptionEdit::Delete(2).apply(&words("a dog barks very loudly"), &table()).unwrap();
        assert_eq!(out, words("a dog very loudly"));
        let out = CaptionEdit::Replace { position: 1, choice: 1 }.apply(&words("a dog barks"), &table()).unwrap();
        assert_eq!(out, words("a puppy barks"));
        assert!(CaptionEdit::Replace { position: 0, choice: 0 }.apply(&words("a dog"), &table()).is_err());
    }

    #[test]
    fn certain_edit_changes_at_most_one_word() {
        let cfg = AugmentationConfig { word_edit_probability: 1.0, synonyms: table(), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let caption = words("the dog barks at night");
        let (mut deletions, mut replacements) = (0, 0);
        for _ in 0..400 {
            let out = augment_caption(&caption, &cfg, &mut rng).unwrap();
            if out.len() == 4 {
                deletions += 1;
            } else {
                assert_eq!(out.len(), 5);
                let diff = out.iter().zip(&caption).filter(|(a, b)| a != b).count();
                assert!(diff <= 1);
                replacements += usize::from(diff == 1);
            }
        }
        // coin flip: roughly half deletions; replacements only hit 2 of 5 words
        assert!((150..250).contains(&deletions), "{deletions}");
        assert!(replacements > 40, "{replacements}");
    }

    #[test]
    fn fixed_seed_reproduces() {
        let cfg = AugmentationConfig { synonyms: table(), ..Default::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            (0..20)
                .map(|_| augment_caption(&words("dog barks at the mailman"), &cfg, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_caption_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(augment_caption(&[], &AugmentationConfig::default(), &mut rng), Err(crate::Error::Data(_))));
    }

    #[test]
    fn mixing_examples() {
        let p = |a: Vec<f64>, s: &str| TrainingPair { audio: a.clone(), text: a, tokens: words(s), synthetic: false };
        let x = p(vec![0.3, -1.0], "dog barks");
        let mixed = mix_pairs(&x, &x).unwrap();
        assert_eq!(mixed.audio, x.audio);
        let mixed = mix_pairs(&p(vec![0.0, 2.0], "dog barks"), &p(vec![2.0, 0.0], "rain falls")).unwrap();
        assert_eq!(mixed.audio, vec![1.0, 1.0]);
        assert_eq!(mixed.tokens.join(" "), "dog barks and rain falls");
        assert!(mixed.synthetic);
        assert!(mix_pairs(&p(vec![0.0], "a"), &p(vec![0.0, 1.0], "b")).is_err());
    }

    #[test]
    fn word_vectors_pool_sums_known_words() {
        let mut wv = WordVectors::new(2);
        wv.insert("dog", vec![1.0, 0.0]).unwrap();
        wv.insert("barks", vec![0.0, 2.0]).unwrap();
        assert_eq!(wv.pool(&words("the dog barks")), vec![1.0, 2.0]);
        assert!(wv.insert("x", vec![1.0]).is_err());
    }
}
