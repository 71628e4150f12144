//! Synthetic planted-alignment datasets: every item has a latent vector `z`,
//! audio features are `A z + noise` and caption features `B z + noise` for
//! fixed random maps with orthonormal columns.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::evaluation::RelevanceMap;
use crate::math::{dot, l2_norm, DenseMatrix};
use crate::training::{PairDataset, SynonymTable, WordVectors};

/// Latent cosine above which another item counts as relevant.
pub const RELEVANCE_COSINE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureConfig {
    pub n_items: usize,
    pub d_latent: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub captions_per_audio: usize,
}

impl FixtureConfig {
    pub fn new(n_items: usize, d_latent: usize, d_audio: usize, d_text: usize, noise_sigma: f64, seed: u64) -> Self {
        Self { n_items, d_latent, d_audio, d_text, noise_sigma, seed, captions_per_audio: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items < 8 {
            bail!(Config, "fixtures need at least 8 items, got {}", self.n_items);
        }
        if self.d_latent == 0 || self.d_latent > self.d_audio.min(self.d_text) {
            bail!(
                Config,
                "d_latent {} must lie in 1..=min(d_audio {}, d_text {})",
                self.d_latent,
                self.d_audio,
                self.d_text
            );
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            bail!(Config, "noise_sigma must be finite and nonnegative, got {}", self.noise_sigma);
        }
        if self.captions_per_audio == 0 {
            bail!(Config, "captions_per_audio must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    /// `n_items x d_latent`.
    pub latents: DenseMatrix,
    /// `d_audio x d_latent`.
    pub audio_map: DenseMatrix,
    /// `d_text x d_latent`.
    pub text_map: DenseMatrix,
    /// One row per audio item.
    pub audio: DenseMatrix,
    /// One row per caption; captions of item `i` are consecutive.
    pub text: DenseMatrix,
    pub caption_audio: Vec<usize>,
    pub tokens: Vec<Vec<String>>,
    /// Split of every audio item (captions follow their audio).
    pub splits: Vec<Split>,
    pub synonyms: SynonymTable,
    pub word_vectors: WordVectors,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, one draw per call
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Gaussian `d x k` matrix with Gram-Schmidt orthonormalized columns.
fn orthonormal_map(d: usize, k: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for c in &cols {
            let p = dot(&v, c);
            v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
        }
        let n = l2_norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
    }
    DenseMatrix::from_fn(d, k, |i, j| cols[j][i])
}

fn word(k: usize, positive: bool) -> String {
    format!("k{k}{}", if positive { "up" } else { "down" })
}

pub fn generate_fixtures(cfg: &FixtureConfig) -> Result<Fixture> {
    cfg.validate()?;
    let (n, k) = (cfg.n_items, cfg.d_latent);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let audio_map = orthonormal_map(cfg.d_audio, k, &mut rng);
    let text_map = orthonormal_map(cfg.d_text, k, &mut rng);
    let latents = DenseMatrix::from_fn(n, k, |_, _| gaussian(&mut rng));

    let project = |map: &DenseMatrix, z: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..map.rows()).map(|r| dot(map.row(r), z) + cfg.noise_sigma * gaussian(rng)).collect()
    };
    let mut audio = DenseMatrix::zeros(n, cfg.d_audio);
    let mut text = DenseMatrix::zeros(n * cfg.captions_per_audio, cfg.d_text);
    let mut caption_audio = Vec::with_capacity(text.rows());
    let mut tokens = Vec::with_capacity(text.rows());
    for i in 0..n {
        let z = latents.row(i);
        audio.row_mut(i).copy_from_slice(&project(&audio_map, z, &mut rng));
        for c in 0..cfg.captions_per_audio {
            let row = i * cfg.captions_per_audio + c;
            text.row_mut(row).copy_from_slice(&project(&text_map, z, &mut rng));
            caption_audio.push(i);
            let mut t = vec![String::from("sound")];
            t.extend(z.iter().enumerate().map(|(d, &v)| word(d, v >= 0.0)));
            tokens.push(t);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let mut splits = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        splits[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut synonyms = SynonymTable::new();
    let mut word_vectors = WordVectors::new(cfg.d_text);
    synonyms.insert("sound", vec![String::from("noise")]);
    for d in 0..k {
        let col: Vec<f64> = (0..cfg.d_text).map(|r| 0.5 * text_map.get(r, d)).collect();
        let neg: Vec<f64> = col.iter().map(|x| -x).collect();
        synonyms.insert(word(d, true), vec![format!("k{d}rise")]);
        synonyms.insert(word(d, false), vec![format!("k{d}fall")]);
        word_vectors.insert(word(d, true), col.clone())?;
        word_vectors.insert(format!("k{d}rise"), col)?;
        word_vectors.insert(word(d, false), neg.clone())?;
        word_vectors.insert(format!("k{d}fall"), neg)?;
    }

    Ok(Fixture { latents, audio_map, text_map, audio, text, caption_audio, tokens, splits, synonyms, word_vectors })
}

impl Fixture {
    /// Audio items of one split, ascending.
    pub fn split_items(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Captions whose audio item belongs to `split`, ascending.
    pub fn split_captions(&self, split: Split) -> Vec<usize> {
        (0..self.caption_audio.len()).filter(|&c| self.splits[self.caption_audio[c]] == split).collect()
    }

    /// Pairs of one split with audio rows renumbered within the split.
    pub fn dataset(&self, split: Split) -> Result<PairDataset> {
        PairDataset::new(self.audio.clone(), self.text.clone(), self.caption_audio.clone(), Some(self.tokens.clone()))?
            .subset(&self.split_captions(split))
    }

    /// Relevance for the split's caption queries against its audio gallery:
    /// the paired item plus every item whose latent has cosine at least
    /// [`RELEVANCE_COSINE`] with the paired latent.
    pub fn relevance(&self, split: Split) -> Result<RelevanceMap> {
        let items = self.split_items(split);
        let local = |a: usize| items.binary_search(&a).expect("item in split");
        let mut paired = Vec::new();
        let mut relevant = Vec::new();
        for c in self.split_captions(split) {
            let a = self.caption_audio[c];
            let za = self.latents.row(a);
            let na = l2_norm(za);
            paired.push(local(a));
            relevant.push(
                items
                    .iter()
                    .enumerate()
                    .filter(|&(_, &b)| {
                        let zb = self.latents.row(b);
                        dot(za, zb) >= RELEVANCE_COSINE * na * l2_norm(zb)
                    })
                    .map(|(j, _)| j)
                    .collect(),
            );
        }
        RelevanceMap::new(paired, relevant, items.len())
    }
}
