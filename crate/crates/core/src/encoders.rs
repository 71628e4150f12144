//! Affine dual encoders and the two-layer cluster-classification heads.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::math::{dot, DenseMatrix, EmbeddingBatch, FeatureBatch, RowBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Text,
}

/// `x -> W x + b`, with `W` stored `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub modality: Modality,
}

impl LinearEncoder {
    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

/// `e -> W2 relu(W1 e + b1) + b2`. The hidden layer is always three times as
/// wide as the embedding it consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

impl ClassificationHead {
    pub fn d_emb(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn clusters(&self) -> usize {
        self.w2.rows()
    }

    /// Builds a head from explicit parameters, enforcing the 3x hidden rule.
    pub fn new(w1: DenseMatrix, b1: Vec<f64>, w2: DenseMatrix, b2: Vec<f64>) -> Result<Self> {
        let d = w1.cols();
        if w1.rows() != 3 * d {
            bail!(Contract, "head hidden width {} must be 3 x {}", w1.rows(), d);
        }
        if b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows() {
            bail!(Contract, "inconsistent classification head shapes");
        }
        Ok(Self { w1, b1, w2, b2 })
    }
}

/// Everything a training stage updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub audio_encoder: LinearEncoder,
    pub text_encoder: LinearEncoder,
    pub audio_head: Option<ClassificationHead>,
    pub text_head: Option<ClassificationHead>,
    pub rng_seed: u64,
}

/// Gradients share the parameter layout.
pub type ParamGradients = ModelParams;

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let bound = 1.0 / libm::sqrt(cols as f64);
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

fn init_head(rng: &mut ChaCha8Rng, d_emb: usize, k: usize) -> ClassificationHead {
    let hidden = 3 * d_emb;
    ClassificationHead {
        w1: uniform_matrix(rng, hidden, d_emb),
        b1: vec![0.0; hidden],
        w2: uniform_matrix(rng, k, hidden),
        b2: vec![0.0; k],
    }
}

/// Fan-in uniform initialization, zero biases, deterministic per seed.
pub fn init_params(
    d_in_audio: usize,
    d_in_text: usize,
    d_emb: usize,
    clusters: Option<usize>,
    seed: u64,
) -> Result<ModelParams> {
    if d_in_audio == 0 || d_in_text == 0 {
        bail!(Config, "input widths must be at least 1");
    }
    if d_emb < 2 {
        bail!(Config, "embedding width must be at least 2, got {d_emb}");
    }
    if clusters == Some(0) {
        bail!(Config, "cluster count must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let audio_encoder = LinearEncoder {
        weight: uniform_matrix(&mut rng, d_emb, d_in_audio),
        bias: vec![0.0; d_emb],
        modality: Modality::Audio,
    };
    let text_encoder = LinearEncoder {
        weight: uniform_matrix(&mut rng, d_emb, d_in_text),
        bias: vec![0.0; d_emb],
        modality: Modality::Text,
    };
    let mut params = ModelParams { audio_encoder, text_encoder, audio_head: None, text_head: None, rng_seed: seed };
    if let Some(k) = clusters {
        params.audio_head = Some(init_head(&mut rng, d_emb, k));
        params.text_head = Some(init_head(&mut rng, d_emb, k));
    }
    Ok(params)
}

impl ModelParams {
    pub fn d_emb(&self) -> usize {
        self.audio_encoder.d_out()
    }

    pub fn clusters(&self) -> Option<usize> {
        self.text_head.as_ref().map(ClassificationHead::clusters)
    }

    /// Replaces both heads with freshly initialized ones predicting `k`
    /// clusters. Encoders are left untouched.
    pub fn attach_heads(&mut self, k: usize, seed: u64) -> Result<()> {
        if k == 0 {
            bail!(Config, "cluster count must be at least 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let d = self.d_emb();
        self.audio_head = Some(init_head(&mut rng, d, k));
        self.text_head = Some(init_head(&mut rng, d, k));
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_emb();
        if d < 2 || self.text_encoder.d_out() != d {
            bail!(Contract, "encoders must share an embedding width >= 2");
        }
        for enc in [&self.audio_encoder, &self.text_encoder] {
            if enc.bias.len() != enc.d_out() {
                bail!(Contract, "encoder bias length {} != {}", enc.bias.len(), enc.d_out());
            }
        }
        match (&self.audio_head, &self.text_head) {
            (None, None) => {}
            (Some(a), Some(t)) => {
                if a.clusters() != t.clusters() || a.d_emb() != d || t.d_emb() != d {
                    bail!(Contract, "heads must share K and consume the embedding width");
                }
            }
            _ => bail!(Contract, "audio and text heads must both be present or both absent"),
        }
        for (_, _, v) in self.tensors() {
            if v.iter().any(|x| !x.is_finite()) {
                bail!(Domain, "non-finite parameter");
            }
        }
        Ok(())
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Named parameter tensors in a fixed order: name, dims, values.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, enc) in [("audio_encoder", &self.audio_encoder), ("text_encoder", &self.text_encoder)] {
            out.push((
                alloc::format!("{name}.weight"),
                vec![enc.weight.rows(), enc.weight.cols()],
                enc.weight.values(),
            ));
            out.push((alloc::format!("{name}.bias"), vec![enc.bias.len()], &enc.bias[..]));
        }
        for (name, head) in [("audio_head", &self.audio_head), ("text_head", &self.text_head)] {
            if let Some(h) = head {
                out.push((alloc::format!("{name}.w1"), vec![h.w1.rows(), h.w1.cols()], h.w1.values()));
                out.push((alloc::format!("{name}.b1"), vec![h.b1.len()], &h.b1[..]));
                out.push((alloc::format!("{name}.w2"), vec![h.w2.rows(), h.w2.cols()], h.w2.values()));
                out.push((alloc::format!("{name}.b2"), vec![h.b2.len()], &h.b2[..]));
            }
        }
        out
    }

    /// Mutable views over every parameter, in the same order as [`tensors`](Self::tensors).
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for enc in [&mut self.audio_encoder, &mut self.text_encoder] {
            out.push(enc.weight.values_mut());
            out.push(&mut enc.bias[..]);
        }
        for h in [self.audio_head.as_mut(), self.text_head.as_mut()].into_iter().flatten() {
            out.push(h.w1.values_mut());
            out.push(&mut h.b1[..]);
            out.push(h.w2.values_mut());
            out.push(&mut h.b2[..]);
        }
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.tensors().into_iter().map(|(_, _, v)| v).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Rebuilds parameters from named tensors as produced by [`tensors`](Self::tensors).
    pub fn from_tensors<'a, I>(tensors: I, rng_seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
    {
        let mut found: Vec<(&str, &[usize], &[f64])> = tensors.into_iter().collect();
        let mut take = |name: &str| -> Result<Option<(Vec<usize>, Vec<f64>)>> {
            match found.iter().position(|(n, _, _)| *n == name) {
                Some(i) => {
                    let (_, dims, v) = found.remove(i);
                    Ok(Some((dims.to_vec(), v.to_vec())))
                }
                None => Ok(None),
            }
        };
        fn matrix(name: &str, t: Option<(Vec<usize>, Vec<f64>)>) -> Result<DenseMatrix> {
            match t {
                Some((dims, v)) if dims.len() == 2 => DenseMatrix::new(dims[0], dims[1], v),
                Some(_) => bail!(Contract, "tensor {name} must have rank 2"),
                None => bail!(Contract, "missing tensor {name}"),
            }
        }
        fn vector(name: &str, t: Option<(Vec<usize>, Vec<f64>)>) -> Result<Vec<f64>> {
            match t {
                Some((dims, v)) if dims.len() == 1 => Ok(v),
                Some(_) => bail!(Contract, "tensor {name} must have rank 1"),
                None => bail!(Contract, "missing tensor {name}"),
            }
        }
        let mut enc = |prefix: &str, modality| -> Result<LinearEncoder> {
            let w = alloc::format!("{prefix}.weight");
            let b = alloc::format!("{prefix}.bias");
            Ok(LinearEncoder { weight: matrix(&w, take(&w)?)?, bias: vector(&b, take(&b)?)?, modality })
        };
        let audio_encoder = enc("audio_encoder", Modality::Audio)?;
        let text_encoder = enc("text_encoder", Modality::Text)?;
        let mut head = |prefix: &str| -> Result<Option<ClassificationHead>> {
            let names = ["w1", "b1", "w2", "b2"].map(|s| alloc::format!("{prefix}.{s}"));
            let parts = [take(&names[0])?, take(&names[1])?, take(&names[2])?, take(&names[3])?];
            if parts.iter().all(Option::is_none) {
                return Ok(None);
            }
            let [w1, b1, w2, b2] = parts;
            ClassificationHead::new(
                matrix(&names[0], w1)?,
                vector(&names[1], b1)?,
                matrix(&names[2], w2)?,
                vector(&names[3], b2)?,
            )
            .map(Some)
        };
        let audio_head = head("audio_head")?;
        let text_head = head("text_head")?;
        if let Some((name, _, _)) = found.first() {
            bail!(Contract, "unexpected tensor {name}");
        }
        let params = ModelParams { audio_encoder, text_encoder, audio_head, text_head, rng_seed };
        params.validate()?;
        Ok(params)
    }
}

/// Row-wise affine map. No normalization: cosine similarity handles that.
pub fn encode(enc: &LinearEncoder, feats: &FeatureBatch) -> Result<EmbeddingBatch> {
    if feats.width() != enc.d_in() {
        bail!(Contract, "feature width {} does not match encoder input {}", feats.width(), enc.d_in());
    }
    let out = DenseMatrix::from_fn(feats.len(), enc.d_out(), |i, o| {
        dot(enc.weight.row(o), feats.values.row(i)) + enc.bias[o]
    });
    Ok(RowBatch { ids: feats.ids.clone(), values: out })
}

/// Hidden pre-activations and logits of a head forward pass.
pub(crate) struct HeadForward {
    pub pre: DenseMatrix,
    pub logits: DenseMatrix,
}

pub(crate) fn head_forward(head: &ClassificationHead, emb: &DenseMatrix) -> Result<HeadForward> {
    if emb.cols() != head.d_emb() {
        bail!(Contract, "embedding width {} does not match head input {}", emb.cols(), head.d_emb());
    }
    let pre = DenseMatrix::from_fn(emb.rows(), head.hidden(), |i, h| dot(head.w1.row(h), emb.row(i)) + head.b1[h]);
    let logits = DenseMatrix::from_fn(emb.rows(), head.clusters(), |i, k| {
        let hidden = pre.row(i);
        head.w2.row(k).iter().zip(hidden).map(|(w, x)| w * x.max(0.0)).sum::<f64>() + head.b2[k]
    });
    Ok(HeadForward { pre, logits })
}

/// Cluster logits `W2 relu(W1 e + b1) + b2`, one row per embedding.
pub fn classify(head: &ClassificationHead, emb: &EmbeddingBatch) -> Result<DenseMatrix> {
    Ok(head_forward(head, &emb.values)?.logits)
}
