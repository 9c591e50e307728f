use serde::{Deserialize, Serialize};

use super::model::{EmbeddedTokens, ViTModel};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Matrix;
use crate::store::{Artifact, ArtifactReader, ArtifactWriter, Tensor};

/// Instrumented output of one forward pass. CLS is excluded from the
/// token embeddings and the keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub image_id: u64,
    /// `T' x d` final-normalised token embeddings.
    pub token_embeddings: Matrix,
    pub cls_embedding: Vec<f64>,
    pub heads: usize,
    pub head_dim: usize,
    /// Last-block keys, laid out `heads x T' x head_dim`.
    pub per_head_keys: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub token_positions: Vec<usize>,
}

impl ActivationRecord {
    pub fn tokens(&self) -> usize {
        self.token_positions.len()
    }

    pub fn key(&self, head: usize, token: usize) -> &[f64] {
        let off = (head * self.tokens() + token) * self.head_dim;
        &self.per_head_keys[off..off + self.head_dim]
    }

    /// Probability of class 1.
    pub fn p1(&self) -> f64 {
        self.probs[1]
    }

    pub fn predicted(&self) -> u8 {
        u8::from(self.probs[1] > self.probs[0])
    }
}

impl ViTModel {
    /// Full-image forward pass producing an [`ActivationRecord`].
    pub fn forward(&self, image_id: u64, image: &Image) -> Result<ActivationRecord> {
        let tokens = self.embed_patches(image)?;
        self.forward_record(image_id, &tokens)
    }

    pub fn forward_record(&self, image_id: u64, tokens: &EmbeddedTokens) -> Result<ActivationRecord> {
        let cache = self.forward_cached(tokens)?;
        let c = self.config();
        let (d, heads, dh) = (c.embed_dim, c.heads, c.head_dim());
        let t = tokens.len();
        let token_embeddings = Matrix::new(t, d, cache.out[d..].to_vec())?;
        let last = cache.blocks.last().expect("at least one block");
        let mut keys = Vec::with_capacity(heads * t * dh);
        for h in 0..heads {
            for r in 1..=t {
                let off = r * 3 * d + d + h * dh;
                keys.extend_from_slice(&last.qkv[off..off + dh]);
            }
        }
        Ok(ActivationRecord {
            image_id,
            token_embeddings,
            cls_embedding: cache.out[..d].to_vec(),
            heads,
            head_dim: dh,
            per_head_keys: keys,
            logits: cache.logits,
            probs: cache.probs,
            token_positions: cache.positions,
        })
    }
}

/// Batch forward over `(image_id, image)` pairs.
pub fn export_activations<'a, I>(model: &ViTModel, images: I) -> Result<Vec<ActivationRecord>>
where
    I: IntoIterator<Item = (u64, &'a Image)>,
{
    images.into_iter().map(|(id, img)| model.forward(id, img)).collect()
}

/// A batch of records sharing one token count, persisted as stacked tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationSet {
    pub records: Vec<ActivationRecord>,
}

#[derive(Serialize, Deserialize)]
struct SetMeta {
    count: usize,
    tokens: usize,
    dim: usize,
    heads: usize,
    head_dim: usize,
    classes: usize,
}

impl Artifact for ActivationSet {
    const KIND: &'static str = "activations";

    fn write(&self, w: &mut ArtifactWriter) -> Result<()> {
        let first = self
            .records
            .first()
            .ok_or_else(|| Error::invalid("cannot persist an empty activation set"))?;
        let meta = SetMeta {
            count: self.records.len(),
            tokens: first.tokens(),
            dim: first.token_embeddings.cols(),
            heads: first.heads,
            head_dim: first.head_dim,
            classes: first.logits.len(),
        };
        let uniform = self.records.iter().all(|r| {
            r.tokens() == meta.tokens
                && r.token_embeddings.cols() == meta.dim
                && r.heads == meta.heads
                && r.head_dim == meta.head_dim
                && r.logits.len() == meta.classes
        });
        if !uniform {
            return Err(Error::invalid("activation records differ in shape"));
        }
        let n = meta.count;
        let gather = |f: &dyn Fn(&ActivationRecord) -> &[f64]| -> Vec<f64> {
            self.records.iter().flat_map(|r| f(r).iter().copied()).collect()
        };
        w.tensor(
            "image_ids",
            &Tensor::u64(&[n], self.records.iter().map(|r| r.image_id).collect())?,
        )?;
        w.tensor(
            "token_embeddings",
            &Tensor::f64(&[n, meta.tokens, meta.dim], gather(&|r| r.token_embeddings.as_slice()))?,
        )?;
        w.tensor(
            "cls_embeddings",
            &Tensor::f64(&[n, meta.dim], gather(&|r| &r.cls_embedding))?,
        )?;
        w.tensor(
            "keys",
            &Tensor::f64(
                &[n, meta.heads, meta.tokens, meta.head_dim],
                gather(&|r| &r.per_head_keys),
            )?,
        )?;
        w.tensor("logits", &Tensor::f64(&[n, meta.classes], gather(&|r| &r.logits))?)?;
        w.tensor("probs", &Tensor::f64(&[n, meta.classes], gather(&|r| &r.probs))?)?;
        let positions = self
            .records
            .iter()
            .flat_map(|r| r.token_positions.iter().map(|&p| p as u32))
            .collect();
        w.tensor("token_positions", &Tensor::u32(&[n, meta.tokens], positions)?)?;
        w.meta(&meta)
    }

    fn read(r: &ArtifactReader) -> Result<Self> {
        let m: SetMeta = r.meta()?;
        let ids = r.tensor("image_ids")?.into_u64()?;
        let emb = r.tensor("token_embeddings")?.into_f64()?;
        let cls = r.tensor("cls_embeddings")?.into_f64()?;
        let keys = r.tensor("keys")?.into_f64()?;
        let logits = r.tensor("logits")?.into_f64()?;
        let probs = r.tensor("probs")?.into_f64()?;
        let pos = r.tensor("token_positions")?.into_u32()?;
        let (t, d, kd) = (m.tokens, m.dim, m.heads * m.tokens * m.head_dim);
        if ids.len() != m.count || emb.len() != m.count * t * d || keys.len() != m.count * kd {
            return Err(Error::invalid("activation tensors disagree with the manifest"));
        }
        let records = (0..m.count)
            .map(|i| {
                Ok(ActivationRecord {
                    image_id: ids[i],
                    token_embeddings: Matrix::new(t, d, emb[i * t * d..(i + 1) * t * d].to_vec())?,
                    cls_embedding: cls[i * d..(i + 1) * d].to_vec(),
                    heads: m.heads,
                    head_dim: m.head_dim,
                    per_head_keys: keys[i * kd..(i + 1) * kd].to_vec(),
                    logits: logits[i * m.classes..(i + 1) * m.classes].to_vec(),
                    probs: probs[i * m.classes..(i + 1) * m.classes].to_vec(),
                    token_positions: pos[i * t..(i + 1) * t].iter().map(|&p| p as usize).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}
