use rand_distr::{Distribution, Normal};

use super::kernels::{dot, gelu, gelu_grad, layernorm_bwd, layernorm_fwd, linear_bwd, linear_fwd, softmax_in_place};
use super::layout::{BlockSlots, ParamLayout, Slot};
use super::ViTConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::stage_rng;

#[derive(Clone, Debug)]
pub struct ViTModel {
    config: ViTConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

/// Patch tokens after patch embedding and positional embedding, in
/// storage order. `positions[i]` is the original patch index of row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedTokens {
    pub positions: Vec<usize>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddedTokens {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Keeps the rows whose entry in `keep` is true, preserving order and
    /// leaving every surviving row bit-identical.
    pub fn retain(&self, keep: &[bool]) -> EmbeddedTokens {
        let mut positions = Vec::new();
        let mut data = Vec::new();
        for (i, &k) in keep.iter().enumerate().take(self.len()) {
            if k {
                positions.push(self.positions[i]);
                data.extend_from_slice(self.row(i));
            }
        }
        EmbeddedTokens {
            positions,
            dim: self.dim,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Final-normalised CLS embedding, the input of the classifier head.
    pub cls_embedding: Vec<f64>,
}

pub(crate) struct BlockCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    a: Vec<f64>,
    pub(crate) qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    m: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

pub(crate) struct ForwardCache {
    pub(crate) seq: usize,
    pub(crate) positions: Vec<usize>,
    pub(crate) blocks: Vec<BlockCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    /// Final-normalised sequence, CLS first.
    pub(crate) out: Vec<f64>,
    pub(crate) logits: Vec<f64>,
    pub(crate) probs: Vec<f64>,
}

fn pair_mut(buf: &mut [f64], a: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(a.offset + a.len, b.offset);
    let (x, y) = buf[a.offset..b.offset + b.len].split_at_mut(a.len);
    (x, y)
}

impl ViTModel {
    /// Fresh model with seeded Xavier-normal linear weights, small-normal
    /// CLS/positional embeddings, unit layer-norm gains and zero biases.
    pub fn init(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut params = vec![0.0; layout.total];
        let mut rng = stage_rng(config.seed, "vit-init");
        for spec in &layout.specs {
            let slice = &mut params[spec.offset..spec.offset + spec.len()];
            let name = spec.name.as_str();
            if name.ends_with("gamma") {
                slice.iter_mut().for_each(|v| *v = 1.0);
            } else if name == "cls_token" || name == "pos_embed" {
                let dist = Normal::new(0.0, 0.02).expect("valid std");
                slice.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            } else if spec.shape.len() == 2 {
                let std = (2.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                slice.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn from_params(config: &ViTConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if params.len() != layout.total {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    #[inline]
    fn p(&self, s: Slot) -> &[f64] {
        &self.params[s.range()]
    }

    /// Head weight (`d x classes`, row-major) and bias.
    pub fn head(&self) -> (Vec<f64>, Vec<f64>) {
        (self.p(self.layout.head_w).to_vec(), self.p(self.layout.head_b).to_vec())
    }

    pub fn set_head(&mut self, weight: &[f64], bias: &[f64]) -> Result<()> {
        let (w, b) = (self.layout.head_w, self.layout.head_b);
        if weight.len() != w.len || bias.len() != b.len {
            return Err(Error::invalid("head shape mismatch"));
        }
        self.params[w.range()].copy_from_slice(weight);
        self.params[b.range()].copy_from_slice(bias);
        Ok(())
    }

    /// Flattens the image into `T x patch_dim` rows in row-major grid order.
    pub fn patchify(&self, image: &Image) -> Result<Vec<f64>> {
        let c = &self.config;
        if image.size != c.image_size || image.channels != c.channels {
            return Err(Error::invalid(format!(
                "image is {}px x {}ch, model expects {}px x {}ch",
                image.size, image.channels, c.image_size, c.channels
            )));
        }
        let (p, g, ch) = (c.patch_size, c.grid(), c.channels);
        let mut out = Vec::with_capacity(c.tokens() * c.patch_dim());
        for py in 0..g {
            for px in 0..g {
                for dy in 0..p {
                    for dx in 0..p {
                        for k in 0..ch {
                            out.push(image.get(px * p + dx, py * p + dy, k) as f64);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn embed_rows(&self, patches: &[f64]) -> EmbeddedTokens {
        let c = &self.config;
        let (t, d) = (c.tokens(), c.embed_dim);
        let mut data = vec![0.0; t * d];
        linear_fwd(
            patches,
            t,
            c.patch_dim(),
            self.p(self.layout.patch_w),
            self.p(self.layout.patch_b),
            d,
            &mut data,
        );
        let pos = self.p(self.layout.pos);
        for i in 0..t {
            for j in 0..d {
                data[i * d + j] += pos[(i + 1) * d + j];
            }
        }
        EmbeddedTokens {
            positions: (0..t).collect(),
            dim: d,
            data,
        }
    }

    /// Patch embedding plus positional embedding for every patch.
    pub fn embed_patches(&self, image: &Image) -> Result<EmbeddedTokens> {
        Ok(self.embed_rows(&self.patchify(image)?))
    }

    fn check_tokens(&self, tokens: &EmbeddedTokens) -> Result<()> {
        let t = self.config.tokens();
        if tokens.is_empty() {
            return Err(Error::invalid("token list is empty"));
        }
        if tokens.dim != self.config.embed_dim || tokens.data.len() != tokens.len() * tokens.dim {
            return Err(Error::invalid("token embedding width mismatch"));
        }
        if tokens.len() > t {
            return Err(Error::invalid(format!(
                "{} tokens exceed the {t} patch positions",
                tokens.len()
            )));
        }
        let mut seen = vec![false; t];
        for &p in &tokens.positions {
            if p >= t || seen[p] {
                return Err(Error::invalid(format!("invalid or repeated token position {p}")));
            }
            seen[p] = true;
        }
        Ok(())
    }

    /// Runs the blocks and head on CLS plus the given tokens.
    pub fn forward_tokens(&self, tokens: &EmbeddedTokens) -> Result<TokenOutput> {
        let cache = self.forward_cached(tokens)?;
        let d = self.config.embed_dim;
        Ok(TokenOutput {
            logits: cache.logits,
            probs: cache.probs,
            cls_embedding: cache.out[..d].to_vec(),
        })
    }

    pub(crate) fn forward_cached(&self, tokens: &EmbeddedTokens) -> Result<ForwardCache> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let (d, hd, heads, dh) = (c.embed_dim, c.hidden_dim(), c.heads, c.head_dim());
        let s = tokens.len() + 1;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; s * d];
        let cls = self.p(self.layout.cls);
        let pos = self.p(self.layout.pos);
        for j in 0..d {
            x[j] = cls[j] + pos[j];
        }
        x[d..].copy_from_slice(&tokens.data);

        let mut blocks = Vec::with_capacity(c.blocks);
        for bs in &self.layout.blocks {
            let mut bc = BlockCache {
                ln1_xhat: vec![0.0; s * d],
                ln1_rstd: vec![0.0; s],
                a: vec![0.0; s * d],
                qkv: vec![0.0; s * 3 * d],
                probs: vec![0.0; heads * s * s],
                attn: vec![0.0; s * d],
                ln2_xhat: vec![0.0; s * d],
                ln2_rstd: vec![0.0; s],
                m: vec![0.0; s * d],
                h_pre: vec![0.0; s * hd],
                h_act: vec![0.0; s * hd],
            };
            layernorm_fwd(
                &x,
                s,
                d,
                self.p(bs.ln1_g),
                self.p(bs.ln1_b),
                &mut bc.a,
                &mut bc.ln1_xhat,
                &mut bc.ln1_rstd,
            );
            linear_fwd(&bc.a, s, d, self.p(bs.qkv_w), self.p(bs.qkv_b), 3 * d, &mut bc.qkv);
            for h in 0..heads {
                let probs = &mut bc.probs[h * s * s..(h + 1) * s * s];
                for i in 0..s {
                    let q = &bc.qkv[i * 3 * d + h * dh..i * 3 * d + (h + 1) * dh];
                    let row = &mut probs[i * s..(i + 1) * s];
                    for (j, r) in row.iter_mut().enumerate() {
                        let k = &bc.qkv[j * 3 * d + d + h * dh..j * 3 * d + d + (h + 1) * dh];
                        *r = dot(q, k) * scale;
                    }
                    softmax_in_place(row);
                    let out = &mut bc.attn[i * d + h * dh..i * d + (h + 1) * dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let v = &bc.qkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh];
                        for (o, vv) in out.iter_mut().zip(v) {
                            *o += pij * vv;
                        }
                    }
                }
            }
            let mut y = vec![0.0; s * d];
            linear_fwd(&bc.attn, s, d, self.p(bs.proj_w), self.p(bs.proj_b), d, &mut y);
            for (xv, yv) in x.iter_mut().zip(&y) {
                *xv += yv;
            }
            layernorm_fwd(
                &x,
                s,
                d,
                self.p(bs.ln2_g),
                self.p(bs.ln2_b),
                &mut bc.m,
                &mut bc.ln2_xhat,
                &mut bc.ln2_rstd,
            );
            linear_fwd(&bc.m, s, d, self.p(bs.fc1_w), self.p(bs.fc1_b), hd, &mut bc.h_pre);
            for (a, p) in bc.h_act.iter_mut().zip(&bc.h_pre) {
                *a = gelu(*p);
            }
            linear_fwd(&bc.h_act, s, hd, self.p(bs.fc2_w), self.p(bs.fc2_b), d, &mut y);
            for (xv, yv) in x.iter_mut().zip(&y) {
                *xv += yv;
            }
            blocks.push(bc);
        }

        let mut out = vec![0.0; s * d];
        let mut lnf_xhat = vec![0.0; s * d];
        let mut lnf_rstd = vec![0.0; s];
        layernorm_fwd(
            &x,
            s,
            d,
            self.p(self.layout.norm_g),
            self.p(self.layout.norm_b),
            &mut out,
            &mut lnf_xhat,
            &mut lnf_rstd,
        );
        let classes = c.classes;
        let mut logits = vec![0.0; classes];
        linear_fwd(
            &out[..d],
            1,
            d,
            self.p(self.layout.head_w),
            self.p(self.layout.head_b),
            classes,
            &mut logits,
        );
        let mut probs = logits.clone();
        softmax_in_place(&mut probs);
        Ok(ForwardCache {
            seq: s,
            positions: tokens.positions.clone(),
            blocks,
            lnf_xhat,
            lnf_rstd,
            out,
            logits,
            probs,
        })
    }

    fn block_backward(&self, bs: &BlockSlots, bc: &BlockCache, s: usize, dx: &mut [f64], grad: &mut [f64]) {
        let c = &self.config;
        let (d, hd, heads, dh) = (c.embed_dim, c.hidden_dim(), c.heads, c.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP branch.
        let mut dh_act = vec![0.0; s * hd];
        {
            let (dw, db) = pair_mut(grad, bs.fc2_w, bs.fc2_b);
            linear_bwd(&bc.h_act, s, hd, self.p(bs.fc2_w), d, dx, Some(&mut dh_act), dw, db);
        }
        for (g, p) in dh_act.iter_mut().zip(&bc.h_pre) {
            *g *= gelu_grad(*p);
        }
        let mut dm = vec![0.0; s * d];
        {
            let (dw, db) = pair_mut(grad, bs.fc1_w, bs.fc1_b);
            linear_bwd(&bc.m, s, d, self.p(bs.fc1_w), hd, &dh_act, Some(&mut dm), dw, db);
        }
        let mut dln = vec![0.0; s * d];
        {
            let (dg, db) = pair_mut(grad, bs.ln2_g, bs.ln2_b);
            layernorm_bwd(
                &dm,
                &bc.ln2_xhat,
                &bc.ln2_rstd,
                self.p(bs.ln2_g),
                s,
                d,
                &mut dln,
                dg,
                db,
            );
        }
        for (a, b) in dx.iter_mut().zip(&dln) {
            *a += b;
        }

        // Attention branch.
        let mut dattn = vec![0.0; s * d];
        {
            let (dw, db) = pair_mut(grad, bs.proj_w, bs.proj_b);
            linear_bwd(&bc.attn, s, d, self.p(bs.proj_w), d, dx, Some(&mut dattn), dw, db);
        }
        let mut dqkv = vec![0.0; s * 3 * d];
        let mut dp = vec![0.0; s];
        for h in 0..heads {
            let probs = &bc.probs[h * s * s..(h + 1) * s * s];
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..s {
                let dout = &dattn[i * d + h * dh..i * d + (h + 1) * dh];
                let prow = &probs[i * s..(i + 1) * s];
                let mut weighted = 0.0;
                for j in 0..s {
                    let v = &bc.qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                    dp[j] = dot(dout, v);
                    weighted += prow[j] * dp[j];
                    let dv = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                    for (g, o) in dv.iter_mut().zip(dout) {
                        *g += prow[j] * o;
                    }
                }
                for j in 0..s {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        let kj = bc.qkv[j * 3 * d + ko + t];
                        let qi = bc.qkv[i * 3 * d + qo + t];
                        dqkv[i * 3 * d + qo + t] += ds * kj;
                        dqkv[j * 3 * d + ko + t] += ds * qi;
                    }
                }
            }
        }
        let mut da = vec![0.0; s * d];
        {
            let (dw, db) = pair_mut(grad, bs.qkv_w, bs.qkv_b);
            linear_bwd(&bc.a, s, d, self.p(bs.qkv_w), 3 * d, &dqkv, Some(&mut da), dw, db);
        }
        {
            let (dg, db) = pair_mut(grad, bs.ln1_g, bs.ln1_b);
            layernorm_bwd(
                &da,
                &bc.ln1_xhat,
                &bc.ln1_rstd,
                self.p(bs.ln1_g),
                s,
                d,
                &mut dln,
                dg,
                db,
            );
        }
        for (a, b) in dx.iter_mut().zip(&dln) {
            *a += b;
        }
    }

    /// Accumulates parameter gradients for `dlogits` into `grad`.
    /// `patches` holds the full `T x patch_dim` patch matrix of the image.
    pub(crate) fn backward(&self, cache: &ForwardCache, patches: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let (d, classes) = (c.embed_dim, c.classes);
        let s = cache.seq;
        let l = &self.layout;

        let mut dout = vec![0.0; s * d];
        {
            let (dw, db) = pair_mut(grad, l.head_w, l.head_b);
            linear_bwd(
                &cache.out[..d],
                1,
                d,
                self.p(l.head_w),
                classes,
                dlogits,
                Some(&mut dout[..d]),
                dw,
                db,
            );
        }
        let mut dx = vec![0.0; s * d];
        {
            let (dg, db) = pair_mut(grad, l.norm_g, l.norm_b);
            layernorm_bwd(
                &dout,
                &cache.lnf_xhat,
                &cache.lnf_rstd,
                self.p(l.norm_g),
                s,
                d,
                &mut dx,
                dg,
                db,
            );
        }
        for (bs, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            self.block_backward(bs, bc, s, &mut dx, grad);
        }

        {
            let dcls = &mut grad[l.cls.range()];
            for j in 0..d {
                dcls[j] += dx[j];
            }
        }
        let pos_off = l.pos.offset;
        for j in 0..d {
            grad[pos_off + j] += dx[j];
        }
        let pd = c.patch_dim();
        for (r, &p) in cache.positions.iter().enumerate() {
            let drow = &dx[(r + 1) * d..(r + 2) * d];
            for j in 0..d {
                grad[pos_off + (p + 1) * d + j] += drow[j];
            }
            let (dw, db) = pair_mut(grad, l.patch_w, l.patch_b);
            linear_bwd(
                &patches[p * pd..(p + 1) * pd],
                1,
                pd,
                self.p(l.patch_w),
                d,
                drow,
                None,
                dw,
                db,
            );
        }
    }

    fn cross_entropy(logits: &[f64], label: usize) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    }

    fn check_label(&self, label: u8) -> Result<usize> {
        let label = label as usize;
        if label >= self.config.classes {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        Ok(label)
    }

    /// Cross-entropy loss of one image, optionally restricted to a subset
    /// of token positions (ascending).
    pub fn loss(&self, image: &Image, label: u8, keep: Option<&[usize]>) -> Result<f64> {
        let label = self.check_label(label)?;
        let tokens = self.subset(self.embed_patches(image)?, keep);
        let cache = self.forward_cached(&tokens)?;
        Ok(Self::cross_entropy(&cache.logits, label))
    }

    /// Loss of one image; its gradient is added into `grad`, scaled by `weight`.
    pub fn loss_and_grad(
        &self,
        image: &Image,
        label: u8,
        keep: Option<&[usize]>,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let label = self.check_label(label)?;
        if grad.len() != self.params.len() {
            return Err(Error::invalid("gradient buffer has the wrong length"));
        }
        let patches = self.patchify(image)?;
        let tokens = self.subset(self.embed_rows(&patches), keep);
        let cache = self.forward_cached(&tokens)?;
        let mut dlogits = cache.probs.clone();
        dlogits[label] -= 1.0;
        dlogits.iter_mut().for_each(|g| *g *= weight);
        self.backward(&cache, &patches, &dlogits, grad);
        Ok(Self::cross_entropy(&cache.logits, label))
    }

    fn subset(&self, tokens: EmbeddedTokens, keep: Option<&[usize]>) -> EmbeddedTokens {
        match keep {
            None => tokens,
            Some(keep) => {
                let mut mask = vec![false; tokens.len()];
                for &k in keep {
                    if k < mask.len() {
                        mask[k] = true;
                    }
                }
                tokens.retain(&mask)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_over_one_value_returns_that_value() {
        let config = ViTConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            blocks: 1,
            ..Default::default()
        };
        let mut model = ViTModel::init(&config).unwrap();
        let d = config.embed_dim;
        let bs = model.layout.blocks[0].clone();
        // Value projection reduced to its bias: every position carries the
        // same value vector, so any convex combination of values equals it.
        let w = bs.qkv_w;
        for r in 0..d {
            for c in 2 * d..3 * d {
                model.params[w.offset + r * 3 * d + c] = 0.0;
            }
        }
        for c in 0..d {
            model.params[bs.qkv_b.offset + 2 * d + c] = 0.1 * (c as f64 + 1.0);
        }
        let image = Image::filled(16, 1, 0.3);
        let tokens = model.embed_patches(&image).unwrap();
        let mut keep = vec![false; tokens.len()];
        keep[7] = true;
        let cache = model.forward_cached(&tokens.retain(&keep)).unwrap();
        let attn = &cache.blocks[0].attn;
        for row in attn.chunks(d) {
            for (c, v) in row.iter().enumerate() {
                assert!((v - 0.1 * (c as f64 + 1.0)).abs() < 1e-12);
            }
        }
    }
}
