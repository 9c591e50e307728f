use serde::{Deserialize, Serialize};

use super::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Whether decoupled weight decay applies (matrices only).
    pub decay: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coarse layer family, used to report gradient checks per layer type.
    pub fn group(&self) -> &'static str {
        let n = self.name.as_str();
        if n.starts_with("patch_embed") {
            "patch_embed"
        } else if n == "pos_embed" {
            "pos_embed"
        } else if n == "cls_token" {
            "cls_token"
        } else if n.contains(".attn.") {
            "attention"
        } else if n.contains(".mlp.") {
            "mlp"
        } else if n.contains("ln") || n.starts_with("norm.") {
            "layer_norm"
        } else {
            "head"
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub qkv_w: Slot,
    pub qkv_b: Slot,
    pub proj_w: Slot,
    pub proj_b: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub fc1_w: Slot,
    pub fc1_b: Slot,
    pub fc2_w: Slot,
    pub fc2_b: Slot,
}

/// Flat parameter layout. Parameters live in one `Vec<f64>` in the order
/// of `specs`, which is also the checkpoint order.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub patch_w: Slot,
    pub patch_b: Slot,
    pub cls: Slot,
    pub pos: Slot,
    pub blocks: Vec<BlockSlots>,
    pub norm_g: Slot,
    pub norm_b: Slot,
    pub head_w: Slot,
    pub head_b: Slot,
    pub total: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], decay: bool) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.offset,
            len,
        };
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.offset,
            decay,
        });
        self.offset += len;
        slot
    }
}

impl ParamLayout {
    pub fn new(c: &ViTConfig) -> Self {
        let d = c.embed_dim;
        let hd = c.hidden_dim();
        let mut b = Builder {
            specs: Vec::new(),
            offset: 0,
        };
        let patch_w = b.add("patch_embed.weight", &[c.patch_dim(), d], true);
        let patch_b = b.add("patch_embed.bias", &[d], false);
        let cls = b.add("cls_token", &[d], false);
        let pos = b.add("pos_embed", &[c.tokens() + 1, d], false);
        let blocks = (0..c.blocks)
            .map(|i| BlockSlots {
                ln1_g: b.add(format!("blocks.{i}.ln1.gamma"), &[d], false),
                ln1_b: b.add(format!("blocks.{i}.ln1.beta"), &[d], false),
                qkv_w: b.add(format!("blocks.{i}.attn.qkv.weight"), &[d, 3 * d], true),
                qkv_b: b.add(format!("blocks.{i}.attn.qkv.bias"), &[3 * d], false),
                proj_w: b.add(format!("blocks.{i}.attn.proj.weight"), &[d, d], true),
                proj_b: b.add(format!("blocks.{i}.attn.proj.bias"), &[d], false),
                ln2_g: b.add(format!("blocks.{i}.ln2.gamma"), &[d], false),
                ln2_b: b.add(format!("blocks.{i}.ln2.beta"), &[d], false),
                fc1_w: b.add(format!("blocks.{i}.mlp.fc1.weight"), &[d, hd], true),
                fc1_b: b.add(format!("blocks.{i}.mlp.fc1.bias"), &[hd], false),
                fc2_w: b.add(format!("blocks.{i}.mlp.fc2.weight"), &[hd, d], true),
                fc2_b: b.add(format!("blocks.{i}.mlp.fc2.bias"), &[d], false),
            })
            .collect();
        let norm_g = b.add("norm.gamma", &[d], false);
        let norm_b = b.add("norm.beta", &[d], false);
        let head_w = b.add("head.weight", &[d, c.classes], true);
        let head_b = b.add("head.bias", &[c.classes], false);
        Self {
            total: b.offset,
            specs: b.specs,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g,
            norm_b,
            head_w,
            head_b,
        }
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for s in &self.specs {
            if s.decay {
                mask[s.offset..s.offset + s.len()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn spec_of(&self, index: usize) -> &ParamSpec {
        let i = self.specs.partition_point(|s| s.offset <= index) - 1;
        &self.specs[i]
    }
}
