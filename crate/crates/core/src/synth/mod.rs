//! Procedural binary-class images with an injectable spurious glyph.
//!
//! The class signal is the frequency of a noisy texture; the glyph is a
//! bright shape composited near a corner on a configurable fraction of
//! each class. Group annotations (label, glyph present) are kept for
//! evaluation only.

mod glyph;
mod texture;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use glyph::{glyph_mask, inject_shortcut, Corner, GlyphShape, GlyphSpec, Placement};
pub use texture::CoreFeature;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_index, derive_seed, stage_rng, StageRng};
use crate::store::{Artifact, ArtifactReader, ArtifactWriter, Tensor};

use rand::SeedableRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_group: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train_per_class: 1000,
            val_per_class: 200,
            test_per_group: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Patch grid used to report glyph footprints; must match the model.
    pub patch_size: usize,
    pub channels: usize,
    pub core: CoreFeature,
    pub glyph: GlyphSpec,
    /// Fraction of class 0 and class 1 carrying the glyph in train/val.
    pub rates: [f64; 2],
    pub splits: SplitSizes,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            core: CoreFeature::default(),
            glyph: GlyphSpec::default(),
            rates: [0.5, 0.025],
            splits: SplitSizes::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(
                "image size must be a positive multiple of the patch size",
            ));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        for r in self.rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("correlation rate {r} outside [0, 1]")));
            }
        }
        let s = &self.splits;
        if s.train_per_class == 0 || s.val_per_class == 0 || s.test_per_group == 0 {
            return Err(Error::invalid("split sizes must be positive"));
        }
        self.core.validate()?;
        self.glyph.validate(self.image_size, self.patch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub label: u8,
    pub shortcut: bool,
    pub glyph_patches: Vec<usize>,
}

impl SampleMeta {
    /// Group index `2 * label + shortcut`: (0,no) (0,yes) (1,no) (1,yes).
    pub fn group(&self) -> usize {
        2 * self.label as usize + usize::from(self.shortcut)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

/// Largest-remainder rounding of `targets` to integers summing to
/// `round(sum(targets))`; ties go to the lower index.
pub fn quota_round(targets: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let total = targets.iter().sum::<f64>().round() as usize;
    let mut rest = total.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

fn render(config: &SynthConfig, label: u8, shortcut: bool, rng: &mut StageRng) -> Result<SynthSample> {
    let texture = config.core.render(label, config.image_size, config.channels, rng);
    let (image, glyph_patches) = if shortcut {
        let (img, placement) = inject_shortcut(&texture, &config.glyph, config.patch_size, rng)?;
        (img, placement.patches)
    } else {
        (texture, Vec::new())
    };
    Ok(SynthSample {
        image,
        meta: SampleMeta {
            label,
            shortcut,
            glyph_patches,
        },
    })
}

/// Renders a split from its (label, shortcut) plan. The plan is shuffled
/// so ids carry no group information; each sample draws from its own
/// stream, derived from the split seed and its position.
fn render_split(config: &SynthConfig, tag: &str, mut plan: Vec<(u8, bool)>) -> Result<Vec<SynthSample>> {
    let split_seed = derive_seed(config.seed, tag);
    let mut rng = stage_rng(split_seed, "order");
    plan.shuffle(&mut rng);
    plan.iter()
        .enumerate()
        .map(|(i, &(label, shortcut))| {
            let mut rng = StageRng::seed_from_u64(derive_index(split_seed, i as u64));
            render(config, label, shortcut, &mut rng)
        })
        .collect()
}

/// Biased plan: per class `n` samples, of which a quota carries the glyph.
fn biased_plan(config: &SynthConfig, per_class: usize) -> Vec<(u8, bool)> {
    let mut plan = Vec::with_capacity(2 * per_class);
    for label in 0..2u8 {
        let with = quota_round(&[config.rates[label as usize] * per_class as f64])[0];
        plan.extend((0..per_class).map(|i| (label, i < with)));
    }
    plan
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let s = &config.splits;
    let train = render_split(config, "train", biased_plan(config, s.train_per_class))?;
    let val = render_split(config, "val", biased_plan(config, s.val_per_class))?;
    let mut test_plan = Vec::with_capacity(4 * s.test_per_group);
    for group in 0..4usize {
        let (label, shortcut) = ((group / 2) as u8, group % 2 == 1);
        test_plan.extend(std::iter::repeat_n((label, shortcut), s.test_per_group));
    }
    let test = render_split(config, "test", test_plan)?;
    Ok(SynthDataset {
        config: config.clone(),
        train,
        val,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    config: SynthConfig,
    train: Vec<SampleMeta>,
    val: Vec<SampleMeta>,
    test: Vec<SampleMeta>,
}

fn images_tensor(samples: &[SynthSample], config: &SynthConfig) -> Result<Tensor> {
    let (n, s, c) = (samples.len(), config.image_size, config.channels);
    let mut data = Vec::with_capacity(n * s * s * c);
    for sample in samples {
        data.extend_from_slice(&sample.image.pixels);
    }
    Tensor::f32(&[n, s, s, c], data)
}

fn split_from(t: Tensor, metas: Vec<SampleMeta>, config: &SynthConfig) -> Result<Vec<SynthSample>> {
    let dims = t.dims();
    let (s, c) = (config.image_size, config.channels);
    if dims != [metas.len(), s, s, c] {
        return Err(Error::invalid("image tensor shape disagrees with the sample list"));
    }
    let pixels = t.into_f32()?;
    let stride = s * s * c;
    metas
        .into_iter()
        .enumerate()
        .map(|(i, meta)| {
            Ok(SynthSample {
                image: Image::new(s, c, pixels[i * stride..(i + 1) * stride].to_vec())?,
                meta,
            })
        })
        .collect()
}

impl Artifact for SynthDataset {
    const KIND: &'static str = "dataset";

    fn write(&self, w: &mut ArtifactWriter) -> Result<()> {
        w.tensor("train_images", &images_tensor(&self.train, &self.config)?)?;
        w.tensor("val_images", &images_tensor(&self.val, &self.config)?)?;
        w.tensor("test_images", &images_tensor(&self.test, &self.config)?)?;
        let metas = |v: &[SynthSample]| v.iter().map(|s| s.meta.clone()).collect();
        w.meta(&DatasetMeta {
            config: self.config.clone(),
            train: metas(&self.train),
            val: metas(&self.val),
            test: metas(&self.test),
        })
    }

    fn read(r: &ArtifactReader) -> Result<Self> {
        let meta: DatasetMeta = r.meta()?;
        let config = meta.config;
        Ok(Self {
            train: split_from(r.tensor("train_images")?, meta.train, &config)?,
            val: split_from(r.tensor("val_images")?, meta.val, &config)?,
            test: split_from(r.tensor("test_images")?, meta.test, &config)?,
            config,
        })
    }
}
