use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Class-dependent band-limited texture. Each image sums a few plane waves
/// whose common frequency is drawn around the class mean, so the classes
/// overlap when `freq_sigma` is large relative to the frequency gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoreFeature {
    /// Mean spatial frequency per class, in cycles per image width.
    pub freq: [f64; 2],
    pub freq_sigma: f64,
    pub components: usize,
    pub base: f64,
    pub contrast: f64,
    pub pixel_noise: f64,
    /// Texture values are clamped to `[0, max_value]` so glyph pixels are
    /// always distinguishable from texture.
    pub max_value: f64,
}

impl Default for CoreFeature {
    fn default() -> Self {
        Self {
            freq: [4.5, 7.5],
            freq_sigma: 1.5,
            components: 3,
            base: 0.3,
            contrast: 0.25,
            pixel_noise: 0.05,
            max_value: 0.75,
        }
    }
}

impl CoreFeature {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::invalid("texture needs at least one component"));
        }
        let finite = self.freq.iter().chain([
            &self.freq_sigma,
            &self.base,
            &self.contrast,
            &self.pixel_noise,
            &self.max_value,
        ]);
        for v in finite {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid("texture parameters must be finite and non-negative"));
            }
        }
        if self.max_value > 0.95 {
            return Err(Error::invalid(
                "texture ceiling must stay below the glyph brightness band",
            ));
        }
        Ok(())
    }

    pub fn render<R: Rng>(&self, label: u8, size: usize, channels: usize, rng: &mut R) -> Image {
        let z: f64 = StandardNormal.sample(rng);
        let f = (self.freq[label as usize] + self.freq_sigma * z).max(0.5);
        let waves: Vec<(f64, f64, f64)> = (0..self.components)
            .map(|_| {
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU * f / size as f64;
                (k * theta.cos(), k * theta.sin(), phase)
            })
            .collect();
        let amp = self.contrast / (self.components as f64).sqrt();
        let mut img = Image::filled(size, channels, 0.0);
        for y in 0..size {
            for x in 0..size {
                let mut v = self.base;
                for &(kx, ky, ph) in &waves {
                    v += amp * (kx * x as f64 + ky * y as f64 + ph).cos();
                }
                for c in 0..channels {
                    let n: f64 = StandardNormal.sample(rng);
                    let p = (v + self.pixel_noise * n).clamp(0.0, self.max_value);
                    img.set(x, y, c, p as f32);
                }
            }
        }
        img
    }
}
