use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square image with interleaved channels (`(y * size + x) * channels + c`),
/// values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size * channels {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}",
                pixels.len(),
                size * size * channels
            )));
        }
        Ok(Self { size, channels, pixels })
    }

    pub fn filled(size: usize, channels: usize, value: f32) -> Self {
        Self {
            size,
            channels,
            pixels: vec![value; size * size * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.size + x) * self.channels + c] = v;
    }

    /// Copies the `patch x patch` cell at grid index `index` (row-major).
    pub fn crop_patch(&self, patch: usize, index: usize) -> Image {
        let grid = self.size / patch;
        let (px, py) = (index % grid, index / grid);
        let mut out = Image::filled(patch, self.channels, 0.0);
        for dy in 0..patch {
            for dx in 0..patch {
                for c in 0..self.channels {
                    out.set(dx, dy, c, self.get(px * patch + dx, py * patch + dy, c));
                }
            }
        }
        out
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale(&self, factor: usize) -> Image {
        let size = self.size * factor;
        let mut out = Image::filled(size, self.channels, 0.0);
        for y in 0..size {
            for x in 0..size {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(x / factor, y / factor, c));
                }
            }
        }
        out
    }

    /// 8-bit PNG encoding (grayscale or RGB).
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::invalid(format!("cannot encode {c}-channel image as PNG"))),
        };
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.size as u32, self.size as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::invalid(format!("png header: {e}")))?;
            let bytes: Vec<u8> = self
                .pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            writer
                .write_image_data(&bytes)
                .map_err(|e| Error::invalid(format!("png data: {e}")))?;
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_upscale() {
        let mut img = Image::filled(4, 1, 0.0);
        img.set(2, 0, 0, 1.0);
        let p = img.crop_patch(2, 1);
        assert_eq!(p.pixels, vec![1.0, 0.0, 0.0, 0.0]);
        let up = p.upscale(4);
        assert_eq!(up.size, 8);
        assert_eq!(up.get(3, 3, 0), 1.0);
        assert_eq!(up.get(4, 0, 0), 0.0);
        assert_eq!(&up.to_png().unwrap()[1..4], b"PNG");
    }
}
