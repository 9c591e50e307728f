use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphShape {
    /// Solid rectangle filling the whole box, like a printed tag.
    Tag,
    Square,
    Disc,
    Ring,
    Cross,
    LetterL,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlyphSpec {
    pub shape: GlyphShape,
    /// Side of the glyph's bounding box, in patches.
    pub size: f64,
    /// Blend weight towards white; 0 leaves the image untouched.
    pub intensity: f32,
    pub corners: Vec<Corner>,
    pub rotation_jitter_deg: f64,
    /// Distance in pixels between the image border and the glyph box.
    pub margin: usize,
    /// Extra random offset in pixels, drawn per axis from `0..=position_jitter`.
    pub position_jitter: usize,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self {
            shape: GlyphShape::Tag,
            size: 4.0,
            intensity: 1.0,
            corners: vec![
                Corner::TopLeft,
                Corner::TopRight,
                Corner::BottomLeft,
                Corner::BottomRight,
            ],
            rotation_jitter_deg: 0.0,
            margin: 0,
            position_jitter: 0,
        }
    }
}

impl GlyphSpec {
    pub fn box_px(&self, patch: usize) -> usize {
        (self.size * patch as f64).round() as usize
    }

    pub fn validate(&self, image_size: usize, patch: usize) -> Result<()> {
        if self.size <= 0.0 || !self.size.is_finite() {
            return Err(Error::invalid("glyph size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::invalid("glyph intensity must lie in [0, 1]"));
        }
        if self.corners.is_empty() {
            return Err(Error::invalid("glyph needs at least one corner"));
        }
        if !(0.0..45.0).contains(&self.rotation_jitter_deg) {
            return Err(Error::invalid("rotation jitter must lie in [0, 45) degrees"));
        }
        let side = self.box_px(patch);
        if side == 0 || self.margin + self.position_jitter + side > image_size {
            return Err(Error::invalid(format!(
                "glyph box of {side}px with margin {} and jitter {} does not fit a {image_size}px image",
                self.margin, self.position_jitter
            )));
        }
        Ok(())
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` that any glyph placed at
    /// `corner` stays inside.
    pub fn corner_region(&self, corner: Corner, image_size: usize, patch: usize) -> (usize, usize, usize, usize) {
        let reach = self.margin + self.position_jitter + self.box_px(patch);
        let (x0, x1) = match corner {
            Corner::TopLeft | Corner::BottomLeft => (self.margin, reach),
            _ => (image_size - reach, image_size - self.margin),
        };
        let (y0, y1) = match corner {
            Corner::TopLeft | Corner::TopRight => (self.margin, reach),
            _ => (image_size - reach, image_size - self.margin),
        };
        (x0, x1, y0, y1)
    }
}

/// Shape membership in box-normalised coordinates (`u`, `v` in [-0.5, 0.5]).
/// Every shape except `Tag` stays within radius ~0.45 along the axes so a
/// rotation of a few degrees keeps it inside its box.
fn inside(shape: GlyphShape, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        GlyphShape::Tag => u.abs() <= 0.5 && v.abs() <= 0.5,
        GlyphShape::Square => u.abs() <= 0.45 && v.abs() <= 0.45,
        GlyphShape::Disc => r <= 0.45,
        GlyphShape::Ring => (0.28..=0.45).contains(&r),
        GlyphShape::Cross => (u.abs() <= 0.12 && v.abs() <= 0.42) || (v.abs() <= 0.12 && u.abs() <= 0.42),
        GlyphShape::LetterL => {
            ((-0.4..=-0.15).contains(&u) && v.abs() <= 0.4) || ((0.15..=0.4).contains(&v) && u.abs() <= 0.4)
        }
    }
}

/// Binary glyph mask rendered into a `side × side` box.
pub fn glyph_mask(shape: GlyphShape, side: usize, angle_rad: f64) -> Vec<bool> {
    let (sin, cos) = angle_rad.sin_cos();
    let mut mask = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            let px = (x as f64 + 0.5) / side as f64 - 0.5;
            let py = (y as f64 + 0.5) / side as f64 - 0.5;
            // Inverse rotation of the sampling point.
            let u = cos * px + sin * py;
            let v = -sin * px + cos * py;
            mask[y * side + x] = inside(shape, u, v);
        }
    }
    mask
}

/// Where one glyph went and which patches it touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub corner: Corner,
    pub x0: usize,
    pub y0: usize,
    pub angle_deg: f64,
    pub patches: Vec<usize>,
}

/// Composites the glyph at a random allowed corner. The footprint lists
/// every patch containing at least one glyph pixel, ascending.
pub fn inject_shortcut<R: Rng>(
    image: &Image,
    spec: &GlyphSpec,
    patch: usize,
    rng: &mut R,
) -> Result<(Image, Placement)> {
    spec.validate(image.size, patch)?;
    if !image.size.is_multiple_of(patch) {
        return Err(Error::invalid("image size must be a multiple of the patch size"));
    }
    let side = spec.box_px(patch);
    let corner = spec.corners[rng.gen_range(0..spec.corners.len())];
    let jx = rng.gen_range(0..=spec.position_jitter);
    let jy = rng.gen_range(0..=spec.position_jitter);
    let angle_deg = if spec.rotation_jitter_deg > 0.0 {
        rng.gen_range(-spec.rotation_jitter_deg..=spec.rotation_jitter_deg)
    } else {
        0.0
    };
    let far = image.size - spec.margin - side;
    let x0 = match corner {
        Corner::TopLeft | Corner::BottomLeft => spec.margin + jx,
        _ => far - jx,
    };
    let y0 = match corner {
        Corner::TopLeft | Corner::TopRight => spec.margin + jy,
        _ => far - jy,
    };
    let mask = glyph_mask(spec.shape, side, angle_deg.to_radians());
    let grid = image.size / patch;
    let mut touched = vec![false; grid * grid];
    let mut out = image.clone();
    let i = spec.intensity;
    for dy in 0..side {
        for dx in 0..side {
            if !mask[dy * side + dx] {
                continue;
            }
            let (x, y) = (x0 + dx, y0 + dy);
            touched[(y / patch) * grid + x / patch] = true;
            for c in 0..image.channels {
                let p = out.get(x, y, c);
                out.set(x, y, c, p + i * (1.0 - p));
            }
        }
    }
    let patches = touched
        .iter()
        .enumerate()
        .filter_map(|(k, &t)| t.then_some(k))
        .collect();
    Ok((
        out,
        Placement {
            corner,
            x0,
            y0,
            angle_deg,
            patches,
        },
    ))
}
