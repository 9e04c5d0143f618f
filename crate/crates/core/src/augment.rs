//! Joint image/mask augmentation: horizontal flip and perspective warp.
//!
//! Every geometric transform is applied identically to the image and its
//! mask. Images are resampled bilinearly, masks by nearest neighbour, and
//! pixels that map outside the source become black / [`BACKGROUND`].

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Mask, SegmentationSample};
use crate::error::{Error, Result};
use crate::schema::BACKGROUND;
use crate::seed;

/// Corner displacements beyond this fraction of the short side can fold the quadrilateral.
pub const MAX_WARP_MAGNITUDE: f64 = 0.5;
const WARP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub flip_probability: f64,
    pub warp_magnitude: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            flip_probability: 0.5,
            warp_magnitude: 0.2,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            flip_probability: 0.0,
            warp_magnitude: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip_probability must be in [0, 1], got {}",
                self.flip_probability
            )));
        }
        check_magnitude(self.warp_magnitude)
    }
}

fn check_magnitude(magnitude: f64) -> Result<()> {
    if !(0.0..=MAX_WARP_MAGNITUDE).contains(&magnitude) {
        return Err(Error::Config(format!(
            "warp magnitude must be in [0, {MAX_WARP_MAGNITUDE}], got {magnitude}"
        )));
    }
    Ok(())
}

/// 3x3 projective transform acting on pixel-centre coordinates, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        (
            (h[0] * x + h[1] * y + h[2]) / w,
            (h[3] * x + h[4] * y + h[5]) / w,
        )
    }

    /// The transform taking each `from[i]` to `to[i]`, or `None` when the points are degenerate.
    pub fn from_correspondences(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Option<Self> {
        // Unknowns h0..h7 with h8 = 1.
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (x, y) = from[i];
            let (u, v) = to[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        for col in 0..8 {
            let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
            if a[pivot][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, pivot);
            for row in 0..8 {
                if row != col {
                    let factor = a[row][col] / a[col][col];
                    if factor != 0.0 {
                        for k in col..9 {
                            a[row][k] -= factor * a[col][k];
                        }
                    }
                }
            }
        }
        let mut h = [1.0; 9];
        for i in 0..8 {
            h[i] = a[i][8] / a[i][i];
        }
        Some(Homography(h))
    }
}

/// The geometric part of one augmentation draw, enough to replay it on any
/// image or mask of the same size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub flipped: bool,
    /// Maps output pixel coordinates to (post-flip) source coordinates.
    pub warp: Option<Homography>,
}

impl Geometry {
    pub const IDENTITY: Geometry = Geometry {
        flipped: false,
        warp: None,
    };

    pub fn apply_to_mask(&self, mask: &Mask) -> Mask {
        let flipped;
        let mask = if self.flipped {
            flipped = flip_mask(mask);
            &flipped
        } else {
            mask
        };
        match &self.warp {
            Some(h) => warp_mask(mask, h),
            None => mask.clone(),
        }
    }

    pub fn apply_to_image(&self, image: &RgbImage, interpolation: Interpolation) -> RgbImage {
        let flipped;
        let image = if self.flipped {
            flipped = image::imageops::flip_horizontal(image);
            &flipped
        } else {
            image
        };
        match &self.warp {
            Some(h) => warp_image(image, h, interpolation),
            None => image.clone(),
        }
    }

    pub fn apply(&self, sample: &SegmentationSample) -> SegmentationSample {
        SegmentationSample {
            image: self.apply_to_image(&sample.image, Interpolation::Bilinear),
            mask: self.apply_to_mask(&sample.mask),
            source_id: sample.source_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

fn flip_mask(mask: &Mask) -> Mask {
    let data = mask
        .rows()
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Mask::from_vec(mask.width(), mask.height(), data).expect("same size")
}

/// Mirrors image and mask about the vertical axis.
pub fn horizontal_flip(sample: &SegmentationSample) -> SegmentationSample {
    SegmentationSample {
        image: image::imageops::flip_horizontal(&sample.image),
        mask: flip_mask(&sample.mask),
        source_id: sample.source_id.clone(),
    }
}

/// Nearest source pixel for a mapped coordinate, if it lies inside the source.
fn nearest_index(sx: f64, sy: f64, width: u32, height: u32) -> Option<(u32, u32)> {
    let x = (sx + 0.5).floor();
    let y = (sy + 0.5).floor();
    if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
        Some((x as u32, y as u32))
    } else {
        None
    }
}

pub fn warp_mask(mask: &Mask, h: &Homography) -> Mask {
    let (w, hgt) = mask.dimensions();
    let mut out = Mask::new(w, hgt, BACKGROUND);
    for y in 0..hgt {
        for x in 0..w {
            let (sx, sy) = h.apply(x as f64, y as f64);
            if let Some((ix, iy)) = nearest_index(sx, sy, w, hgt) {
                out.set(x, y, mask.get(ix, iy));
            }
        }
    }
    out
}

pub fn warp_image(image: &RgbImage, h: &Homography, interpolation: Interpolation) -> RgbImage {
    let (w, hgt) = image.dimensions();
    let mut out = RgbImage::new(w, hgt);
    for y in 0..hgt {
        for x in 0..w {
            let (sx, sy) = h.apply(x as f64, y as f64);
            let Some((ix, iy)) = nearest_index(sx, sy, w, hgt) else {
                continue;
            };
            let pixel = match interpolation {
                Interpolation::Nearest => *image.get_pixel(ix, iy),
                Interpolation::Bilinear => bilinear(image, sx, sy),
            };
            out.put_pixel(x, y, pixel);
        }
    }
    out
}

fn bilinear(image: &RgbImage, sx: f64, sy: f64) -> Rgb<u8> {
    let (w, h) = image.dimensions();
    let x0f = sx.floor();
    let y0f = sy.floor();
    let fx = sx - x0f;
    let fy = sy - y0f;
    let clamp = |v: f64, hi: u32| (v.max(0.0) as u32).min(hi - 1);
    let (x0, x1) = (clamp(x0f, w), clamp(x0f + 1.0, w));
    let (y0, y1) = (clamp(y0f, h), clamp(y0f + 1.0, h));
    let p = |x, y| image.get_pixel(x, y).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
        let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
        out[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

fn frame_corners(width: u32, height: u32) -> [(f64, f64); 4] {
    let (r, b) = ((width - 1) as f64, (height - 1) as f64);
    [(0.0, 0.0), (r, 0.0), (r, b), (0.0, b)]
}

/// True when the quadrilateral (in order) is strictly convex.
fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let cross = |i: usize| {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0)
    };
    let signs: Vec<f64> = (0..4).map(cross).collect();
    signs.iter().all(|&s| s > 1e-9) || signs.iter().all(|&s| s < -1e-9)
}

/// Draws a random source quadrilateral and returns the homography mapping
/// the output frame onto it, or `None` for a zero magnitude.
pub fn draw_warp<R: Rng>(
    width: u32,
    height: u32,
    magnitude: f64,
    rng: &mut R,
) -> Result<Option<Homography>> {
    check_magnitude(magnitude)?;
    if magnitude == 0.0 || width < 2 || height < 2 {
        return Ok(None);
    }
    let reach = magnitude * width.min(height) as f64;
    let frame = frame_corners(width, height);
    for _ in 0..WARP_ATTEMPTS {
        let mut quad = frame;
        for corner in quad.iter_mut() {
            corner.0 += rng.random_range(-reach..=reach);
            corner.1 += rng.random_range(-reach..=reach);
        }
        if !is_convex(&quad) {
            continue;
        }
        if let Some(h) = Homography::from_correspondences(frame, quad) {
            return Ok(Some(h));
        }
    }
    Err(Error::Augmentation(format!(
        "no valid warp quadrilateral after {WARP_ATTEMPTS} attempts (magnitude {magnitude})"
    )))
}

/// Random perspective warp of image and mask, deterministic in `seed`.
pub fn perspective_warp(
    sample: &SegmentationSample,
    magnitude: f64,
    seed: u64,
) -> Result<SegmentationSample> {
    let mut rng = seed::rng(seed, 0);
    let warp = draw_warp(sample.width(), sample.height(), magnitude, &mut rng)?;
    Ok(Geometry {
        flipped: false,
        warp,
    }
    .apply(sample))
}

/// Flip (with the policy's probability) then warp, returning the replayable geometry too.
pub fn apply_policy_recorded(
    sample: &SegmentationSample,
    policy: &AugmentationPolicy,
    draw_seed: u64,
) -> Result<(SegmentationSample, Geometry)> {
    policy.validate()?;
    let mut rng = seed::rng(policy.seed, draw_seed);
    let flipped = policy.flip_probability > 0.0 && rng.random::<f64>() < policy.flip_probability;
    let warp = draw_warp(
        sample.width(),
        sample.height(),
        policy.warp_magnitude,
        &mut rng,
    )?;
    let geometry = Geometry { flipped, warp };
    Ok((geometry.apply(sample), geometry))
}

pub fn apply_policy(
    sample: &SegmentationSample,
    policy: &AugmentationPolicy,
    draw_seed: u64,
) -> Result<SegmentationSample> {
    apply_policy_recorded(sample, policy, draw_seed).map(|(s, _)| s)
}

/// Class ids present in a mask, as a 256-entry presence table.
pub fn present_ids(mask: &Mask) -> [bool; 256] {
    let mut present = [false; 256];
    for &id in mask.as_slice() {
        present[id as usize] = true;
    }
    present
}
