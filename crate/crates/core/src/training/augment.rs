//! Geometric augmentation of anchors and positives: rotation, horizontal
//! flip, then a random resized crop. Masks follow the same geometry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::raster::{mask_to_bbox, BBox, Mask, RgbImage};
use crate::seed;

pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const FLIP_PROB: f64 = 0.5;
pub const CROP_AREA: (f64, f64) = (0.6, 1.0);

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub flip: bool,
    /// Fraction of the image area kept by the crop.
    pub crop_area: f64,
    /// Crop origin as fractions of the free space along each axis.
    pub crop_origin: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        flip: false,
        crop_area: 1.0,
        crop_origin: (0.0, 0.0),
    };

    pub fn sample(rng_seed: u64) -> Self {
        let mut rng = seed::rng(rng_seed);
        Self {
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            flip: rng.random_bool(FLIP_PROB),
            crop_area: rng.random_range(CROP_AREA.0..=CROP_AREA.1),
            crop_origin: (rng.random(), rng.random()),
        }
    }

    /// Crop window for an `h x w` image. The crop keeps the image aspect.
    pub fn crop_box(&self, h: usize, w: usize) -> BBox {
        let side = self.crop_area.clamp(0.0, 1.0).sqrt();
        let ch = ((h as f64 * side).round() as usize).clamp(1, h);
        let cw = ((w as f64 * side).round() as usize).clamp(1, w);
        let r0 = ((h - ch) as f64 * self.crop_origin.0).round() as usize;
        let c0 = ((w - cw) as f64 * self.crop_origin.1).round() as usize;
        BBox::new(r0, c0, r0 + ch - 1, c0 + cw - 1)
    }
}

/// Source coordinates for output point `(y, x)` of a rotation about the
/// image center.
fn rotate_source(y: f64, x: f64, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (y - cy, x - cx);
    (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
}

/// Bilinear sample with black outside the image.
fn sample_bilinear(img: &RgbImage, y: f64, x: f64) -> [u8; 3] {
    let (h, w) = img.dims();
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return [0, 0, 0];
    }
    let (y, x) = (y.clamp(0.0, (h - 1) as f64), x.clamp(0.0, (w - 1) as f64));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let (p00, p01, p10, p11) = (img.get(y0, x0), img.get(y0, x1), img.get(y1, x0), img.get(y1, x1));
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let top = p00[ch] as f64 * (1.0 - fx) + p01[ch] as f64 * fx;
        let bot = p10[ch] as f64 * (1.0 - fx) + p11[ch] as f64 * fx;
        *o = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn sample_nearest(mask: &Mask, y: f64, x: f64) -> bool {
    let (h, w) = mask.dims();
    let (y, x) = (y.round(), x.round());
    y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
}

pub fn rotate_image(img: &RgbImage, deg: f64) -> RgbImage {
    if deg == 0.0 {
        return img.clone();
    }
    let (h, w) = img.dims();
    let (sin, cos) = deg.to_radians().sin_cos();
    RgbImage::from_fn(h, w, |r, c| {
        let (y, x) = rotate_source(r as f64, c as f64, h, w, cos, sin);
        sample_bilinear(img, y, x)
    })
}

pub fn rotate_mask(mask: &Mask, deg: f64) -> Mask {
    if deg == 0.0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let (sin, cos) = deg.to_radians().sin_cos();
    Mask::from_fn(h, w, |r, c| {
        let (y, x) = rotate_source(r as f64, c as f64, h, w, cos, sin);
        sample_nearest(mask, y, x)
    })
}

/// Output-to-source coordinate map of rotate, flip, crop and resize, so
/// the whole chain costs one resampling pass.
struct Warp {
    h: usize,
    w: usize,
    crop: BBox,
    scale: (f64, f64),
    flip: bool,
    cos: f64,
    sin: f64,
}

impl Warp {
    fn new(h: usize, w: usize, p: &AugmentParams) -> Self {
        let crop = p.crop_box(h, w);
        let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
        Self {
            h,
            w,
            crop,
            scale: (crop.height() as f64 / h as f64, crop.width() as f64 / w as f64),
            flip: p.flip,
            cos,
            sin,
        }
    }

    fn source(&self, r: usize, c: usize) -> (f64, f64) {
        // Half-pixel aligned resize of the crop window back to full size.
        let y = ((r as f64 + 0.5) * self.scale.0 - 0.5).clamp(0.0, (self.crop.height() - 1) as f64);
        let x = ((c as f64 + 0.5) * self.scale.1 - 0.5).clamp(0.0, (self.crop.width() - 1) as f64);
        let (y, x) = (y + self.crop.row_min as f64, x + self.crop.col_min as f64);
        let x = if self.flip { (self.w - 1) as f64 - x } else { x };
        rotate_source(y, x, self.h, self.w, self.cos, self.sin)
    }
}

/// Apply explicit parameters.
pub fn augment_with(rec: &ImageRecord, p: &AugmentParams) -> ImageRecord {
    let (h, w) = rec.pixels.dims();
    let warp = Warp::new(h, w, p);
    let pixels = RgbImage::from_fn(h, w, |r, c| {
        let (y, x) = warp.source(r, c);
        sample_bilinear(&rec.pixels, y, x)
    });
    let mask = rec.mask.as_ref().map(|m| {
        Mask::from_fn(h, w, |r, c| {
            let (y, x) = warp.source(r, c);
            sample_nearest(m, y, x)
        })
    });
    ImageRecord {
        id: rec.id.clone(),
        pixels,
        instance_id: rec.instance_id.clone(),
        split: rec.split,
        scene: rec.scene.clone(),
        bbox: mask.as_ref().and_then(|m| mask_to_bbox(m).ok()),
        mask,
    }
}

/// Draw parameters from `rng_seed` and apply them.
pub fn augment(rec: &ImageRecord, rng_seed: u64) -> ImageRecord {
    augment_with(rec, &AugmentParams::sample(rng_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn noise_record(seed_value: u64) -> ImageRecord {
        let mut rng = seed::rng(seed_value);
        let img = RgbImage::from_fn(32, 32, |_, _| [rng.random(), rng.random(), rng.random()]);
        let mask = Mask::from_fn(32, 32, |r, c| (8..20).contains(&r) && (10..26).contains(&c));
        ImageRecord::new("x", "x", Split::Train, img).with_mask(mask).unwrap()
    }

    #[test]
    fn identity_params_are_identity() {
        let rec = noise_record(1);
        assert_eq!(augment_with(&rec, &AugmentParams::IDENTITY), rec);
    }

    #[test]
    fn double_flip_is_identity() {
        let rec = noise_record(2);
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        assert_eq!(augment_with(&augment_with(&rec, &flip), &flip), rec);
    }

    #[test]
    fn sampled_params_in_range() {
        for s in 0..200 {
            let p = AugmentParams::sample(s);
            assert!(p.rotation_deg.abs() <= MAX_ROTATION_DEG);
            assert!((CROP_AREA.0..=CROP_AREA.1).contains(&p.crop_area));
            let b = p.crop_box(64, 64);
            assert!(b.fits(64, 64));
        }
    }

    #[test]
    fn crop_mask_ratio_matches_window() {
        let rec = noise_record(3);
        for s in 0..50 {
            let p = AugmentParams {
                rotation_deg: 0.0,
                flip: false,
                ..AugmentParams::sample(s)
            };
            let out = augment_with(&rec, &p);
            let window = rec.mask.as_ref().unwrap().crop(p.crop_box(32, 32));
            let expect = window.count() as f64 / (window.height() * window.width()) as f64;
            let got = out.mask.as_ref().unwrap().count() as f64 / (32.0 * 32.0);
            // Nearest resampling moves each edge by at most one output pixel.
            assert!((got - expect).abs() <= 4.0 * 32.0 / 1024.0, "seed {s}: {got} vs {expect}");
        }
    }

    #[test]
    fn rotated_mask_keeps_area_roughly() {
        let rec = noise_record(4);
        let m = rotate_mask(rec.mask.as_ref().unwrap(), 20.0);
        let before = rec.mask.as_ref().unwrap().count() as f64;
        assert!((m.count() as f64 - before).abs() / before < 0.1);
    }
}
