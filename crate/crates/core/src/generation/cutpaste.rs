use rand::Rng;

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::raster::{mask_to_bbox, Mask, RgbImage};
use crate::seed;

pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.3, 1.3);

/// Where and how big the foreground landed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub scale: f64,
    pub offset: (usize, usize),
    pub size: (usize, usize),
}

/// Paste the masked foreground of `fg` onto `bg` at the given scale and
/// top-left offset. Errors when it does not fit.
pub fn paste_at(fg: &ImageRecord, bg: &RgbImage, scale: f64, offset: (usize, usize)) -> Result<(RgbImage, Mask, Placement)> {
    let mask = fg.mask.as_ref().ok_or(Error::EmptyMask)?;
    let bbox = mask_to_bbox(mask)?;
    let crop = fg.pixels.crop(bbox);
    let crop_mask = mask.crop(bbox);
    let (h, w) = scaled_dims(bbox.height(), bbox.width(), scale);
    let (bh, bw) = bg.dims();
    if offset.0 + h > bh || offset.1 + w > bw {
        return Err(Error::ForegroundTooLarge {
            fg_h: h,
            fg_w: w,
            bg_h: bh,
            bg_w: bw,
        });
    }
    let pix = crop.resize_bilinear(h, w);
    let m = crop_mask.resize_nearest(h, w);
    let mut out = bg.clone();
    let mut out_mask = Mask::new(bh, bw);
    for r in 0..h {
        for c in 0..w {
            if m.get(r, c) {
                out.put(offset.0 + r, offset.1 + c, pix.get(r, c));
                out_mask.set(offset.0 + r, offset.1 + c, true);
            }
        }
    }
    Ok((
        out,
        out_mask,
        Placement {
            scale,
            offset,
            size: (h, w),
        },
    ))
}

fn scaled_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

/// Composite the masked object of `fg` onto `bg` at a uniformly random
/// scale in `scale_range` and a uniformly random in-bounds position. A scale
/// that overflows the background is re-drawn once.
pub fn cut_and_paste(
    fg: &ImageRecord,
    bg: &RgbImage,
    scale_range: (f64, f64),
    rng_seed: u64,
) -> Result<(RgbImage, Mask, Placement)> {
    let mask = fg.mask.as_ref().ok_or(Error::EmptyMask)?;
    let bbox = mask_to_bbox(mask)?;
    let mut rng = seed::stream(rng_seed, "cut_and_paste", 0);
    let (bh, bw) = bg.dims();
    let mut last = (0, 0);
    for _ in 0..2 {
        let scale = if scale_range.0 < scale_range.1 {
            rng.random_range(scale_range.0..scale_range.1)
        } else {
            scale_range.0
        };
        let (h, w) = scaled_dims(bbox.height(), bbox.width(), scale);
        last = (h, w);
        if h <= bh && w <= bw {
            let r = rng.random_range(0..=bh - h);
            let c = rng.random_range(0..=bw - w);
            return paste_at(fg, bg, scale, (r, c));
        }
    }
    Err(Error::ForegroundTooLarge {
        fg_h: last.0,
        fg_w: last.1,
        bg_h: bh,
        bg_w: bw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn fg_square(n: usize, size: usize) -> ImageRecord {
        let img = RgbImage::from_fn(size, size, |r, c| [(r * 7) as u8, (c * 5) as u8, 200]);
        let mask = Mask::from_fn(size, size, |r, c| r < n && c < n);
        ImageRecord::new("fg", "x", Split::Train, img).with_mask(mask).unwrap()
    }

    #[test]
    fn identity_paste() {
        let fg = fg_square(10, 16);
        let bg = RgbImage::filled(16, 16, [1, 2, 3]);
        let (out, m, _) = paste_at(&fg, &bg, 1.0, (0, 0)).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                if m.get(r, c) {
                    assert_eq!(out.get(r, c), fg.pixels.get(r, c));
                } else {
                    assert_eq!(out.get(r, c), [1, 2, 3]);
                }
            }
        }
        assert_eq!(m, *fg.mask.as_ref().unwrap());
    }

    #[test]
    fn half_scale_area() {
        let fg = fg_square(10, 10);
        let bg = RgbImage::new(20, 20);
        let (_, m, p) = paste_at(&fg, &bg, 0.5, (3, 4)).unwrap();
        assert_eq!(m.count(), 25);
        assert_eq!(p.size, (5, 5));
    }

    #[test]
    fn too_large_errors() {
        let fg = fg_square(30, 30);
        let bg = RgbImage::new(10, 10);
        assert!(matches!(
            cut_and_paste(&fg, &bg, (0.9, 1.0), 0),
            Err(Error::ForegroundTooLarge { .. })
        ));
    }

    #[test]
    fn missing_mask_errors() {
        let rec = ImageRecord::new("fg", "x", Split::Train, RgbImage::new(4, 4));
        assert!(matches!(
            cut_and_paste(&rec, &RgbImage::new(4, 4), DEFAULT_SCALE_RANGE, 0),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn background_preserved_and_area_tracks_scale() {
        for seed_value in 0..50u64 {
            let fg = fg_square(40, 48);
            let bg = crate::toy::procedural_background(64, 64, "A sandbox", seed_value);
            let (out, m, p) = cut_and_paste(&fg, &bg, DEFAULT_SCALE_RANGE, seed_value).unwrap();
            for r in 0..64 {
                for c in 0..64 {
                    if !m.get(r, c) {
                        assert_eq!(out.get(r, c), bg.get(r, c));
                    }
                }
            }
            let ratio = m.count() as f64 / 1600.0;
            let s2 = p.scale * p.scale;
            assert!(ratio >= 0.9 * s2 && ratio <= 1.1 * s2, "ratio {ratio} vs s^2 {s2}");
        }
    }
}
