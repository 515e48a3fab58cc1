//! In-memory pixel grids, masks and boxes, plus the resampling and codec
//! helpers shared by every stage.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.height, self.width)
    }
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0, 0, 0])
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, bbox: BBox) -> RgbImage {
        RgbImage::from_fn(bbox.height(), bbox.width(), |r, c| {
            self.get(bbox.row_min + r, bbox.col_min + c)
        })
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        RgbImage::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Bilinear resize with half-pixel centers. Resizing to the same size is exact.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> RgbImage {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let cols: Vec<(usize, usize, f64)> = (0..width)
            .map(|c| sample_axis((c as f64 + 0.5) * sx - 0.5, self.width))
            .collect();
        let mut out = RgbImage::new(height, width);
        for r in 0..height {
            let (y0, y1, fy) = sample_axis((r as f64 + 0.5) * sy - 0.5, self.height);
            for (c, &(x0, x1, fx)) in cols.iter().enumerate() {
                let p00 = self.get(y0, x0);
                let p01 = self.get(y0, x1);
                let p10 = self.get(y1, x0);
                let p11 = self.get(y1, x1);
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let top = p00[ch] as f64 * (1.0 - fx) + p01[ch] as f64 * fx;
                    let bot = p10[ch] as f64 * (1.0 - fx) + p11[ch] as f64 * fx;
                    px[ch] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
                }
                out.put(r, c, px);
            }
        }
        out
    }

    /// Pixels as floats in `[-0.5, 0.5]`.
    pub fn to_unit_centered(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0 - 0.5).collect()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    pub fn load(path: &Path) -> Result<RgbImage> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        RgbImage::from_raw(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        RgbImage::from_raw(h as usize, w as usize, img.into_raw())
    }
}

/// Source indices and weight for one output coordinate.
#[inline]
fn sample_axis(pos: f64, len: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear lookup in a float grid at fractional index coordinates (clamped).
pub fn bilinear_sample(grid: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = grid.dim();
    let (y0, y1, fy) = sample_axis(y, h);
    let (x0, x1, fx) = sample_axis(x, w);
    let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
    let bot = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear upscaling of a float grid with half-pixel centers.
pub fn upscale_bilinear(grid: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    Array2::from_shape_fn((height, width), |(r, c)| {
        bilinear_sample(grid, (r as f64 + 0.5) * sy - 0.5, (c as f64 + 0.5) * sx - 0.5)
    })
}

/// Boolean foreground mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.height, self.width, self.count())
    }
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn crop(&self, bbox: BBox) -> Mask {
        Mask::from_fn(bbox.height(), bbox.width(), |r, c| {
            self.get(bbox.row_min + r, bbox.col_min + c)
        })
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Nearest-neighbour resize; sample at `floor((dst + 0.5) * src / dst_len)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |r, c| {
            let sr = ((r * 2 + 1) * self.height / (2 * height)).min(self.height - 1);
            let sc = ((c * 2 + 1) * self.width / (2 * width)).min(self.width - 1);
            self.get(sr, sc)
        })
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v != 0).collect();
        Ok(Mask {
            height: h as usize,
            width: w as usize,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("mask buffer length");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Inclusive integer box, row-major corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        Self {
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row_min <= self.row_max
            && self.col_min <= self.col_max
            && self.row_max < height
            && self.col_max < width
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let r0 = self.row_min.max(other.row_min);
        let c0 = self.col_min.max(other.col_min);
        let r1 = self.row_max.min(other.row_max);
        let c1 = self.col_max.min(other.col_max);
        let inter = if r0 > r1 || c0 > c1 {
            0
        } else {
            (r1 - r0 + 1) * (c1 - c0 + 1)
        };
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// Grow each side by `frac` of the box extent, clamped to the image.
    pub fn padded(&self, frac: f64, height: usize, width: usize) -> BBox {
        let pr = (self.height() as f64 * frac).round() as usize;
        let pc = (self.width() as f64 * frac).round() as usize;
        BBox {
            row_min: self.row_min.saturating_sub(pr),
            col_min: self.col_min.saturating_sub(pc),
            row_max: (self.row_max + pr).min(height - 1),
            col_max: (self.col_max + pc).min(width - 1),
        }
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.row_min, self.col_min, self.row_max, self.col_max]
    }
}

/// Tight inclusive box around the true pixels of `mask`.
pub fn mask_to_bbox(mask: &Mask) -> Result<BBox> {
    let mut rows = (usize::MAX, 0usize);
    let mut cols = (usize::MAX, 0usize);
    let mut any = false;
    for r in 0..mask.height {
        let row = &mask.data[r * mask.width..(r + 1) * mask.width];
        let (Some(first), Some(last)) = (row.iter().position(|&v| v), row.iter().rposition(|&v| v))
        else {
            continue;
        };
        any = true;
        rows = (rows.0.min(r), r);
        cols = (cols.0.min(first), cols.1.max(last));
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(BBox::new(rows.0, cols.0, rows.1, cols.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn point_mask_box() {
        let mut m = Mask::new(10, 10);
        m.set(4, 7, true);
        assert_eq!(mask_to_bbox(&m).unwrap(), BBox::new(4, 7, 4, 7));
    }

    #[test]
    fn two_point_hull() {
        let mut m = Mask::new(10, 10);
        m.set(2, 3, true);
        m.set(5, 7, true);
        assert_eq!(mask_to_bbox(&m).unwrap(), BBox::new(2, 3, 5, 7));
    }

    #[test]
    fn empty_mask_errors() {
        assert!(matches!(mask_to_bbox(&Mask::new(4, 4)), Err(Error::EmptyMask)));
    }

    fn scan_oracle(m: &Mask) -> Option<BBox> {
        let mut pts = vec![];
        for r in 0..m.height() {
            for c in 0..m.width() {
                if m.get(r, c) {
                    pts.push((r, c));
                }
            }
        }
        if pts.is_empty() {
            return None;
        }
        Some(BBox::new(
            pts.iter().map(|p| p.0).min().unwrap(),
            pts.iter().map(|p| p.1).min().unwrap(),
            pts.iter().map(|p| p.0).max().unwrap(),
            pts.iter().map(|p| p.1).max().unwrap(),
        ))
    }

    proptest! {
        #[test]
        fn bbox_matches_pixel_scan(bits in proptest::collection::vec(proptest::bool::weighted(0.08), 256)) {
            let m = Mask::from_fn(16, 16, |r, c| bits[r * 16 + c]);
            match scan_oracle(&m) {
                None => prop_assert!(mask_to_bbox(&m).is_err()),
                Some(expected) => {
                    let got = mask_to_bbox(&m).unwrap();
                    prop_assert_eq!(got, expected);
                    for r in 0..16 { for c in 0..16 {
                        if m.get(r, c) { prop_assert!(got.contains(r, c)); }
                    }}
                }
            }
        }
    }

    #[test]
    fn same_size_resize_is_exact() {
        let img = RgbImage::from_fn(5, 7, |r, c| [(r * 40) as u8, (c * 30) as u8, 9]);
        assert_eq!(img.resize_bilinear(5, 7), img);
    }

    #[test]
    fn nearest_half_scale_area() {
        let m = Mask::from_fn(10, 10, |_, _| true);
        assert_eq!(m.resize_nearest(5, 5).count(), 25);
    }

    #[test]
    fn png_roundtrip_is_lossless() {
        let img = RgbImage::from_fn(6, 9, |r, c| [(r * 31) as u8, (c * 17) as u8, (r * c) as u8]);
        let back = RgbImage::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn box_iou() {
        let a = BBox::new(0, 0, 1, 1);
        let b = BBox::new(1, 1, 2, 2);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
    }
}
