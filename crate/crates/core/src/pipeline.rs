//! Conversion between scene samples and fixed-size model tensors.
//!
//! Images are scaled so their longer side matches the target, the shorter
//! side is floored to an integer, and the remainder is zero-padded evenly
//! with the odd pixel going to the bottom/right. All channels are mapped
//! from `0..=255` (or `{0, 1}` for the mask) into `[-1, 1]`.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::SceneSample;
use crate::error::{Error, Result};
use crate::geometry::{Mask, RegionSet};
use crate::model::Tensor;

pub const MODEL_SIZE: u32 = 256;

/// Resize-and-pad parameters, enough to map back to the original image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub scale: f64,
    pub pad_left: u32,
    pub pad_top: u32,
    pub pad_right: u32,
    pub pad_bottom: u32,
    pub original_size: (u32, u32),
}

impl SpatialTransform {
    pub fn for_size(width: u32, height: u32, target: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("non-empty image", format!("{width}x{height}")));
        }
        let long = width.max(height) as u64;
        let fit = |side: u32| ((side as u64 * target as u64 / long) as u32).max(1);
        let (cw, ch) = (fit(width), fit(height));
        let (pw, ph) = (target - cw, target - ch);
        Ok(SpatialTransform {
            scale: target as f64 / long as f64,
            pad_left: pw / 2,
            pad_right: pw - pw / 2,
            pad_top: ph / 2,
            pad_bottom: ph - ph / 2,
            original_size: (width, height),
        })
    }

    pub fn identity(size: u32) -> Self {
        SpatialTransform {
            scale: 1.0,
            pad_left: 0,
            pad_top: 0,
            pad_right: 0,
            pad_bottom: 0,
            original_size: (size, size),
        }
    }

    /// `(width, height)` of the scaled image before padding.
    pub fn content_size(&self, target: u32) -> (u32, u32) {
        (
            target - self.pad_left - self.pad_right,
            target - self.pad_top - self.pad_bottom,
        )
    }

    pub fn pad_offset(&self) -> (f64, f64) {
        (self.pad_left as f64, self.pad_top as f64)
    }

    /// Checks the transform describes a `target × target` padded image.
    pub fn validate(&self, target: u32) -> Result<()> {
        let (w, h) = self.original_size;
        let ok = self.scale > 0.0
            && self.scale.is_finite()
            && w > 0
            && h > 0
            && self.pad_left + self.pad_right < target
            && self.pad_top + self.pad_bottom < target;
        if !ok {
            return Err(Error::shape(format!("transform into {target}x{target}"), format!("{self:?}")));
        }
        Ok(())
    }
}

/// Bilinear resampling of a planar `channels × h × w` buffer to
/// `dst_w × dst_h`. Destination pixel centers map to source coordinates
/// through `(d + 0.5) · ratio - 0.5`, clamped to the source.
fn resample(src: &[f32], channels: usize, (w, h): (u32, u32), (dst_w, dst_h): (u32, u32), ratio: (f64, f64)) -> Vec<f32> {
    let (w, h) = (w as usize, h as usize);
    let (dw, dh) = (dst_w as usize, dst_h as usize);
    let taps = |d: usize, r: f64, n: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * r - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..dw).map(|x| taps(x, ratio.0, w)).collect();
    let ys: Vec<_> = (0..dh).map(|y| taps(y, ratio.1, h)).collect();
    let mut out = vec![0f32; channels * dw * dh];
    for c in 0..channels {
        let plane = &src[c * w * h..(c + 1) * w * h];
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(c * dh + y) * dw + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

fn rgb_to_planar(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32;
        }
    }
    out
}

fn planar_to_rgb(data: &[f32], w: u32, h: u32) -> RgbImage {
    let plane = (w * h) as usize;
    RgbImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        let q = |c: usize| data[c * plane + i].round().clamp(0.0, 255.0) as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

/// Scales the longer side to `target` and zero-pads to a `target` square.
pub fn resize_pad(img: &RgbImage, target: u32) -> Result<(RgbImage, SpatialTransform)> {
    let (w, h) = img.dimensions();
    let t = SpatialTransform::for_size(w, h, target)?;
    let (cw, ch) = t.content_size(target);
    let content = if (cw, ch) == (w, h) {
        img.clone()
    } else {
        let ratio = 1.0 / t.scale;
        planar_to_rgb(&resample(&rgb_to_planar(img), 3, (w, h), (cw, ch), (ratio, ratio)), cw, ch)
    };
    let mut out = RgbImage::new(target, target);
    image::imageops::replace(&mut out, &content, t.pad_left as i64, t.pad_top as i64);
    Ok((out, t))
}

/// Crops the padding from a planar `channels × target × target` buffer and
/// rescales it to the original size.
pub fn unpad_restore_planar(data: &[f32], channels: usize, target: u32, t: &SpatialTransform) -> Result<Vec<f32>> {
    t.validate(target)?;
    let tsz = target as usize;
    if data.len() != channels * tsz * tsz {
        return Err(Error::shape(
            format!("{channels}x{target}x{target} buffer"),
            format!("{} values", data.len()),
        ));
    }
    let (cw, ch) = t.content_size(target);
    let (cw_, ch_) = (cw as usize, ch as usize);
    let mut crop = Vec::with_capacity(channels * cw_ * ch_);
    for c in 0..channels {
        for y in 0..ch_ {
            let row = (c * tsz + y + t.pad_top as usize) * tsz + t.pad_left as usize;
            crop.extend_from_slice(&data[row..row + cw_]);
        }
    }
    let (w, h) = t.original_size;
    if (cw, ch) == (w, h) {
        return Ok(crop);
    }
    Ok(resample(&crop, channels, (cw, ch), (w, h), (t.scale, t.scale)))
}

/// Inverse of [`resize_pad`] up to resampling loss.
pub fn unpad_restore(img: &RgbImage, t: &SpatialTransform) -> Result<RgbImage> {
    let target = img.width();
    if img.height() != target {
        return Err(Error::shape("square image", format!("{}x{}", img.width(), img.height())));
    }
    let data = unpad_restore_planar(&rgb_to_planar(img), 3, target, t)?;
    Ok(planar_to_rgb(&data, t.original_size.0, t.original_size.1))
}

#[inline]
pub fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[inline]
pub fn denormalize(v: f32) -> u8 {
    (v.clamp(-1.0, 1.0) * 127.5 + 127.5).round() as u8
}

/// One sample at model resolution, kept as bytes until batching.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub size: u32,
    /// Planar RGB of the text image.
    pub rgb: Vec<u8>,
    /// Binary mask, one byte per pixel.
    pub mask: Vec<u8>,
    /// Planar RGB of the clean background.
    pub target: Vec<u8>,
    pub transform: SpatialTransform,
}

fn planar_bytes(img: &RgbImage) -> Vec<u8> {
    let plane = (img.width() * img.height()) as usize;
    let mut out = vec![0u8; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c];
        }
    }
    out
}

impl PreparedSample {
    pub fn new(sample: &SceneSample, selected: Option<&[usize]>, size: u32) -> Result<Self> {
        let (text, t) = resize_pad(&sample.text_image, size)?;
        let (bg, _) = resize_pad(&sample.background_image, size)?;
        let regions = match selected {
            Some(idx) => sample.regions.select(idx)?,
            None => sample.regions.clone(),
        };
        let mask = regions.transform(t.scale, t.pad_offset(), (size, size)).rasterize();
        Ok(PreparedSample {
            id: sample.id.clone(),
            size,
            rgb: planar_bytes(&text),
            mask: mask.data().to_vec(),
            target: planar_bytes(&bg),
            transform: t,
        })
    }

    pub fn mask(&self) -> Mask {
        let mut m = Mask::zeros(self.size, self.size);
        for (i, &v) in self.mask.iter().enumerate() {
            if v != 0 {
                m.set(i as u32 % self.size, i as u32 / self.size);
            }
        }
        m
    }

    /// Writes the normalized 4-channel input and 3-channel target into the
    /// given per-image slices.
    fn write(&self, x: &mut [f32], y: &mut [f32], use_mask: bool) {
        let plane = (self.size * self.size) as usize;
        for (d, &s) in x[..3 * plane].iter_mut().zip(&self.rgb) {
            *d = normalize(s);
        }
        for (d, &m) in x[3 * plane..].iter_mut().zip(&self.mask) {
            *d = if use_mask && m != 0 { 1.0 } else { -1.0 };
        }
        for (d, &s) in y.iter_mut().zip(&self.target) {
            *d = normalize(s);
        }
    }
}

/// Normalized network input (RGB + mask) and target, each `1 × C × S × S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub transform: SpatialTransform,
}

pub fn make_model_input(sample: &SceneSample, selected: Option<&[usize]>) -> Result<ModelInput> {
    let p = PreparedSample::new(sample, selected, MODEL_SIZE)?;
    let (x, y) = assemble(&[&p], true);
    Ok(ModelInput {
        x,
        y,
        transform: p.transform,
    })
}

/// Input tensor for inference: RGB image plus the mask of the given regions
/// (already in original-image coordinates).
pub fn inference_input(image: &RgbImage, regions: &RegionSet, size: u32) -> Result<(Tensor<f32>, SpatialTransform)> {
    let (resized, t) = resize_pad(image, size)?;
    let mask = regions.transform(t.scale, t.pad_offset(), (size, size)).rasterize();
    let plane = (size * size) as usize;
    let mut x = vec![0f32; 4 * plane];
    for (d, &s) in x[..3 * plane].iter_mut().zip(&planar_bytes(&resized)) {
        *d = normalize(s);
    }
    for (d, &m) in x[3 * plane..].iter_mut().zip(mask.data()) {
        *d = if m != 0 { 1.0 } else { -1.0 };
    }
    Ok((Tensor::from_vec([1, 4, size as usize, size as usize], x), t))
}

/// Stacks prepared samples into `(X: B×4×S×S, Y: B×3×S×S)`. With
/// `use_mask == false` the mask channel is constant −1.
pub fn assemble(samples: &[&PreparedSample], use_mask: bool) -> (Tensor<f32>, Tensor<f32>) {
    let s = samples[0].size as usize;
    let b = samples.len();
    let mut x = Tensor::zeros([b, 4, s, s]);
    let mut y = Tensor::zeros([b, 3, s, s]);
    for (i, p) in samples.iter().enumerate() {
        assert_eq!(p.size as usize, s, "mixed sample sizes in one batch");
        let mut yi = vec![0f32; 3 * s * s];
        p.write(x.image_mut(i), &mut yi, use_mask);
        y.image_mut(i).copy_from_slice(&yi);
    }
    (x, y)
}

/// Permutation of `0..n` for pass `pass` of a seeded shuffle.
pub fn shuffled_order(n: usize, seed: u64, pass: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pass);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One pass over a corpus in seeded order.
pub struct Batches<'a> {
    corpus: &'a [PreparedSample],
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    keep_partial: bool,
    use_mask: bool,
}

pub struct Batch {
    pub ids: Vec<String>,
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
}

/// Seeded batch stream. The trailing partial batch is dropped unless
/// `keep_partial` (evaluation mode).
pub fn batches(corpus: &[PreparedSample], batch_size: usize, shuffle_seed: u64, keep_partial: bool) -> Batches<'_> {
    assert!(batch_size > 0, "batch size must be positive");
    Batches {
        corpus,
        order: shuffled_order(corpus.len(), shuffle_seed, 0),
        batch_size,
        next: 0,
        keep_partial,
        use_mask: true,
    }
}

impl Batches<'_> {
    pub fn without_mask(mut self) -> Self {
        self.use_mask = false;
        self
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.next;
        if remaining == 0 || (remaining < self.batch_size && !self.keep_partial) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let picked: Vec<&PreparedSample> = self.order[self.next..self.next + take]
            .iter()
            .map(|&i| &self.corpus[i])
            .collect();
        self.next += take;
        let (x, y) = assemble(&picked, self.use_mask);
        Some(Batch {
            ids: picked.iter().map(|p| p.id.clone()).collect(),
            x,
            y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TextRegion;

    fn sample(w: u32, h: u32, regions: Vec<TextRegion>) -> SceneSample {
        let text = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 200]));
        let bg = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 100]));
        SceneSample {
            id: "s".into(),
            text_image: text,
            background_image: bg,
            regions: RegionSet::new(regions, w, h),
        }
    }

    #[test]
    fn resize_pad_landscape() {
        let img = RgbImage::from_pixel(640, 480, Rgb([10, 20, 30]));
        let (out, t) = resize_pad(&img, 256).unwrap();
        assert_eq!(out.dimensions(), (256, 256));
        assert!((t.scale - 0.4).abs() < 1e-15);
        assert_eq!(t.content_size(256), (256, 192));
        assert_eq!((t.pad_top, t.pad_bottom, t.pad_left, t.pad_right), (32, 32, 0, 0));
        assert_eq!(out.get_pixel(0, 31), &Rgb([0, 0, 0]));
        assert_eq!(out.get_pixel(0, 32), &Rgb([10, 20, 30]));
        assert_eq!(out.get_pixel(255, 223), &Rgb([10, 20, 30]));
        assert_eq!(out.get_pixel(255, 224), &Rgb([0, 0, 0]));
    }

    #[test]
    fn resize_pad_square_is_identity() {
        let img = RgbImage::from_fn(256, 256, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
        let (out, t) = resize_pad(&img, 256).unwrap();
        assert_eq!(out, img);
        assert_eq!(t.scale, 1.0);
        assert_eq!((t.pad_left, t.pad_right, t.pad_top, t.pad_bottom), (0, 0, 0, 0));
    }

    #[test]
    fn resize_pad_portrait_odd_padding() {
        let img = RgbImage::new(100, 300);
        let (_, t) = resize_pad(&img, 256).unwrap();
        // floor(100 · 256 / 300) = 85; 171 columns of padding split 85 | 86
        assert_eq!(t.content_size(256), (85, 256));
        assert_eq!((t.pad_left, t.pad_right), (85, 86));
        assert_eq!((t.pad_top, t.pad_bottom), (0, 0));
        assert!(resize_pad(&RgbImage::new(0, 5), 256).is_err());
    }

    #[test]
    fn restore_round_trip_shapes_and_constants() {
        for (w, h) in [(640, 480), (100, 300), (37, 53), (256, 256), (300, 7)] {
            let img = RgbImage::from_pixel(w, h, Rgb([77, 140, 3]));
            let (padded, t) = resize_pad(&img, 256).unwrap();
            let back = unpad_restore(&padded, &t).unwrap();
            assert_eq!(back, img, "{w}x{h}");
        }
        let img = RgbImage::from_fn(256, 256, |x, y| Rgb([x as u8, y as u8, 0]));
        assert_eq!(unpad_restore(&img, &SpatialTransform::identity(256)).unwrap(), img);
        let bad = SpatialTransform {
            pad_left: 300,
            ..SpatialTransform::identity(256)
        };
        assert!(unpad_restore(&img, &bad).is_err());
    }

    #[test]
    fn normalization_endpoints_and_round_trip() {
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
        assert!((normalize(128) - 0.003_921_569).abs() < 1e-6);
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
        }
        assert_eq!(denormalize(7.0), 255);
        assert_eq!(denormalize(-3.0), 0);
    }

    #[test]
    fn model_input_channels() {
        let s = sample(320, 240, vec![]);
        let mi = make_model_input(&s, None).unwrap();
        assert_eq!(mi.x.shape(), [1, 4, 256, 256]);
        assert_eq!(mi.y.shape(), [1, 3, 256, 256]);
        assert!(mi.x.image(0)[3 * 65536..].iter().all(|&v| v == -1.0));

        let full = TextRegion::axis_aligned(0.0, 0.0, 256.0, 256.0).unwrap();
        let mi = make_model_input(&sample(256, 256, vec![full]), None).unwrap();
        assert!(mi.x.image(0)[3 * 65536..].iter().all(|&v| v == 1.0));

        // RGB channels are exactly normalize(resize_pad(text))
        let (resized, _) = resize_pad(&s.text_image, 256).unwrap();
        for (i, px) in resized.pixels().enumerate() {
            for c in 0..3 {
                assert_eq!(mi_rgb(&make_model_input(&s, None).unwrap(), c, i), normalize(px[c]));
            }
            if i > 2000 {
                break;
            }
        }
    }

    fn mi_rgb(mi: &ModelInput, c: usize, i: usize) -> f32 {
        mi.x.image(0)[c * 65536 + i]
    }

    #[test]
    fn mask_channel_follows_transformed_regions() {
        let r = TextRegion::axis_aligned(100.0, 100.0, 300.0, 200.0).unwrap();
        let s = sample(640, 480, vec![r]);
        let mi = make_model_input(&s, None).unwrap();
        let t = mi.transform;
        let expect = s.regions.transform(t.scale, t.pad_offset(), (256, 256)).rasterize();
        for (i, &m) in expect.data().iter().enumerate() {
            let v = mi.x.image(0)[3 * 65536 + i];
            assert_eq!(v, if m == 1 { 1.0 } else { -1.0 });
        }
        let none = make_model_input(&s, Some(&[])).unwrap();
        assert!(none.x.image(0)[3 * 65536..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn batching_counts_and_order() {
        let s = sample(64, 64, vec![]);
        let corpus: Vec<PreparedSample> = (0..32)
            .map(|i| {
                let mut p = PreparedSample::new(&s, None, 64).unwrap();
                p.id = format!("{i:04}");
                p
            })
            .collect();
        assert_eq!(batches(&corpus, 16, 1, false).count(), 2);
        assert_eq!(batches(&corpus, 10, 1, false).count(), 3);
        assert_eq!(batches(&corpus, 10, 1, true).count(), 4);
        let a: Vec<_> = batches(&corpus, 16, 5, false).flat_map(|b| b.ids).collect();
        let b: Vec<_> = batches(&corpus, 16, 5, false).flat_map(|b| b.ids).collect();
        let c: Vec<_> = batches(&corpus, 16, 6, false).flat_map(|b| b.ids).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
