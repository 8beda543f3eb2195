//! Planar RGB images and binary masks.
//!
//! Images are stored channel-major (CHW) as `f32` in the model range `[-1, 1]`.
//! Masks hold one byte per pixel, strictly `0` or `1`.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Rgb, RgbImage as Rgb8Image};

use crate::error::{param_err, Error, Result};

/// Threshold applied to 8-bit mask files; anti-aliased edges are common.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(param_err!(
                "rgb buffer has {} values, expected 3x{}x{}",
                data.len(),
                height,
                width
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(plane));
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Converts an 8-bit image, mapping `0..=255` to `[-1, 1]`.
    pub fn from_rgb8(img: &Rgb8Image) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// Quantizes to 8 bits with round-to-nearest after clamping.
    pub fn to_rgb8(&self) -> Rgb8Image {
        let (w, h) = (self.width, self.height);
        Rgb8Image::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let v = self.get(c, y as usize, x as usize).clamp(-1.0, 1.0);
                *p = ((v + 1.0) * 127.5).round() as u8;
            }
            Rgb(px)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// Values on the 0–255 scale, channel-major, without rounding.
    pub fn iter_255(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|&v| (v as f64 + 1.0) * 127.5)
    }

    /// Bicubic (Catmull-Rom) resize; the result is clamped to `[-1, 1]`.
    /// Resizing to the current size returns an exact copy.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        // The resampler clamps float pixels to [0, 1], so work in that range.
        let (w, h) = (self.width, self.height);
        let mut hwc = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    hwc.push((self.get(c, y, x) + 1.0) * 0.5);
                }
            }
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, hwc).expect("buffer length checked");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::CatmullRom);
        let mut data = vec![0f32; 3 * width * height];
        for (x, y, px) in out.enumerate_pixels() {
            for c in 0..3 {
                data[(c * height + y as usize) * width + x as usize] =
                    (px[c].clamp(0.0, 1.0) * 2.0 - 1.0).clamp(-1.0, 1.0);
            }
        }
        Self { width, height, data }
    }

    pub fn resize_square(&self, size: usize) -> Self {
        self.resize(size, size)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(param_err!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width,
                self.height
            ));
        }
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), device)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(param_err!("expected a (3,H,W) tensor, got {:?}", t.shape())),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(param_err!("expected 3 channels, got {c}"));
        }
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// Stacks same-sized images into a `(B, 3, H, W)` tensor.
    pub fn stack(images: &[&RgbImage], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| param_err!("cannot stack an empty image list"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != first.dims() {
                return Err(param_err!("image sizes differ: {:?} vs {:?}", img.dims(), first.dims()));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(
            data,
            (images.len(), 3, first.height, first.width),
            device,
        )?)
    }

    pub fn unstack(batch: &Tensor) -> Result<Vec<RgbImage>> {
        let n = batch.dim(0)?;
        (0..n).map(|i| Self::from_tensor(&batch.get(i)?)).collect()
    }

    /// Pixelwise `M ⊙ fg + (1 − M) ⊙ bg`; with a binary mask background pixels
    /// are copied verbatim.
    pub fn blend(fg: &RgbImage, bg: &RgbImage, mask: &Mask) -> Result<RgbImage> {
        if fg.dims() != bg.dims() || fg.dims() != mask.dims() {
            return Err(param_err!(
                "blend size mismatch: fg {:?}, bg {:?}, mask {:?}",
                fg.dims(),
                bg.dims(),
                mask.dims()
            ));
        }
        let plane = fg.width * fg.height;
        let mut out = bg.clone();
        for c in 0..3 {
            for (i, &m) in mask.data.iter().enumerate() {
                if m == 1 {
                    out.data[c * plane + i] = fg.data[c * plane + i];
                }
            }
        }
        Ok(out)
    }
}

/// Binary foreground mask; `1` marks the foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(param_err!(
                "mask buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(param_err!("mask must be binary, found value {v}"));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self { width, height, data }
    }

    /// Binarizes an 8-bit mask with [`MASK_THRESHOLD`].
    pub fn from_gray8(img: &GrayImage) -> Self {
        let data = img.pixels().map(|p| (p[0] >= MASK_THRESHOLD) as u8).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    /// Builds a mask from `[0, 1]`-valued floats (e.g. a resampled mask),
    /// thresholding at one half.
    pub fn from_unit_floats(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        if values.len() != width * height {
            return Err(param_err!("mask float buffer length mismatch"));
        }
        Ok(Self {
            width,
            height,
            data: values.iter().map(|&v| (v >= 0.5) as u8).collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        Ok(Self::from_gray8(&img))
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.get(y as usize, x as usize) * 255])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8()
            .save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_on(&self, y: usize, x: usize) -> bool {
        self.get(y, x) == 1
    }

    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count_on() == 0
    }

    /// Nearest-neighbour resize: destination pixel `(x, y)` samples source
    /// `floor((x + 0.5) · W / w)`, which keeps the mask binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Mask::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.is_on(src_y, src_x)
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Mask::from_fn(self.width, self.height, |x, y| self.is_on(y, self.width - 1 - x))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(param_err!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width,
                self.height
            ));
        }
        Ok(Mask::from_fn(w, h, |x, y| self.is_on(y0 + y, x0 + x)))
    }

    /// `(1, H, W)` tensor with values in `{0, 1}`.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&m| m as f32).collect();
        Ok(Tensor::from_vec(v, (1, self.height, self.width), device)?)
    }

    pub fn stack(masks: &[&Mask], device: &Device) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| param_err!("cannot stack an empty mask list"))?;
        let mut data = Vec::with_capacity(masks.len() * first.data.len());
        for m in masks {
            if m.dims() != first.dims() {
                return Err(param_err!("mask sizes differ"));
            }
            data.extend(m.data.iter().map(|&v| v as f32));
        }
        Ok(Tensor::from_vec(
            data,
            (masks.len(), 1, first.height, first.width),
            device,
        )?)
    }
}

/// Ensures a mask and an image share spatial size.
pub fn check_same_size(img: &RgbImage, mask: &Mask) -> Result<()> {
    if img.dims() != mask.dims() {
        return Err(Error::Param(format!(
            "image is {:?} but mask is {:?}",
            img.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbImage {
        let data = (0..3 * w * h).map(|i| (i % 97) as f32 / 48.5 - 1.0).collect();
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn rgb8_round_trip_is_exact() {
        let img = Rgb8Image::from_fn(5, 4, |x, y| Rgb([x as u8 * 40, y as u8 * 60, 255]));
        let back = RgbImage::from_rgb8(&img).to_rgb8();
        assert_eq!(img, back);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = ramp(8, 6);
        assert_eq!(img.resize(8, 6), img);
    }

    #[test]
    fn resize_of_constant_image_stays_constant() {
        let img = RgbImage::filled(16, 16, [0.25, -0.5, 0.75]);
        let small = img.resize(8, 8);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert!((small.get(c, y, x) - img.get(c, 0, 0)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn nearest_downsample_keeps_binary_blocks() {
        let m = Mask::from_fn(16, 16, |x, _| x < 8);
        let small = m.resize_nearest(2, 2);
        assert_eq!(small.data(), &[1, 0, 1, 0]);
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(Mask::new(2, 1, vec![0, 2]).is_err());
    }

    #[test]
    fn gray_threshold_is_128() {
        let g = GrayImage::from_raw(3, 1, vec![127, 128, 255]).unwrap();
        assert_eq!(Mask::from_gray8(&g).data(), &[0, 1, 1]);
    }

    #[test]
    fn blend_copies_background_verbatim() {
        let fg = RgbImage::filled(4, 4, [1.0, 1.0, 1.0]);
        let bg = ramp(4, 4);
        let mask = Mask::from_fn(4, 4, |x, _| x >= 2);
        let out = RgbImage::blend(&fg, &bg, &mask).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = if x >= 2 { 1.0 } else { bg.get(c, y, x) };
                    assert_eq!(out.get(c, y, x).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(5, 3);
        let t = img.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 3, 5]);
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn crop_and_flip() {
        let img = ramp(6, 4);
        let c = img.crop(1, 1, 3, 2).unwrap();
        assert_eq!(c.get(2, 1, 2), img.get(2, 2, 3));
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert!(img.crop(4, 0, 3, 1).is_err());
    }
}
