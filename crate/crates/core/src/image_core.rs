//! Grayscale rasters, file I/O and the smoothing + contrast-stretch
//! preprocessing applied before detection.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat as CodecFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::convolve::convolve_single;
use crate::error::{Error, Result};
use crate::scale_space::gaussian_kernel;

/// Saturated pixel fraction used by the default preprocessing (split over both tails).
pub const DEFAULT_SATURATION: f64 = 0.0035;
/// Gaussian smoothing scale used by the default preprocessing.
pub const DEFAULT_SMOOTH_SIGMA: f64 = 1.0;

const RAW_HEADER_LEN: usize = 8;
const SMOOTH_TRUNCATE: f64 = 5.0;

/// Dense row-major grayscale raster.
///
/// Values are always finite. Construction validates both the length and the
/// finiteness of `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite value at index {i}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Pixelwise map; the result is revalidated for finiteness.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// On-disk / on-wire encodings understood by [`decode_image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Tiff,
    /// Little-endian `u32 width, u32 height` followed by `width*height` `f32`, row-major.
    Raw,
}

impl ImageFormat {
    /// Identifies PNG and TIFF by magic bytes, everything else is treated as raw.
    pub fn sniff(bytes: &[u8]) -> Self {
        if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            ImageFormat::Png
        } else if bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*") {
            ImageFormat::Tiff
        } else {
            ImageFormat::Raw
        }
    }

    pub fn from_extension(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(ImageFormat::Png),
            "tif" | "tiff" => Some(ImageFormat::Tiff),
            "raw" | "f32" | "bin" => Some(ImageFormat::Raw),
            _ => None,
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    decode_image_as(bytes, ImageFormat::sniff(bytes))
}

pub fn decode_image_as(bytes: &[u8], format: ImageFormat) -> Result<Image> {
    match format {
        ImageFormat::Raw => decode_raw(bytes),
        ImageFormat::Png => decode_codec(bytes, CodecFormat::Png),
        ImageFormat::Tiff => decode_codec(bytes, CodecFormat::Tiff),
    }
}

fn decode_codec(bytes: &[u8], format: CodecFormat) -> Result<Image> {
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedFormat(u.to_string()),
        other => Error::Decode(other.to_string()),
    })?;
    let color = decoded.color();
    if color.channel_count() != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "expected a single-channel grayscale image, found {color:?}"
        )));
    }
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f32> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| (v as f64 / 65535.0) as f32)
            .collect(),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "unsupported bit depth ({:?})",
                other.color()
            )))
        }
    };
    Image::new(width, height, data)
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err(Error::Decode("raw image shorter than its 8-byte header".into()));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(RAW_HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(Error::Decode(format!(
            "raw payload of {} bytes does not match header {width}x{height}",
            bytes.len()
        )));
    }
    let data = bytes[RAW_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(width, height, data)
}

pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 4 * img.len());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn to_u16_buffer(img: &Image) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let pixels = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    ImageBuffer::from_raw(img.width as u32, img.height as u32, pixels).expect("buffer length matches shape")
}

/// Encodes as 16-bit grayscale; values are clamped to [0,1] and scaled by 65535.
pub fn encode_png16(img: &Image) -> Result<Vec<u8>> {
    encode_codec16(img, CodecFormat::Png)
}

pub fn encode_tiff16(img: &Image) -> Result<Vec<u8>> {
    encode_codec16(img, CodecFormat::Tiff)
}

fn encode_codec16(img: &Image, format: CodecFormat) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_u16_buffer(img)
        .write_to(&mut out, format)
        .map_err(|e| Error::Decode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Writes `img` in the format implied by the file extension: `.png` and
/// `.tif`/`.tiff` as 16-bit grayscale, `.raw` as the f32 raw layout.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_extension(path)
        .ok_or_else(|| Error::UnsupportedFormat(format!("cannot infer an output format from {}", path.display())))?;
    let bytes = match format {
        ImageFormat::Png => encode_png16(img)?,
        ImageFormat::Tiff => encode_tiff16(img)?,
        ImageFormat::Raw => encode_raw(img),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Nearest-rank quantile of an unsorted slice. `q` in [0,1].
pub(crate) fn nearest_rank_index(n: usize, q: f64) -> usize {
    let rank = (q * n as f64 - 1e-9).ceil().max(1.0) as usize;
    rank.min(n) - 1
}

/// Linear rescale between the low and high saturation quantiles, clamped to [0,1].
///
/// `saturation` is the total clipped fraction, split evenly between the two tails.
/// A degenerate image (`hi == lo`) maps to all zeros.
pub fn contrast_stretch(img: &Image, saturation: f64) -> Result<Image> {
    if !(0.0..0.5).contains(&saturation) {
        return Err(Error::param(format!(
            "saturation must be in [0, 0.5), got {saturation}"
        )));
    }
    let n = img.len();
    let mut scratch = img.data.clone();
    let lo_idx = nearest_rank_index(n, saturation / 2.0);
    let hi_idx = nearest_rank_index(n, 1.0 - saturation / 2.0);
    let (_, &mut hi, _) = scratch.select_nth_unstable_by(hi_idx, f32::total_cmp);
    // lo_idx <= hi_idx, so the lower partition still holds the low quantile
    let (_, &mut lo, _) = scratch[..=hi_idx].select_nth_unstable_by(lo_idx, f32::total_cmp);
    if hi <= lo {
        return Image::zeros(img.width, img.height);
    }
    let (lo, span) = (lo as f64, (hi - lo) as f64);
    img.map(|v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32)
}

/// Gaussian smoothing with reflect boundaries. `sigma == 0` returns a copy.
pub fn gaussian_smooth(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("smoothing sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let (kernel, radius) = gaussian_kernel(sigma, SMOOTH_TRUNCATE);
    let data = convolve_single(img, &kernel, radius)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Image::new(img.width, img.height, data)
}

/// Smoothing followed by saturation-bounded contrast stretch. Output lies in [0,1].
pub fn preprocess(img: &Image, smooth_sigma: f64, saturation: f64) -> Result<Image> {
    let smoothed = gaussian_smooth(img, smooth_sigma)?;
    contrast_stretch(&smoothed, saturation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Image {
        Image::new(n, 1, (0..n).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Image::new(0, 3, vec![]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, vec![f32::NAN]).is_err());
        assert!(Image::new(1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn constant_image_stretches_to_zero() {
        let img = Image::filled(7, 5, 0.3).unwrap();
        for s in [0.0, 0.0035, 0.2] {
            assert!(contrast_stretch(&img, s).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_stretch_at_zero_saturation() {
        let out = contrast_stretch(&ramp(1000), 0.0).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[999], 1.0);
        for (i, &v) in out.data().iter().enumerate() {
            assert!((v as f64 - i as f64 / 999.0).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_stretch_matches_sort_oracle() {
        let n = 10_000;
        // shuffled so the selection path actually has to work
        let data: Vec<f32> = (0..n).map(|i| ((i * 7919) % n) as f32).collect();
        let img = Image::new(100, 100, data.clone()).unwrap();
        let s = 0.0035;

        let mut sorted = data.clone();
        sorted.sort_by(f32::total_cmp);
        let rank = |q: f64| ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n) - 1;
        let lo = sorted[rank(0.00175)];
        let hi = sorted[rank(0.99825)];
        assert_eq!((lo, hi), (17.0, 9982.0));

        let out = contrast_stretch(&img, s).unwrap();
        for (&v, &o) in data.iter().zip(out.data()) {
            let expect = ((v - lo) as f64 / (hi - lo) as f64).clamp(0.0, 1.0) as f32;
            assert_eq!(o, expect);
            if v < lo {
                assert_eq!(o, 0.0);
            }
            if v > hi {
                assert_eq!(o, 1.0);
            }
        }
    }

    #[test]
    fn saturation_out_of_range_is_rejected() {
        assert!(contrast_stretch(&ramp(4), 0.5).is_err());
        assert!(contrast_stretch(&ramp(4), -0.1).is_err());
    }

    #[test]
    fn preprocess_without_smoothing_keeps_unit_range_image() {
        let img = Image::from_fn(16, 16, |x, y| ((x + y) as f32) / 30.0).unwrap();
        let out = preprocess(&img, 0.0, 0.0).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothing_an_impulse_conserves_mass() {
        let mut data = vec![0.0f32; 31 * 31];
        data[15 * 31 + 15] = 1.0;
        let img = Image::new(31, 31, data).unwrap();
        let out = gaussian_smooth(&img, 1.0).unwrap();
        assert!(out.get(15, 15) < 1.0);
        assert!(out.get(16, 15) > 0.0);
        assert!((out.sum() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn preprocess_is_the_composition_of_its_stages() {
        let img = Image::from_fn(40, 30, |x, y| {
            let (dx, dy) = (x as f32 - 20.0, y as f32 - 12.0);
            (-(dx * dx + dy * dy) / 40.0).exp() + 0.01 * ((x * 31 + y * 17) % 7) as f32
        })
        .unwrap();
        let composed = contrast_stretch(&gaussian_smooth(&img, 1.0).unwrap(), 0.0035).unwrap();
        assert_eq!(preprocess(&img, 1.0, 0.0035).unwrap(), composed);
    }

    #[test]
    fn raw_roundtrip_and_truncated_payload() {
        let img = Image::from_fn(3, 2, |x, y| x as f32 * 0.5 - y as f32).unwrap();
        let bytes = encode_raw(&img);
        assert_eq!(decode_image(&bytes).unwrap(), img);
        assert!(decode_raw(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_raw(&bytes[..4]).is_err());
    }

    #[test]
    fn format_sniffing() {
        assert_eq!(ImageFormat::sniff(b"\x89PNG\r\n\x1a\nxxxx"), ImageFormat::Png);
        assert_eq!(ImageFormat::sniff(b"II*\0...."), ImageFormat::Tiff);
        assert_eq!(ImageFormat::sniff(b"MM\0*...."), ImageFormat::Tiff);
        assert_eq!(ImageFormat::sniff(&[2, 0, 0, 0]), ImageFormat::Raw);
    }
}
