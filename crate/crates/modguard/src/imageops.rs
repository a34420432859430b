//! Image decoding, resizing, cropping and the training-time augmentations.
//!
//! Every operation works on [`ImageTensor`]: RGB, row-major, intensities
//! normalized to `[0, 1]`. All functions here are pure; augmentations take an
//! explicit RNG so runs are reproducible from a seed.

use rand::Rng;
use thiserror::Error;

use crate::detector::BoundingBox;

/// Number of channels in every tensor (RGB).
pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to decode image: {0}")]
    Decode(String),
    #[error("failed to encode image: {0}")]
    Encode(String),
    #[error("invalid tensor dimensions: {height}x{width} with {len} values")]
    InvalidDimensions {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("intensity {value} at index {index} outside [0, 1]")]
    IntensityOutOfRange { index: usize, value: f32 },
    #[error("crop region has zero area after clamping")]
    EmptyCrop,
}

/// Decoded RGB pixel grid with channel intensities in `[0, 1]`.
///
/// Data is stored row-major as `(y, x, channel)`, so
/// `data[(y * width + x) * 3 + c]` is channel `c` of pixel `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(ImageError::InvalidDimensions {
                height,
                width,
                len: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(ImageError::IntensityOutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Constant-intensity image, handy for tests and padding checks.
    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self, ImageError> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        debug_assert!(y < self.height && x < self.width && c < CHANNELS);
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = value;
    }

    /// Mean intensity over all pixels and channels.
    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        sum / self.data.len() as f64
    }

    /// Canonical byte serialization: height and width as little-endian u32
    /// followed by the raw little-endian f32 intensities. Used for content
    /// digests so that recompressed copies of the same pixels hash alike.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn zeroed(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }
}

/// Records how a source image was scaled and padded into the detector square,
/// so detector-space boxes can be mapped back to source coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f32,
    pub pad_left: usize,
    pub pad_top: usize,
    pub content_width: usize,
    pub content_height: usize,
    pub target: usize,
    pub source_width: usize,
    pub source_height: usize,
}

impl LetterboxTransform {
    /// Maps a normalized box in letterboxed coordinates back to normalized
    /// source-image coordinates, clamped to the source frame.
    pub fn to_source_box(&self, b: &BoundingBox) -> BoundingBox {
        let t = self.target as f32;
        let map_x = |x: f32| (x * t - self.pad_left as f32) / self.scale / self.source_width as f32;
        let map_y = |y: f32| (y * t - self.pad_top as f32) / self.scale / self.source_height as f32;
        BoundingBox::new_clamped(map_x(b.xmin), map_y(b.ymin), map_x(b.xmax), map_y(b.ymax))
    }
}

/// Decodes a PNG or JPEG payload to a normalized RGB tensor.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor, ImageError> {
    let dynamic = image::load_from_memory(bytes).map_err(|e| ImageError::Decode(e.to_string()))?;
    let rgb = dynamic.to_rgb8();
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    ImageTensor::new(height, width, data)
}

/// Encodes a tensor as PNG. Intensities are mapped back to `[0, 255]` by
/// rounding, so `decode_image(encode_png(t))` reproduces `t` exactly whenever
/// `t` itself came from 8-bit data.
pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>, ImageError> {
    let mut raw = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        raw.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let buffer = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("raw buffer matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    buffer
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Aspect-preserving resize into a `target`x`target` square. The content is
/// scaled by `min(target/h, target/w)` with bilinear sampling and centered;
/// the remainder is padded with mid-gray 0.5.
pub fn resize_letterbox(img: &ImageTensor, target: usize) -> (ImageTensor, LetterboxTransform) {
    assert!(target > 0, "letterbox target must be positive");
    let scale = (target as f32 / img.height as f32).min(target as f32 / img.width as f32);
    let content_width = ((img.width as f32 * scale).round() as usize).clamp(1, target);
    let content_height = ((img.height as f32 * scale).round() as usize).clamp(1, target);
    let pad_left = (target - content_width) / 2;
    let pad_top = (target - content_height) / 2;

    let content = sample_axes(
        img,
        content_height,
        content_width,
        AxisFilter::Bilinear,
        AxisFilter::Bilinear,
    );

    let mut out = ImageTensor {
        height: target,
        width: target,
        data: vec![0.5; target * target * CHANNELS],
    };
    for y in 0..content_height {
        for x in 0..content_width {
            for c in 0..CHANNELS {
                out.set(y + pad_top, x + pad_left, c, content.get(y, x, c));
            }
        }
    }

    let transform = LetterboxTransform {
        scale,
        pad_left,
        pad_top,
        content_width,
        content_height,
        target,
        source_width: img.width,
        source_height: img.height,
    };
    (out, transform)
}

/// Resizes to a `target`x`target` square without preserving aspect ratio.
/// Axes that shrink are box-filtered (area averaging) so high-frequency
/// content is low-pass filtered; axes that grow use bilinear sampling.
pub fn resize_antialias(img: &ImageTensor, target: usize) -> ImageTensor {
    assert!(target > 0, "resize target must be positive");
    let horizontal = if img.width > target {
        AxisFilter::Area
    } else {
        AxisFilter::Bilinear
    };
    let vertical = if img.height > target {
        AxisFilter::Area
    } else {
        AxisFilter::Bilinear
    };
    sample_axes(img, target, target, vertical, horizontal)
}

#[derive(Clone, Copy, PartialEq)]
enum AxisFilter {
    Bilinear,
    Area,
}

/// Separable resampler: one horizontal pass then one vertical pass, each with
/// its own filter. Weights along an axis always sum to 1, so constant images
/// stay constant up to float rounding.
fn sample_axes(
    img: &ImageTensor,
    out_height: usize,
    out_width: usize,
    vertical: AxisFilter,
    horizontal: AxisFilter,
) -> ImageTensor {
    let h_taps = axis_taps(img.width, out_width, horizontal);
    let v_taps = axis_taps(img.height, out_height, vertical);

    // Horizontal pass into an intermediate buffer (f64 accumulation).
    let mut mid = vec![0.0f64; img.height * out_width * CHANNELS];
    for y in 0..img.height {
        for (x, taps) in h_taps.iter().enumerate() {
            for c in 0..CHANNELS {
                let mut acc = 0.0f64;
                for &(src, w) in taps {
                    acc += img.get(y, src, c) as f64 * w;
                }
                mid[(y * out_width + x) * CHANNELS + c] = acc;
            }
        }
    }

    let mut out = ImageTensor::zeroed(out_height, out_width);
    for (y, taps) in v_taps.iter().enumerate() {
        for x in 0..out_width {
            for c in 0..CHANNELS {
                let mut acc = 0.0f64;
                for &(src, w) in taps {
                    acc += mid[(src * out_width + x) * CHANNELS + c] * w;
                }
                out.set(y, x, c, acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Per-output-pixel source taps and weights for one axis.
fn axis_taps(src_len: usize, dst_len: usize, filter: AxisFilter) -> Vec<Vec<(usize, f64)>> {
    let ratio = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| match filter {
            AxisFilter::Bilinear => {
                let center = (d as f64 + 0.5) * ratio - 0.5;
                let floor = center.floor();
                let frac = center - floor;
                let i0 = (floor.max(0.0) as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                if i0 == i1 || frac <= 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            }
            AxisFilter::Area => {
                let start = d as f64 * ratio;
                let end = (d as f64 + 1.0) * ratio;
                let mut taps = Vec::new();
                let mut total = 0.0;
                let first = start.floor() as usize;
                let last = (end.ceil() as usize).min(src_len);
                for src in first..last {
                    let cover = (end.min(src as f64 + 1.0) - start.max(src as f64)).max(0.0);
                    if cover > 0.0 {
                        taps.push((src, cover));
                        total += cover;
                    }
                }
                for tap in &mut taps {
                    tap.1 /= total;
                }
                taps
            }
        })
        .collect()
}

/// Cuts out the region of `box_` expanded by `margin` (a fraction of the box
/// width/height applied per side) and clamped to the image bounds.
pub fn crop(img: &ImageTensor, box_: &BoundingBox, margin: f32) -> Result<ImageTensor, ImageError> {
    assert!(margin >= 0.0, "crop margin must be non-negative");
    let dx = margin * box_.width();
    let dy = margin * box_.height();
    let xmin = (box_.xmin - dx).max(0.0);
    let ymin = (box_.ymin - dy).max(0.0);
    let xmax = (box_.xmax + dx).min(1.0);
    let ymax = (box_.ymax + dy).min(1.0);

    let x0 = ((xmin * img.width as f32).round() as usize).min(img.width);
    let x1 = ((xmax * img.width as f32).round() as usize).min(img.width);
    let y0 = ((ymin * img.height as f32).round() as usize).min(img.height);
    let y1 = ((ymax * img.height as f32).round() as usize).min(img.height);
    if x1 <= x0 || y1 <= y0 {
        return Err(ImageError::EmptyCrop);
    }

    let mut out = ImageTensor::zeroed(y1 - y0, x1 - x0);
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..CHANNELS {
                out.set(y - y0, x - x0, c, img.get(y, x, c));
            }
        }
    }
    Ok(out)
}

/// Rotates the image about its center. Samples falling outside the frame
/// fill with mid-gray 0.5. Multiples of 90 degrees on square inputs (and 180
/// on any input) are exact pixel permutations.
pub fn rotate(img: &ImageTensor, degrees: f32) -> ImageTensor {
    let turns = degrees.rem_euclid(360.0);
    if turns == 0.0 {
        return img.clone();
    }
    if turns == 180.0 {
        let mut out = ImageTensor::zeroed(img.height, img.width);
        for y in 0..img.height {
            for x in 0..img.width {
                for c in 0..CHANNELS {
                    out.set(y, x, c, img.get(img.height - 1 - y, img.width - 1 - x, c));
                }
            }
        }
        return out;
    }
    if (turns == 90.0 || turns == 270.0) && img.height == img.width {
        let n = img.height;
        let mut out = ImageTensor::zeroed(n, n);
        for y in 0..n {
            for x in 0..n {
                for c in 0..CHANNELS {
                    let v = if turns == 90.0 {
                        img.get(n - 1 - x, y, c)
                    } else {
                        img.get(x, n - 1 - y, c)
                    };
                    out.set(y, x, c, v);
                }
            }
        }
        return out;
    }

    let theta = (turns as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = ImageTensor::zeroed(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + dx * cos + dy * sin;
            let sy = cy - dx * sin + dy * cos;
            for c in 0..CHANNELS {
                out.set(y, x, c, bilinear_sample(img, sy, sx, c));
            }
        }
    }
    out
}

/// Bilinear sample at fractional coordinates; out-of-frame taps read 0.5.
fn bilinear_sample(img: &ImageTensor, y: f64, x: f64, c: usize) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let tap = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= img.height as f64 || xx >= img.width as f64 {
            0.5
        } else {
            img.get(yy as usize, xx as usize, c) as f64
        }
    };
    let v = tap(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + tap(y0, x0 + 1.0) * fx * (1.0 - fy)
        + tap(y0 + 1.0, x0) * (1.0 - fx) * fy
        + tap(y0 + 1.0, x0 + 1.0) * fx * fy;
    v.clamp(0.0, 1.0) as f32
}

/// Separable Gaussian convolution with kernel radius `ceil(3*sigma)`, weights
/// normalized to sum 1 and clamp-to-edge boundary handling. `sigma == 0` is
/// the identity.
pub fn gaussian_blur(img: &ImageTensor, sigma: f32) -> ImageTensor {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma as f64);
    let radius = kernel.len() / 2;

    // Horizontal pass.
    let mut mid = vec![0.0f64; img.height * img.width * CHANNELS];
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - radius as isize)
                        .clamp(0, img.width as isize - 1) as usize;
                    acc += img.get(y, sx, c) as f64 * w;
                }
                mid[(y * img.width + x) * CHANNELS + c] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = ImageTensor::zeroed(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - radius as isize)
                        .clamp(0, img.height as isize - 1) as usize;
                    acc += mid[(sy * img.width + x) * CHANNELS + c] * w;
                }
                out.set(y, x, c, acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Discrete Gaussian weights for radius `ceil(3*sigma)`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= total;
    }
    kernel
}

/// Crop with an RNG-chosen box whose area fraction lies in `[0.6, 1.0]`.
/// The box is square-shrunk (both sides scaled by the square root of the
/// area fraction) and placed uniformly at random inside the frame.
pub fn random_crop<R: Rng>(img: &ImageTensor, rng: &mut R) -> ImageTensor {
    let area: f32 = rng.gen_range(0.6..=1.0);
    let side = area.sqrt();
    let x0 = rng.gen_range(0.0..=(1.0 - side));
    let y0 = rng.gen_range(0.0..=(1.0 - side));
    let box_ = BoundingBox::new_clamped(x0, y0, x0 + side, y0 + side);
    // Area fraction >= 0.6 of a non-empty image can never clamp to zero area.
    crop(img, &box_, 0.0).expect("random crop region is non-empty")
}
