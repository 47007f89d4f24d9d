//! Image rasters, disk I/O, spatial gradients and the Retinex illumination
//! estimate `U = I / (O + eps)`.
//!
//! Images are channel-first `(C, H, W)` arrays of `f64` nominally in `[0, 1]`.
//! The forward-difference operator defined here is the same one the
//! illumination smoothness and gradient losses differentiate through, so the
//! statistic reported by [`avg_gradient`] is exactly what the gradient loss
//! drives toward its target.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};
use ndarray::{s, Array3, Axis, Ix3};
use serde::{Deserialize, Serialize};
use sllen_tensor::{kernels, Tensor};

use crate::{Error, Result};

/// Natural-image average gradient level used as the target of the gradient loss.
pub const NATURAL_AVG_GRADIENT: f64 = 0.051;

/// Default guard added to the denominator of the illumination division.
pub const RETINEX_EPS: f64 = 1e-4;

/// Minimum spatial side for images entering the network.
pub const MIN_NETWORK_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Rgb,
    Gray,
}

/// Channel-first raster with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
    color: ColorSpace,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>, color: ColorSpace) -> Result<Self> {
        let expected = match color {
            ColorSpace::Rgb => 3,
            ColorSpace::Gray => 1,
        };
        if data.shape()[0] != expected {
            return Err(Error::Shape(format!(
                "{color:?} image needs {expected} channels, got {}",
                data.shape()[0]
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("image contains non-finite values".into()));
        }
        Ok(Self { data, color })
    }

    /// Infers the colour space from the channel count (1 or 3).
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let color = match data.shape()[0] {
            1 => ColorSpace::Gray,
            3 => ColorSpace::Rgb,
            c => return Err(Error::Shape(format!("unsupported channel count {c}"))),
        };
        Self::new(data, color)
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_array(Array3::from_elem((channels, height, width), value))
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self> {
        Self::from_array(Array3::from_shape_fn((channels, height, width), f))
    }

    /// Extracts sample `n` of an `(N, C, H, W)` tensor.
    pub fn from_batch(batch: &Tensor, n: usize) -> Result<Self> {
        let b = batch
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::Shape(format!("expected (N,C,H,W), got {:?}", batch.shape())))?;
        Self::from_array(b.index_axis(Axis(0), n).to_owned())
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }

    /// Replicates a grayscale image to three channels; RGB is returned as is.
    pub fn to_rgb(&self) -> ImageTensor {
        match self.color {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Gray => {
                let g = self.data.index_axis(Axis(0), 0);
                let data = ndarray::stack(Axis(0), &[g, g, g]).expect("same shapes");
                ImageTensor {
                    data,
                    color: ColorSpace::Rgb,
                }
            }
        }
    }

    /// BT.601 luma for RGB; the single channel for grayscale.
    pub fn luma(&self) -> ndarray::Array2<f64> {
        match self.color {
            ColorSpace::Gray => self.data.index_axis(Axis(0), 0).to_owned(),
            ColorSpace::Rgb => {
                let d = &self.data;
                &d.index_axis(Axis(0), 0) * 0.299
                    + &d.index_axis(Axis(0), 1) * 0.587
                    + &d.index_axis(Axis(0), 2) * 0.114
            }
        }
    }

    /// `(1, C, H, W)` view of the image as a network batch.
    pub fn to_batch(&self) -> Tensor {
        self.data.clone().insert_axis(Axis(0)).into_dyn()
    }

    pub fn clamped(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
            color: self.color,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ImageTensor> {
        ImageTensor::new(self.data.mapv(f), self.color)
    }
}

/// Horizontal and vertical forward differences of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub gx: Array3<f64>,
    pub gy: Array3<f64>,
}

fn format_of(path: &Path) -> Option<ImageFormat> {
    match ImageFormat::from_path(path).ok()? {
        f @ (ImageFormat::Png | ImageFormat::Jpeg) => Some(f),
        _ => None,
    }
}

/// Loads an 8- or 16-bit PNG/JPEG as a channel-first tensor in `[0, 1]`.
///
/// Colour images become 3 channels and grayscale images 1; alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Decide by content, not extension.
    match image::guess_format(&bytes) {
        Ok(ImageFormat::Png | ImageFormat::Jpeg) => {}
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
    let reader = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::CorruptImage {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(from_dynamic(&img))
}

fn from_dynamic(img: &DynamicImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = !img.color().has_color();
    let sixteen = img.color().bytes_per_pixel() / img.color().channel_count() == 2;
    if gray {
        let data: Vec<f64> = if sixteen {
            img.to_luma16().into_raw().iter().map(|&v| v as f64 / 65535.0).collect()
        } else {
            img.to_luma8().into_raw().iter().map(|&v| v as f64 / 255.0).collect()
        };
        let data = Array3::from_shape_vec((1, h, w), data).expect("luma layout");
        return ImageTensor {
            data,
            color: ColorSpace::Gray,
        };
    }
    let hwc: Vec<f64> = if sixteen {
        img.to_rgb16().into_raw().iter().map(|&v| v as f64 / 65535.0).collect()
    } else {
        img.to_rgb8().into_raw().iter().map(|&v| v as f64 / 255.0).collect()
    };
    let hwc = Array3::from_shape_vec((h, w, 3), hwc).expect("rgb layout");
    ImageTensor {
        data: hwc.permuted_axes([2, 0, 1]).as_standard_layout().into_owned(),
        color: ColorSpace::Rgb,
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Clamps to `[0, 1]`, quantizes to 8 bits and writes PNG or JPEG by extension.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let format = format_of(path).ok_or_else(|| Error::UnsupportedFormat(path.to_path_buf()))?;
    let (h, w) = (img.height(), img.width());
    let dynamic = match img.color {
        ColorSpace::Gray => {
            let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
            DynamicImage::ImageLuma8(image::GrayImage::from_raw(w as u32, h as u32, raw).unwrap())
        }
        ColorSpace::Rgb => {
            let hwc = img.data.view().permuted_axes([1, 2, 0]);
            let raw: Vec<u8> = hwc.iter().map(|&v| quantize(v)).collect();
            DynamicImage::ImageRgb8(image::RgbImage::from_raw(w as u32, h as u32, raw).unwrap())
        }
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut buf, format)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    write_atomic(path, buf.get_ref())
}

/// Forward differences with replicate padding: `gx[c,h,w] = x[c,h,w+1] - x[c,h,w]`
/// and zero in the last column; `gy` likewise over rows.
pub fn spatial_gradients(img: &ImageTensor) -> Result<GradientField> {
    let [_, h, w] = img.shape();
    if h < 2 || w < 2 {
        return Err(Error::DegenerateShape(img.shape().to_vec()));
    }
    let x = img.data.clone().into_dyn();
    let gx = kernels::forward_diff(&x, 2).into_dimensionality::<Ix3>().unwrap();
    let gy = kernels::forward_diff(&x, 1).into_dimensionality::<Ix3>().unwrap();
    Ok(GradientField { gx, gy })
}

/// Per-channel mean over all pixels of `(|gx| + |gy|) / 2`.
pub fn avg_gradient(img: &ImageTensor) -> Result<Vec<f64>> {
    let GradientField { gx, gy } = spatial_gradients(img)?;
    Ok((0..img.channels())
        .map(|c| {
            let a = gx.index_axis(Axis(0), c);
            let b = gy.index_axis(Axis(0), c);
            let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x.abs() + y.abs()) / 2.0).sum();
            total / a.len() as f64
        })
        .collect())
}

/// Illumination estimate `U = low / (enhanced + eps)`, elementwise.
pub fn retinex_decompose(low: &ImageTensor, enhanced: &ImageTensor, eps: f64) -> Result<ImageTensor> {
    if low.shape() != enhanced.shape() {
        return Err(Error::ShapeMismatch(format!(
            "low {:?} vs enhanced {:?}",
            low.shape(),
            enhanced.shape()
        )));
    }
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::InvalidParam(format!("eps must be non-negative, got {eps}")));
    }
    let mut u = low.data.clone();
    ndarray::Zip::from(&mut u)
        .and(&enhanced.data)
        .for_each(|u, &o| *u /= o + eps);
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam(
            "illumination is not finite; use eps > 0 when the enhanced image has zeros".into(),
        ));
    }
    ImageTensor::new(u, low.color)
}

/// Ranges below one 8-bit level count as constant when rendering.
pub const PREVIEW_FLAT_RANGE: f64 = 1.0 / 255.0;

/// Channel-averaged, min-max normalized visualization of an illumination map.
/// A constant map (range under [`PREVIEW_FLAT_RANGE`]) renders as mid-gray.
pub fn illumination_preview(u: &ImageTensor) -> ImageTensor {
    let mean = u.data.mean_axis(Axis(0)).expect("at least one channel");
    let lo = mean.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = mean.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let range = hi - lo;
    let norm = if range >= PREVIEW_FLAT_RANGE {
        mean.mapv(|v| (v - lo) / range)
    } else {
        mean.mapv(|_| 0.5)
    };
    ImageTensor {
        data: norm.insert_axis(Axis(0)),
        color: ColorSpace::Gray,
    }
}

const UMAP_MAGIC: &[u8; 4] = b"UMAP";

/// Raw illumination dump: `"UMAP"`, u16 C, u16 H, u16 W, u16 reserved (all
/// little-endian), then `C*H*W` little-endian `f32` values in channel-first order.
pub fn encode_umap(u: &ImageTensor) -> Result<Vec<u8>> {
    let dims = u.shape();
    let mut out = Vec::with_capacity(12 + 4 * u.data.len());
    out.extend_from_slice(UMAP_MAGIC);
    for d in dims {
        let d = u16::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u16")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&0u16.to_le_bytes());
    for &v in u.data.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_umap(bytes: &[u8]) -> Result<Array3<f64>> {
    if bytes.len() < 12 || &bytes[..4] != UMAP_MAGIC {
        return Err(Error::InvalidParam("missing UMAP header".into()));
    }
    let dim = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let body = &bytes[12..];
    if body.len() != 4 * c * h * w {
        return Err(Error::InvalidParam(format!(
            "UMAP body has {} bytes, expected {}",
            body.len(),
            4 * c * h * w
        )));
    }
    let vals = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Array3::from_shape_vec((c, h, w), vals).unwrap())
}

/// Reflect-pads (mirror without repeating the edge) the spatial axes so both
/// sides become multiples of `multiple`.
pub fn reflect_pad_to_multiple(img: &ImageTensor, multiple: usize) -> (ImageTensor, usize, usize) {
    let [c, h, w] = img.shape();
    let ph = h.div_ceil(multiple).max(1) * multiple;
    let pw = w.div_ceil(multiple).max(1) * multiple;
    let mirror = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let k = i % period;
        if k < n {
            k
        } else {
            period - k
        }
    };
    let data = Array3::from_shape_fn((c, ph, pw), |(ch, y, x)| {
        img.data[[ch, mirror(y, h), mirror(x, w)]]
    });
    (
        ImageTensor {
            data,
            color: img.color,
        },
        h,
        w,
    )
}

pub fn crop(img: &ImageTensor, top: usize, left: usize, height: usize, width: usize) -> ImageTensor {
    ImageTensor {
        data: img
            .data
            .slice(s![.., top..top + height, left..left + width])
            .to_owned(),
        color: img.color,
    }
}
