//! Floating-point RGB images in `[0, 1]`.
//!
//! [`ImageRgb`] is the currency passed between every stage of the pipeline.
//! Pixels are stored row-major with interleaved channels. 8-bit files are
//! mapped to floats by dividing by 255 on load and multiplying by 255 with
//! round-half-up on save.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights.
pub const BT601: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageRgb {
    /// Builds an image from interleaved RGB data, rejecting values outside `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image, clamping every value into `[0, 1]`. NaN becomes 0.
    pub fn from_vec_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = clamp01(*v);
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        check_dims(height, width)?;
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    /// Evaluates `f(y, x, c)` for every sample; results are clamped.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(clamp01(f(y, x, c)));
                }
            }
        }
        Self::new(height, width, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Applies `f` to every sample, clamping the result.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let data = self.data.iter().map(|&v| clamp01(f(v))).collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Combines two equally sized images sample by sample, clamping the result.
    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| clamp01(f(a, b)))
            .collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn ensure_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Reassembles an image from three row-major planes; values are clamped.
    pub fn from_channels(height: usize, width: usize, planes: [&[f64]; 3]) -> Result<Self> {
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::Shape("channel plane length mismatch".into()));
        }
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            for p in &planes {
                data.push(clamp01(p[i]));
            }
        }
        Self::new(height, width, data)
    }

    /// BT.601 luma plane.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| BT601[0] * p[0] + BT601[1] * p[1] + BT601[2] * p[2])
            .collect()
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        check_dims(height, width)?;
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for &(x0, x1, fx) in &xs {
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    data.push(clamp01(top * (1.0 - fy) + bot * fy));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        if top + height > self.height || left + width > self.width {
            return Err(Error::Size(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Self::new(height, width, data)
    }

    /// Rotates counter-clockwise by `quarter_turns` × 90°.
    pub fn rotate90(&self, quarter_turns: u8) -> Self {
        let mut img = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (h, w) = img.dims();
            let mut data = Vec::with_capacity(img.data.len());
            for y in 0..w {
                for x in 0..h {
                    let (sy, sx) = (x, w - 1 - y);
                    let i = (sy * w + sx) * 3;
                    data.extend_from_slice(&img.data[i..i + 3]);
                }
            }
            img = Self {
                height: w,
                width: h,
                data,
            };
        }
        img
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// `(1, 3, H, W)` tensor in the requested float dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.dims();
        let mut planar: Vec<f64> = Vec::with_capacity(self.data.len());
        for c in 0..3 {
            planar.extend(self.data.iter().skip(c).step_by(3).copied());
        }
        Ok(Tensor::from_vec(planar, (1, 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Reads a `(1, 3, H, W)` or `(3, H, W)` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => {
                if t.dim(0)? != 1 {
                    return Err(Error::Shape(format!("expected batch of 1, got {:?}", t.dims())));
                }
                t.squeeze(0)?
            }
            3 => t.clone(),
            _ => return Err(Error::Shape(format!("expected CHW tensor, got {:?}", t.dims()))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let planar: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        if planar.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor contains NaN or Inf".into()));
        }
        let n = h * w;
        Self::from_channels(h, w, [&planar[..n], &planar[n..2 * n], &planar[2 * n..]])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| quantize_u8(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer length matches dimensions")
    }

    /// Writes PNG or JPEG depending on the extension. The file is written to a
    /// temporary sibling first and renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let format = image::ImageFormat::from_path(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        crate::io::ensure_parent(path)?;
        let tmp = crate::io::temp_sibling(path);
        self.to_rgb8()
            .save_with_format(&tmp, format)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("empty image {height}x{width}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `[0,1]` to 8 bits, rounding half up.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor().min(255.0) as u8
}
