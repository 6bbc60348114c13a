//! Radiograph preprocessing: photometric inversion, centred square crop,
//! bilinear resize to the model resolution and per-image standardization.
//!
//! Standardization divides by the standard deviation by default.
//! [`NormalizeMode::Variance`] divides by the variance instead. Statistics are
//! per image and computed after resizing.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the square model input.
pub const MODEL_SIZE: usize = 299;

const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Photometric {
    /// Minimum value displays as white; needs inversion.
    Monochrome1,
    Monochrome2,
}

impl Photometric {
    pub fn as_str(self) -> &'static str {
        match self {
            Photometric::Monochrome1 => "MONOCHROME1",
            Photometric::Monochrome2 => "MONOCHROME2",
        }
    }
}

impl FromStr for Photometric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MONOCHROME1" => Ok(Photometric::Monochrome1),
            "MONOCHROME2" => Ok(Photometric::Monochrome2),
            other => Err(Error::invalid(format!(
                "unknown photometric interpretation `{other}`"
            ))),
        }
    }
}

/// Grayscale raster as stored on disk, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    bit_depth: u8,
    photometric: Photometric,
    pixels: Vec<u16>,
}

impl RawImage {
    pub fn new(
        width: usize,
        height: usize,
        bit_depth: u8,
        photometric: Photometric,
        pixels: Vec<u16>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image must be at least 1x1"));
        }
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::invalid(format!("unsupported bit depth {bit_depth}")));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        let max = max_value(bit_depth);
        if let Some(p) = pixels.iter().find(|p| **p > max) {
            return Err(Error::invalid(format!(
                "pixel value {p} exceeds {bit_depth}-bit range"
            )));
        }
        Ok(RawImage {
            width,
            height,
            bit_depth,
            photometric,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn photometric(&self) -> Photometric {
        self.photometric
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    pub fn max_value(&self) -> u16 {
        max_value(self.bit_depth)
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            f64::from(self.pixels[y * self.width + x])
        })
    }

    /// Reads an 8- or 16-bit grayscale PNG. Twelve-bit data stored in 16-bit
    /// containers is treated as 16-bit.
    pub fn load_png(path: impl AsRef<Path>, photometric: Photometric) -> Result<Self> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            DynamicImage::ImageLuma8(buf) => RawImage::new(
                w,
                h,
                8,
                photometric,
                buf.into_raw().into_iter().map(u16::from).collect(),
            ),
            DynamicImage::ImageLuma16(buf) => RawImage::new(w, h, 16, photometric, buf.into_raw()),
            other => Err(Error::invalid(format!(
                "{}: expected a grayscale image, found {:?}",
                path.display(),
                other.color()
            ))),
        }
    }

    /// Writes an 8-bit PNG for depths up to 8, otherwise 16-bit.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let result = if self.bit_depth <= 8 {
            let data = self.pixels.iter().map(|p| *p as u8).collect();
            ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w, h, data)
                .expect("buffer size matches dimensions")
                .save(path.as_ref())
        } else {
            ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, self.pixels.clone())
                .expect("buffer size matches dimensions")
                .save(path.as_ref())
        };
        result.map_err(|e| Error::invalid(format!("{}: {e}", path.as_ref().display())))
    }
}

fn max_value(bit_depth: u8) -> u16 {
    ((1u32 << bit_depth) - 1) as u16
}

/// Standardized model input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pixels: Array2<f32>,
}

impl ModelInput {
    pub fn from_array(pixels: Array2<f32>) -> Self {
        ModelInput { pixels }
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn into_array(self) -> Array2<f32> {
        self.pixels
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    #[default]
    StdDev,
    /// Literal reading: subtract the mean, divide by the variance.
    Variance,
}

/// Maps MONOCHROME1 pixels `p` to `max - p`; MONOCHROME2 passes through.
pub fn invert_if_needed(img: RawImage) -> RawImage {
    match img.photometric {
        Photometric::Monochrome2 => img,
        Photometric::Monochrome1 => {
            let max = img.max_value();
            RawImage {
                pixels: img.pixels.iter().map(|p| max - p).collect(),
                photometric: Photometric::Monochrome2,
                ..img
            }
        }
    }
}

/// Centred `s x s` crop with `s = min(width, height)`; odd slack is split with
/// the smaller half before the window.
pub fn center_square_crop(img: RawImage) -> RawImage {
    let s = img.width.min(img.height);
    if img.width == s && img.height == s {
        return img;
    }
    let x0 = (img.width - s) / 2;
    let y0 = (img.height - s) / 2;
    let mut pixels = Vec::with_capacity(s * s);
    for y in y0..y0 + s {
        let row = y * img.width;
        pixels.extend_from_slice(&img.pixels[row + x0..row + x0 + s]);
    }
    RawImage {
        width: s,
        height: s,
        pixels,
        ..img
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let ys = sample_positions(in_h, out_h);
    let xs = sample_positions(in_w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn sample_positions(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resizes a square image to `MODEL_SIZE x MODEL_SIZE`.
pub fn resize_to_model(img: &RawImage) -> Result<Array2<f64>> {
    if img.width != img.height {
        return Err(Error::DimensionMismatch(format!(
            "resize expects a square image, got {}x{}",
            img.width, img.height
        )));
    }
    Ok(resize_bilinear(img.to_array().view(), MODEL_SIZE, MODEL_SIZE))
}

/// `(x - mean) / max(std, eps)`; constant inputs map to all zeros.
pub fn normalize(arr: ArrayView2<'_, f64>) -> ModelInput {
    normalize_with(arr, NormalizeMode::StdDev)
}

pub fn normalize_with(arr: ArrayView2<'_, f64>, mode: NormalizeMode) -> ModelInput {
    let n = arr.len().max(1) as f64;
    let mean = arr.sum() / n;
    let var = arr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_EPS {
        return ModelInput::from_array(Array2::zeros(arr.dim()));
    }
    let scale = match mode {
        NormalizeMode::StdDev => std,
        NormalizeMode::Variance => var.max(STD_EPS),
    };
    ModelInput::from_array(arr.mapv(|v| ((v - mean) / scale) as f32))
}

/// invert -> crop -> resize -> normalize.
pub fn preprocess(img: RawImage) -> ModelInput {
    preprocess_with(img, NormalizeMode::StdDev)
}

pub fn preprocess_with(img: RawImage, mode: NormalizeMode) -> ModelInput {
    let img = center_square_crop(invert_if_needed(img));
    let resized = resize_to_model(&img).expect("crop output is square");
    normalize_with(resized.view(), mode)
}

const CACHE_MAGIC: &[u8; 4] = b"TXNI";

/// On-disk cache of preprocessed inputs, one file per image id.
#[derive(Debug, Clone)]
pub struct InputCache {
    dir: PathBuf,
}

impl InputCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(InputCache { dir })
    }

    fn path_for(&self, image_id: &str) -> PathBuf {
        let safe: String = image_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        self.dir.join(format!("{safe}.bin"))
    }

    pub fn store(&self, image_id: &str, input: &ModelInput) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(self.path_for(image_id))?);
        f.write_all(CACHE_MAGIC)?;
        f.write_all(&(input.height() as u32).to_le_bytes())?;
        f.write_all(&(input.width() as u32).to_le_bytes())?;
        for v in input.pixels.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(&self, image_id: &str) -> Result<Option<ModelInput>> {
        let path = self.path_for(image_id);
        if !path.exists() {
            return Ok(None);
        }
        let mut bytes = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let corrupt = || Error::Image {
            image_id: image_id.to_string(),
            message: format!("corrupt cache entry {}", path.display()),
        };
        if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
            return Err(corrupt());
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * h * w {
            return Err(corrupt());
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Some(ModelInput::from_array(
            Array2::from_shape_vec((h, w), data).map_err(|_| corrupt())?,
        )))
    }
}
