//! Floating-point images in `[0, 1]`, with PNG and binary PNM I/O.

use std::path::Path;

use thiserror::Error;

use crate::io::{read_file, write_file, FormatError, Pnm};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image shape {width}x{height}x{channels}")]
    Shape {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("expected {expected} samples, found {found}")]
    Length { expected: usize, found: usize },
    #[error("sample {index} = {value} is outside [0, 1]")]
    Range { index: usize, value: f64 },
    #[error("image dimensions differ: {0}x{1}x{2} vs {3}x{4}x{5}")]
    Mismatch(usize, usize, usize, usize, usize, usize),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self, ImageError> {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        check_shape(width, height, channels)?;
        Self::from_vec(width, height, channels, vec![value; width * height * channels])
    }

    /// Row-major, channel-interleaved samples.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_shape(width, height, channels)?;
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::Length {
                expected,
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::Range { index, value });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds from samples, clamping each into `[0, 1]`.
    pub fn from_vec_clamped(
        width: usize,
        height: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::from_vec(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.width == other.width && self.height == other.height && self.channels == other.channels {
            Ok(())
        } else {
            Err(ImageError::Mismatch(
                self.width,
                self.height,
                self.channels,
                other.width,
                other.height,
                other.channels,
            ))
        }
    }

    /// Separate planes, one `Vec` per channel.
    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels)
            .map(|c| self.data.iter().skip(c).step_by(self.channels).copied().collect())
            .collect()
    }

    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Self, ImageError> {
        let channels = planes.len();
        check_shape(width, height, channels)?;
        let mut data = vec![0.0; width * height * channels];
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != width * height {
                return Err(ImageError::Length {
                    expected: width * height,
                    found: plane.len(),
                });
            }
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = *v;
            }
        }
        Self::from_vec(width, height, channels, data)
    }

    /// Per-pixel luminance `0.299R + 0.587G + 0.114B` (identity for gray).
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(self.channels)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    /// 8-bit samples, `round(255·v)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::from_vec(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Loads `.png`, `.ppm` or `.pgm`. Alpha is dropped; gray stays single-channel.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("png") => {
                let bytes = read_file(path)?;
                let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                    .map_err(|e| FormatError::Codec(e.to_string()))?;
                let (w, h) = (decoded.width() as usize, decoded.height() as usize);
                if decoded.color().has_color() {
                    Self::from_u8(w, h, 3, decoded.to_rgb8().as_raw())
                } else {
                    Self::from_u8(w, h, 1, decoded.to_luma8().as_raw())
                }
            }
            Some("ppm") | Some("pgm") => {
                let pnm = Pnm::load(path)?;
                let scale = pnm.maxval as f64;
                Self::from_vec(
                    pnm.width,
                    pnm.height,
                    pnm.channels,
                    pnm.samples.iter().map(|&s| s as f64 / scale).collect(),
                )
            }
            _ => Err(FormatError::Extension(path.display().to_string()).into()),
        }
    }

    /// Saves as 8-bit `.png`, `.ppm` or `.pgm`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("png") => {
                let color = if self.channels == 1 {
                    image::ExtendedColorType::L8
                } else {
                    image::ExtendedColorType::Rgb8
                };
                let mut out = Vec::new();
                let encoder = image::codecs::png::PngEncoder::new(&mut out);
                image::ImageEncoder::write_image(encoder, &self.to_u8(), self.width as u32, self.height as u32, color)
                    .map_err(|e| FormatError::Codec(e.to_string()))?;
                write_file(path, &out)?;
                Ok(())
            }
            Some("ppm") | Some("pgm") => {
                let pnm = Pnm {
                    width: self.width,
                    height: self.height,
                    channels: self.channels,
                    maxval: 255,
                    samples: self.to_u8().into_iter().map(u16::from).collect(),
                };
                pnm.save(path)?;
                Ok(())
            }
            _ => Err(FormatError::Extension(path.display().to_string()).into()),
        }
    }
}

fn check_shape(width: usize, height: usize, channels: usize) -> Result<(), ImageError> {
    if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
        Err(ImageError::Shape {
            width,
            height,
            channels,
        })
    } else {
        Ok(())
    }
}

pub(crate) fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}
