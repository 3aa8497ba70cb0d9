//! Float RGB images and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `H × W × 3` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image buffer size");
        Image { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image::new(width, height, vec![value; width * height * 3])
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Round-trip through 8-bit quantization.
    pub fn quantized(&self) -> Image {
        Image::new(
            self.width,
            self.height,
            self.data.iter().map(|v| to_u8(*v) as f32 / 255.0).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        ::image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            ::image::ColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = ::image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Image::new(
            w as usize,
            h as usize,
            img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        ))
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel 8-bit mask in `[0, 1]`.
pub fn save_mask_png(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|v| to_u8(*v)).collect();
    ::image::save_buffer(path, &bytes, width as u32, height as u32, ::image::ColorType::L8).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = ::image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
    ))
}
