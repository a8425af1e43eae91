//! PNG images and binary occlusion masks.

use std::path::Path;

use image::{ColorType, ExtendedColorType, ImageFormat};
use oasic_core::{Image, OcclusionMask};

use crate::error::{Error, Result};
use crate::formats::binary::read_file;

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_file(path)?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: u.to_string(),
        },
        other => Error::CorruptImage {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Reads an 8-bit RGB or grayscale PNG; grayscale is promoted to RGB and an
/// alpha channel is dropped.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let unsupported = |reason: String| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason,
    };
    let image = match img.color() {
        ColorType::Rgb8 => Image::from_raw(w, h, img.as_bytes())?,
        ColorType::Rgba8 => Image::from_raw(w, h, img.to_rgb8().as_raw())?,
        ColorType::L8 => Image::from_gray(w, h, img.as_bytes())?,
        ColorType::La8 => Image::from_gray(w, h, img.to_luma8().as_raw())?,
        other => return Err(unsupported(format!("{other:?} is not 8-bit RGB or grayscale"))),
    };
    Ok(image)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &image.to_raw(),
        image.width() as u32,
        image.height() as u32,
        ExtendedColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a mask as 8-bit grayscale, occluded pixels 255.
pub fn write_mask(path: &Path, mask: &OcclusionMask) -> Result<()> {
    let raw: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::save_buffer_with_format(
        path,
        &raw,
        mask.width() as u32,
        mask.height() as u32,
        ExtendedColorType::L8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8-bit grayscale mask; values `>= 128` are occluded.
pub fn read_mask(path: &Path) -> Result<OcclusionMask> {
    let img = decode(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: format!("mask must be 8-bit grayscale, got {:?}", img.color()),
        });
    }
    let bits = img.as_bytes().iter().map(|&v| v >= 128).collect();
    Ok(OcclusionMask::new(img.width() as usize, img.height() as usize, bits)?)
}
