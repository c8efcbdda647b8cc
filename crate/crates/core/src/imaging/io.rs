//! Image and file I/O. Every writer goes through [`atomic_write`] so a crash
//! never leaves a half-written artifact behind.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "path has no file name"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode_png(img: DynamicImage, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a PNG/TIFF/JPEG page as 8-bit gray; colour input is reduced to luma.
pub fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).map_err(|e| Error::format(path, e))
}

pub fn gray_png_bytes(gray: &Array2<u8>, path: &Path) -> Result<Vec<u8>> {
    let (h, w) = gray.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, gray.iter().copied().collect())
            .ok_or_else(|| Error::format(path, "buffer size mismatch"))?;
    encode_png(DynamicImage::ImageLuma8(buf), path)
}

pub fn write_gray_png(path: &Path, gray: &Array2<u8>) -> Result<()> {
    atomic_write(path, &gray_png_bytes(gray, path)?)
}

/// Foreground mask as 8-bit PNG: 255 = foreground, 0 = background.
pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    write_gray_png(path, &mask.mapv(|v| if v { 255 } else { 0 }))
}

pub fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    Ok(read_gray(path)?.mapv(|v| v >= 128))
}

/// Line labels as 16-bit single-channel PNG (0 = background).
pub fn write_labels_png(path: &Path, labels: &Array2<u16>) -> Result<()> {
    let (h, w) = labels.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, labels.iter().copied().collect())
            .ok_or_else(|| Error::format(path, "buffer size mismatch"))?;
    atomic_write(path, &encode_png(DynamicImage::ImageLuma16(buf), path)?)
}

pub fn read_labels_png(path: &Path) -> Result<Array2<u16>> {
    let img = match open(path)? {
        DynamicImage::ImageLuma16(b) => b,
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            ImageBuffer::from_raw(w, h, b.into_raw().into_iter().map(u16::from).collect())
                .ok_or_else(|| Error::format(path, "buffer size mismatch"))?
        }
        _ => return Err(Error::format(path, "label maps must be single-channel")),
    };
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).map_err(|e| Error::format(path, e))
}

/// Write an (h, w, 3) array as an RGB PNG.
pub fn write_rgb_png(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, rgb.iter().copied().collect())
            .ok_or_else(|| Error::format(path, "buffer size mismatch"))?;
    atomic_write(path, &encode_png(DynamicImage::ImageRgb8(buf), path)?)
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<u8>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).map_err(|e| Error::format(path, e))
}
