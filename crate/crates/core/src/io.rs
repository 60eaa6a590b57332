//! PNG and raw float image files.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Png {
        path: String,
        source: ::image::ImageError,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.display().to_string(),
        source,
    }
}

/// Writes an 8-bit PNG; values are clamped to `[0, 1]`.
pub fn write_png(img: &Image, path: &Path) -> Result<(), IoError> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match img.channels {
        1 => ::image::ExtendedColorType::L8,
        3 => ::image::ExtendedColorType::Rgb8,
        4 => ::image::ExtendedColorType::Rgba8,
        c => {
            return Err(IoError::Format {
                path: path.display().to_string(),
                msg: format!("cannot write {c}-channel PNG"),
            })
        }
    };
    ::image::save_buffer(path, &bytes, img.width as u32, img.height as u32, color).map_err(|source| {
        IoError::Png {
            path: path.display().to_string(),
            source,
        }
    })
}

/// Reads a PNG as grayscale or RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image, IoError> {
    let dynimg = ::image::open(path).map_err(|source| IoError::Png {
        path: path.display().to_string(),
        source,
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    Ok(match dynimg.color().channel_count() {
        1 | 2 => {
            let buf = dynimg.to_luma8();
            Image::from_data(w, h, 1, buf.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
        }
        _ => {
            let buf = dynimg.to_rgb8();
            Image::from_data(w, h, 3, buf.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
        }
    })
}

/// `u32` width, `u32` height, then row-major interleaved `f32`, all
/// little-endian.
pub fn write_f32(img: &Image, path: &Path) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(8 + 4 * img.data.len());
    bytes.extend_from_slice(&(img.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.height as u32).to_le_bytes());
    for v in &img.data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(fs_err(path))
}

/// Inverse of [`write_f32`]; the channel count follows from the file size.
pub fn read_f32(path: &Path) -> Result<Image, IoError> {
    let bytes = fs::read(path).map_err(fs_err(path))?;
    let bad = |msg: &str| IoError::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = (bytes.len() - 8) / 4;
    if w * h == 0 || (bytes.len() - 8) % 4 != 0 || n % (w * h) != 0 {
        return Err(bad("payload does not match header"));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Image::from_data(w, h, n / (w * h), data))
}

/// Rounds every value through `f32`, matching what [`write_f32`] stores.
pub fn quantize_f32(img: &Image) -> Image {
    Image::from_data(
        img.width,
        img.height,
        img.channels,
        img.data.iter().map(|&v| v as f32 as f64).collect(),
    )
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text).map_err(fs_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<(), IoError> {
    fs::create_dir_all(path).map_err(fs_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for ch in [1, 3] {
            let img = Image::from_fn(5, 3, ch, |x, y, c| x as f64 * 0.1 + y as f64 - c as f64 * 0.25);
            let p = dir.path().join(format!("a{ch}.f32"));
            write_f32(&img, &p).unwrap();
            assert_eq!(read_f32(&p).unwrap(), quantize_f32(&img));
        }
        std::fs::write(dir.path().join("bad.f32"), [1, 0, 0, 0, 2, 0, 0, 0, 0]).unwrap();
        assert!(read_f32(&dir.path().join("bad.f32")).is_err());
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 2, 3, |x, y, c| ((x + 2 * y + c) % 5) as f64 / 4.0);
        let p = dir.path().join("a.png");
        write_png(&img, &p).unwrap();
        let back = read_png(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        let gray = Image::filled(3, 3, 1, 1.0);
        write_png(&gray, &p).unwrap();
        assert_eq!(read_png(&p).unwrap(), gray);
    }
}
