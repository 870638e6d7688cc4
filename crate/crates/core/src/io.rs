//! File output: atomic writes, 8-bit PNG and little-endian PFM.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png<P, C>(path: &Path, img: ImageBuffer<P, C>) -> Result<()>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
    C: std::ops::Deref<Target = [u8]>,
{
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_atomic(path, bytes.get_ref())
}

/// Row-major RGB in `[0, 1]`, top row first.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    check_len(rgb.len(), width, height)?;
    let img = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let p = rgb[y as usize * width + x as usize];
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    });
    encode_png(path, img)
}

pub fn write_png_gray(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    check_len(values.len(), width, height)?;
    let img = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        Luma([to_u8(values[y as usize * width + x as usize])])
    });
    encode_png(path, img)
}

/// Reads an 8-bit RGB PNG as `[0, 1]` floats.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let px = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Ok((w as usize, h as usize, px))
}

fn check_len(len: usize, width: usize, height: usize) -> Result<()> {
    if len != width * height {
        return Err(Error::Contract(format!(
            "image buffer has {len} pixels, expected {width}x{height}"
        )));
    }
    Ok(())
}

/// PFM bytes for `channels` (1 or 3) interleaved values, top row first.
/// The file stores rows bottom to top with a negative (little-endian) scale.
pub fn pfm_bytes(width: usize, height: usize, channels: usize, data: &[f64]) -> Result<Vec<u8>> {
    let tag = match channels {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::Contract(format!("PFM supports 1 or 3 channels, got {channels}"))),
    };
    if data.len() != width * height * channels {
        return Err(Error::Contract("PFM data length mismatch".into()));
    }
    let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    let row = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    write_atomic(path, &pfm_bytes(width, height, channels, data)?)
}

/// Parses PFM bytes back to `(width, height, channels, data)` with the top row first.
pub fn parse_pfm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bad = |m: &str| Error::Contract(format!("malformed PFM: {m}"));
    let mut lines = 0;
    let mut pos = 0;
    while lines < 3 {
        let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("header"))?;
        pos += nl + 1;
        lines += 1;
    }
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| bad("header"))?;
    let mut tokens = header.split_whitespace();
    let channels = match tokens.next() {
        Some("Pf") => 1,
        Some("PF") => 3,
        _ => return Err(bad("tag")),
    };
    let mut num = || tokens.next().and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| bad("dims"));
    let width = num()? as usize;
    let height = num()? as usize;
    let scale = num()?;
    if scale >= 0.0 {
        return Err(bad("only little-endian PFM is supported"));
    }
    let body = &bytes[pos..];
    let row = width * channels;
    if body.len() != row * height * 4 {
        return Err(bad("payload length"));
    }
    let mut data = vec![0.0; row * height];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let stored_row = i / row;
        let y = height - 1 - stored_row;
        data[y * row + i % row] = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
    }
    Ok((width, height, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_flips_rows() {
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bytes = pfm_bytes(3, 2, 1, &data).unwrap();
        let header_len = b"Pf\n3 2\n-1.0\n".len();
        let first = f32::from_le_bytes(bytes[header_len..header_len + 4].try_into().unwrap());
        assert_eq!(first, 4.0);
        assert_eq!(parse_pfm(&bytes).unwrap(), (3, 2, 1, data));
    }

    #[test]
    fn atomic_write_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/img.png");
        let px = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]];
        write_png_rgb(&path, 2, 2, &px).unwrap();
        let (w, h, back) = read_png_rgb(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(back[0], [1.0, 0.0, 0.0]);
        assert!((back[3][1] - 128.0 / 255.0).abs() < 1e-12);
        let leftovers: Vec<_> = std::fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
