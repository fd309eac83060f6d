//! File I/O: 8-bit PNG, binary PPM (P6), and Middlebury .flo flow files.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{Frame, FlowField};

const FLO_MAGIC: f32 = 202021.25;

/// Loads an 8-bit PNG (RGB or gray) or binary PPM (P6). Integer samples map
/// to [0,1] by division by 255.
pub fn load_frame(path: &Path) -> Result<Frame> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => load_ppm(path),
        _ => load_png(path),
    }
}

fn load_png(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    use image::DynamicImage::*;
    let (w, h, c, bytes) = match img {
        ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (w, h, 1, g.into_raw())
        }
        ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            (w, h, 3, rgb.into_raw())
        }
        ImageRgba8(rgba) => {
            let (w, h) = (rgba.width() as usize, rgba.height() as usize);
            let rgb = image::DynamicImage::ImageRgba8(rgba).into_rgb8();
            (w, h, 3, rgb.into_raw())
        }
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported bit depth or color type {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Frame::from_data(w, h, c, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

fn load_ppm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut next_token = || -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("{}: truncated header", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token()?;
    if magic != "P6" {
        return Err(Error::Format(format!(
            "{}: expected P6 magic, got {magic}",
            path.display()
        )));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("{}: bad header field {s}", path.display())))
    };
    let w = parse(next_token()?)?;
    let h = parse(next_token()?)?;
    let maxval = parse(next_token()?)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "{}: unsupported maxval {maxval} (only 8-bit)",
            path.display()
        )));
    }
    pos += 1; // single whitespace after maxval
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() < w * h * 3 {
        return Err(Error::Format(format!(
            "{}: truncated payload ({} of {} bytes)",
            path.display(),
            payload.len(),
            w * h * 3
        )));
    }
    Frame::from_data(
        w,
        h,
        3,
        payload[..w * h * 3].iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Saves a frame as PNG or P6 by extension. Values are clamped to [0,1] and
/// quantized by round(v*255), half away from zero.
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = frame
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => {
            if frame.channels() != 3 {
                return Err(Error::Format("P6 requires a 3-channel frame".into()));
            }
            let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            write!(f, "P6\n{} {}\n255\n", frame.width(), frame.height())
                .and_then(|_| f.write_all(&bytes))
                .map_err(|e| Error::io(path, e))
        }
        _ => {
            let (w, h) = (frame.width() as u32, frame.height() as u32);
            let result = match frame.channels() {
                1 => image::GrayImage::from_raw(w, h, bytes)
                    .unwrap()
                    .save_with_format(path, image::ImageFormat::Png),
                _ => image::RgbImage::from_raw(w, h, bytes)
                    .unwrap()
                    .save_with_format(path, image::ImageFormat::Png),
            };
            result.map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        }
    }
}

/// Reads a Middlebury .flo file, widening float32 samples to f64.
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 12];
    f.read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let magic = f32::from_le_bytes(header[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let w = i32::from_le_bytes(header[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(header[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!(
            "{}: invalid dimensions {w}x{h}",
            path.display()
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let mut payload = vec![0u8; w * h * 8];
    f.read_exact(&mut payload).map_err(|e| {
        Error::Format(format!("{}: size/payload mismatch: {e}", path.display()))
    })?;
    let mut u = vec![0.0; w * h];
    let mut v = vec![0.0; w * h];
    for p in 0..w * h {
        u[p] = f32::from_le_bytes(payload[p * 8..p * 8 + 4].try_into().unwrap()) as f64;
        v[p] = f32::from_le_bytes(payload[p * 8 + 4..p * 8 + 8].try_into().unwrap()) as f64;
    }
    FlowField::from_parts(w, h, u, v)
}

/// Writes a Middlebury .flo file, narrowing samples to float32.
pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    flow.validate()?;
    let mut buf = Vec::with_capacity(12 + flow.u().len() * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for p in 0..flow.u().len() {
        buf.extend_from_slice(&(flow.u()[p] as f32).to_le_bytes());
        buf.extend_from_slice(&(flow.v()[p] as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
