use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn img_err(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Image files (`.png`/`.ppm`) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "ppm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn from_rgb8<T: Real>(w: usize, h: usize, rgb: &[u8]) -> Tensor<T> {
    let scale = T::from_u8(255).unwrap();
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        T::from_u8(rgb[(y * w + x) * 3 + c]).unwrap() / scale
    })
}

/// Loads an 8-bit RGB image as a `[1, 3, h, w]` tensor with values `byte / 255`.
pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    if is_ppm(path) {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, rgb) = parse_ppm(&bytes).map_err(|d| img_err(path, d))?;
        return Ok(from_rgb8(w, h, rgb));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| img_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(
            path,
            format!("unsupported bit depth {:?} (need 8-bit)", info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => return Err(img_err(path, format!("unsupported color type {other:?}"))),
    };
    let stride = info.line_size;
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * stride..];
        for x in 0..w {
            let px = &row[x * channels..];
            if channels == 1 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    Ok(from_rgb8(w, h, &rgb))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, &[u8]), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "bad PPM header")?);
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported PPM magic {:?} (need binary P6)", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header field {s:?}"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(format!("unsupported PPM maxval {max} (need 255)"));
    }
    let data = &bytes[pos + 1..];
    if w == 0 || h == 0 || data.len() < w * h * 3 {
        return Err("PPM pixel data truncated".into());
    }
    Ok((w, h, &data[..w * h * 3]))
}

fn quantize<T: Real>(v: T) -> u8 {
    let v = v.to_f64().unwrap_or(0.0);
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Saves the first batch item of a 3-channel tensor as 8-bit PNG or PPM
/// (by extension), clamping to `[0, 1]` and rounding half up.
pub fn save_image<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let [_, c, h, w] = t.dims();
    if c != 3 {
        return Err(img_err(path, format!("expected 3 channels, got {c}")));
    }
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                rgb.push(quantize(t.at(0, ch, y, x)));
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    if is_ppm(path) {
        write!(out, "P6\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
        out.write_all(&rgb).map_err(|e| Error::io(path, e))?;
    } else {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| img_err(path, e))?;
        writer.write_image_data(&rgb).map_err(|e| img_err(path, e))?;
        writer.finish().map_err(|e| img_err(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
