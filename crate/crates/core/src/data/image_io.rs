//! 8-bit PNG and binary PPM (P6) reading and writing.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`. Grayscale PNGs
//! are expanded to three identical channels and alpha is dropped. Saving
//! clamps to `[0, 1]` and rounds to the nearest 8-bit level, so a round trip
//! is accurate to half a quantization step.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    /// Picks the format from the file extension (`.png`, `.ppm`).
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => Ok(ImageFormat::Png),
            Some("ppm") => Ok(ImageFormat::Ppm),
            _ => Err(Error::config(format!(
                "{}: unsupported image extension (expected .png or .ppm)",
                path.display()
            ))),
        }
    }
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, path)
    } else if bytes.starts_with(b"P") {
        decode_ppm(&bytes, path)
    } else {
        Err(Error::format(path, "neither a PNG nor a PPM file"))
    }
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let format = ImageFormat::from_path(path)?;
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::config(format!("can only save 3-channel images, got {c}")));
    }
    let rgb = to_rgb8(image, h, w);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match format {
        ImageFormat::Ppm => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&rgb);
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        ImageFormat::Png => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let png_err = |e: png::EncodingError| Error::format(path, e.to_string());
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&rgb).map_err(png_err)?;
            writer.finish().map_err(png_err)
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_rgb8(image: &Tensor, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(image.get3(c, y, x)));
            }
        }
    }
    out
}

/// Interleaved samples with `channels` per pixel → `[3, H, W]`.
fn from_interleaved(samples: &[f64], channels: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros([3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = &samples[(y * w + x) * channels..][..channels];
            for c in 0..3 {
                let v = match channels {
                    1 | 2 => px[0],
                    _ => px[c],
                };
                t.set3(c, y, x, v);
            }
        }
    }
    t
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let samples: Vec<f64> = buf[..info.buffer_size()].iter().map(|&v| v as f64 / 255.0).collect();
    Ok(from_interleaved(&samples, channels, h, w))
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |d: &str| Error::format(path, d.to_string());
    let mut pos = 0;
    if ppm_token(bytes, &mut pos) != Some(b"P6") {
        return Err(bad("missing P6 magic"));
    }
    let mut number = |what: &str| -> Result<usize> {
        ppm_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("malformed {what}")))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maximum value")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maximum value"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let n = 3 * w * h;
    if data.len() < n * bytes_per {
        return Err(bad("truncated raster"));
    }
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let v = if bytes_per == 1 {
                data[i] as usize
            } else {
                (data[2 * i] as usize) << 8 | data[2 * i + 1] as usize
            };
            v as f64 / maxval as f64
        })
        .collect();
    Ok(from_interleaved(&samples, 3, h, w))
}
