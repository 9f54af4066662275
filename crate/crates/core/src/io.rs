//! PNG images and PFM disparity maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Byte order of PFM samples, encoded by the sign of the header scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

fn format_error(path: &Path, location: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Format {
        format: "PFM",
        path: path.to_path_buf(),
        location: location.into(),
        msg: msg.into(),
    }
}

/// Parses PFM bytes into `1 x C x H x W` with the first row at the top.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    // three whitespace-terminated header lines: magic, size, scale
    let mut pos = 0;
    let mut line = |no: usize| -> Result<String> {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(format_error(path, format!("header line {no}"), "unexpected end of file"));
        }
        pos += 1;
        std::str::from_utf8(&bytes[start..pos - 1])
            .map(|s| s.trim().to_string())
            .map_err(|_| format_error(path, format!("header line {no}"), "not ASCII text"))
    };
    let magic = line(1)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format_error(path, "header line 1", format!("bad magic {other:?}"))),
    };
    let dims = line(2)?;
    let parsed: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_error(path, "header line 2", format!("bad dimensions {dims:?}")))?;
    let (w, h) = match parsed.as_slice() {
        [w, h] if *w > 0 && *h > 0 => (*w, *h),
        _ => return Err(format_error(path, "header line 2", format!("bad dimensions {dims:?}"))),
    };
    let scale_line = line(3)?;
    let scale: f64 = scale_line
        .parse()
        .map_err(|_| format_error(path, "header line 3", format!("bad scale {scale_line:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_error(path, "header line 3", "scale must be non-zero"));
    }
    let endian = if scale < 0.0 { Endian::Little } else { Endian::Big };
    let body = &bytes[pos..];
    let need = w * h * channels * 4;
    if body.len() < need {
        return Err(format_error(
            path,
            format!("byte {}", pos + body.len()),
            format!("expected {need} data bytes, found {}", body.len()),
        ));
    }
    let mut out = Tensor::zeros([1, channels, h, w]);
    for (i, chunk) in body[..need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = match endian {
            Endian::Little => f32::from_le_bytes(raw),
            Endian::Big => f32::from_be_bytes(raw),
        };
        // rows are stored bottom to top, channels interleaved
        let c = i % channels;
        let x = (i / channels) % w;
        let y = h - 1 - i / (channels * w);
        out.set(0, c, y, x, v as Real);
    }
    Ok(out)
}

/// Serialises `1 x C x H x W` (`C` of 1 or 3) as PFM.
pub fn encode_pfm(t: &Tensor, endian: Endian) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.shape();
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::invalid("write_pfm", format!("need 1 x 1|3 x H x W, got {:?}", t.shape())));
    }
    let magic = if c == 3 { "PF" } else { "Pf" };
    let scale = match endian {
        Endian::Little => "-1.0",
        Endian::Big => "1.0",
    };
    let mut out = format!("{magic}\n{w} {h}\n{scale}\n").into_bytes();
    out.reserve(c * h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                let v = t.at(0, ch, y, x) as f32;
                out.extend_from_slice(&match endian {
                    Endian::Little => v.to_le_bytes(),
                    Endian::Big => v.to_be_bytes(),
                });
            }
        }
    }
    Ok(out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn write_pfm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pfm(t, Endian::Little)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit RGB PNG as `1 x 3 x H x W` in `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as Real / 255.0
    }))
}

/// Quantises to 8 bits after clamping to `[0, 1]`. A single channel is
/// replicated into grey.
pub fn to_rgb8(t: &Tensor) -> Result<image::RgbImage> {
    let [n, c, h, w] = t.shape();
    if n != 1 || (c != 3 && c != 1) {
        return Err(Error::invalid("write_png", format!("need 1 x 3 x H x W or 1 x 1 x H x W, got {:?}", t.shape())));
    }
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (t.at(0, ch.min(c - 1), y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn write_png(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(t)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
