//! PGM/PPM (ASCII and binary, maxval <= 255) and 8-bit PNG reading; PGM/PPM writing.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Loads a PGM, PPM or PNG file, scaling samples into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Read { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

/// Decodes an in-memory PNM or PNG stream.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        return decode_png(bytes);
    }
    match bytes.get(..2) {
        Some(b"P2") | Some(b"P3") | Some(b"P5") | Some(b"P6") => decode_pnm(bytes),
        Some(magic) if magic[0] == b'P' => Err(Error::UnsupportedFormat(format!(
            "PNM variant {}",
            String::from_utf8_lossy(magic)
        ))),
        _ => Err(Error::UnsupportedFormat("unrecognized file signature".into())),
    }
}

/// Writes a binary PGM (1 channel) or PPM (3 channels) with maxval 255.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(image)).map_err(|source| Error::Write { path: path.to_path_buf(), source })
}

pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

/// Round half-up to an 8-bit level.
#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next_token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::CorruptImage("unexpected end of PNM data".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn next_usize(&mut self) -> Result<usize> {
        let tok = self.next_token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptImage(format!("bad PNM number {:?}", String::from_utf8_lossy(tok))))
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let (ascii, channels) = match &bytes[..2] {
        b"P2" => (true, 1),
        b"P3" => (true, 3),
        b"P5" => (false, 1),
        _ => (false, 3),
    };
    let mut tokens = Tokens { bytes, pos: 2 };
    let width = tokens.next_usize()?;
    let height = tokens.next_usize()?;
    let maxval = tokens.next_usize()?;
    if width == 0 || height == 0 {
        return Err(Error::EmptyImage { height, width });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!("PNM maxval {maxval} (only 1..=255 supported)")));
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::CorruptImage("PNM dimensions overflow".into()))?;
    let scale = maxval as f64;

    let mut data = Vec::with_capacity(count);
    if ascii {
        for _ in 0..count {
            let v = tokens.next_usize()?;
            data.push((v as f64 / scale).clamp(0.0, 1.0));
        }
    } else {
        // exactly one whitespace byte separates the header from the raster
        let start = tokens.pos + 1;
        let raster = bytes
            .get(start..start + count)
            .ok_or_else(|| Error::CorruptImage("truncated PNM raster".into()))?;
        data.extend(raster.iter().map(|&b| (b as f64 / scale).clamp(0.0, 1.0)));
    }
    Image::new(height, width, channels, data)
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let corrupt = |e: png::DecodingError| Error::CorruptImage(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptImage("PNG output buffer too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!("PNG bit depth {:?}", info.bit_depth)));
    }
    let (height, width) = (info.height as usize, info.width as usize);
    if width == 0 || height == 0 {
        return Err(Error::EmptyImage { height, width });
    }
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::UnsupportedFormat(format!("PNG color type {other:?}"))),
    };
    let mut data = Vec::with_capacity(height * width * channels);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..width * stride].chunks_exact(stride) {
            data.extend(px[..channels].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Image::new(height, width, channels, data)
}
