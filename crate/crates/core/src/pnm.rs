//! Binary PPM (P6) and PGM (P5) images.
//!
//! Parse errors carry the byte offset at which the problem was found.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Single-channel image with samples up to 16 bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// 16-bit big-endian samples with maxval 65535, or 8-bit when `maxval < 256`.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval < 256 {
        out.extend(img.data.iter().map(|&v| v as u8));
    } else {
        for &v in &img.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    body: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let err = |offset: usize, detail: String| Error::Parse { path: path.to_path_buf(), offset, detail };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[k] = text.parse().map_err(|_| err(start, format!("{name} `{text}` out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected a single whitespace byte after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(2, format!("zero image size {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err(2, format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(Header { width, height, maxval, body: pos })
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6", path)?;
    if h.maxval != 255 {
        return Err(Error::Parse { path: path.to_path_buf(), offset: 2, detail: format!("unsupported maxval {}", h.maxval) });
    }
    let need = h.width * h.height * 3;
    let body = &bytes[h.body..];
    if body.len() < need {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            detail: format!("truncated raster: {} of {need} bytes", body.len()),
        });
    }
    Ok(RgbImage { width: h.width, height: h.height, data: body[..need].to_vec() })
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let h = parse_header(bytes, b"P5", path)?;
    let wide = h.maxval > 255;
    let count = h.width * h.height;
    let need = count * if wide { 2 } else { 1 };
    let body = &bytes[h.body..];
    if body.len() < need {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            detail: format!("truncated raster: {} of {need} bytes", body.len()),
        });
    }
    let data: Vec<u16> = if wide {
        body[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        body[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = data.iter().position(|&v| v as usize > h.maxval) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: h.body + i * if wide { 2 } else { 1 },
            detail: format!("sample {} exceeds maxval {}", data[i], h.maxval),
        });
    }
    Ok(GrayImage { width: h.width, height: h.height, maxval: h.maxval as u16, data })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}
