//! Binary PGM (P5) and PPM (P6) readers and writers.
//!
//! Only 8-bit payloads are supported. Parse failures carry the byte offset of
//! the problem.

use std::fs;
use std::path::Path;

use super::{Image, Mask};
use crate::error::{CosegError, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> CosegError {
        CosegError::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_magic(&mut self) -> Result<[u8; 2]> {
        if self.bytes.len() < 2 {
            return Err(self.err("file shorter than a magic number"));
        }
        let magic = [self.bytes[0], self.bytes[1]];
        self.pos = 2;
        Ok(magic)
    }

    fn read_uint(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an unsigned integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("integer out of range"))
    }

    /// Consumes the single whitespace byte that separates header and payload.
    fn read_payload(&mut self, expected: usize) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(self.err("expected single whitespace before payload"));
        }
        self.pos += 1;
        let available = self.bytes.len() - self.pos;
        if available < expected {
            return Err(self.err(format!(
                "payload truncated: header promises {} bytes, {} remain",
                expected, available
            )));
        }
        let payload = &self.bytes[self.pos..self.pos + expected];
        self.pos += expected;
        Ok(payload)
    }
}

fn parse_header(cur: &mut Cursor, want: &[u8; 2]) -> Result<(usize, usize)> {
    let magic = cur.read_magic()?;
    if magic != *want {
        return Err(CosegError::Parse {
            offset: 0,
            msg: format!(
                "expected magic {}, found {}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(&magic)
            ),
        });
    }
    let w = cur.read_uint()?;
    let h = cur.read_uint()?;
    let maxval = cur.read_uint()?;
    if w == 0 || h == 0 {
        return Err(cur.err("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(cur.err(format!("unsupported max value {} (8-bit only)", maxval)));
    }
    Ok((w, h))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut cur = Cursor::new(bytes);
    let (w, h) = parse_header(&mut cur, b"P6")?;
    let payload = cur.read_payload(3 * w * h)?;
    Ok(Image {
        w,
        h,
        rgb: payload.to_vec(),
    })
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor::new(bytes);
    let (w, h) = parse_header(&mut cur, b"P5")?;
    let payload = cur.read_payload(w * h)?;
    Ok((w, h, payload.to_vec()))
}

pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_ppm(img))?)
}

/// Loads a mask from a P5 file; values >= 128 count as foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let (w, h, gray) = decode_pgm(&fs::read(path)?)?;
    Ok(Mask {
        w,
        h,
        data: gray.iter().map(|&v| u8::from(v >= 128)).collect(),
    })
}

/// Saves a mask as P5 with values {0, 255}.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let gray: Vec<u8> = mask.data.iter().map(|&v| if v == 0 { 0 } else { 255 }).collect();
    Ok(fs::write(path, encode_pgm(mask.w, mask.h, &gray))?)
}

/// Loads an image tensor source from either format: P6 as RGB, P5 replicated
/// to three channels.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    match bytes.get(..2) {
        Some(b"P6") => decode_ppm(&bytes),
        Some(b"P5") => {
            let (w, h, gray) = decode_pgm(&bytes)?;
            let mut rgb = Vec::with_capacity(3 * gray.len());
            for &v in &gray {
                rgb.extend_from_slice(&[v, v, v]);
            }
            Ok(Image { w, h, rgb })
        }
        _ => Err(CosegError::Parse {
            offset: 0,
            msg: "unknown magic, expected P5 or P6".to_string(),
        }),
    }
}
