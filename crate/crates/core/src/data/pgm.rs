//! Binary PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub fn decode(bytes: &[u8]) -> Result<Image<u8>> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = token(bytes, &mut pos).ok_or_else(|| bad("missing magic"))?;
    if magic != b"P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    for f in &mut fields {
        let t = token(bytes, &mut pos).ok_or_else(|| bad("truncated header"))?;
        *f = std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header field"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported (need 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(bad("truncated raster"));
    }
    Image::new(width, height, bytes[pos..pos + n].to_vec())
}

pub fn encode(img: &Image<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn read(path: &Path) -> Result<Image<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, img: &Image<u8>) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

fn bad(msg: &str) -> Error {
    Error::Data(format!("pgm: {msg}"))
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
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
    (*pos > start).then(|| &bytes[start..*pos])
}
