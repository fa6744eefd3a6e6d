//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

/// A decoded 8-bit raster: `channels` is 3 for P6, 1 for P5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "gray buffer size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses a P5 or P6 file. `path` is used only for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad(path, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and `#` comments may precede each header number
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
        let name = ["width", "height", "maxval"][i];
        if start == pos {
            return Err(bad(path, format!("missing {name} in header")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(path, format!("invalid {name} in header")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(path, "header must end with a single whitespace byte"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| bad(path, "image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(bad(
            path,
            format!("payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: payload.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_formats() {
        let p = Path::new("t");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|v| v as u8 * 13).collect();
        let r = decode(&encode_ppm(3, 2, &rgb), p).unwrap();
        assert_eq!((r.width, r.height, r.channels), (3, 2, 3));
        assert_eq!(r.data, rgb);
        let g = decode(&encode_pgm(2, 2, &[0, 1, 2, 255]), p).unwrap();
        assert_eq!(g.channels, 1);
        assert_eq!(g.data, [0, 1, 2, 255]);
    }

    #[test]
    fn pgm_payload_is_one_byte_per_pixel() {
        let bytes = encode_pgm(64, 64, &[0; 64 * 64]);
        let header = b"P5\n64 64\n255\n".len();
        assert_eq!(bytes.len() - header, 64 * 64);
    }

    #[test]
    fn comments_and_errors() {
        let p = Path::new("t");
        let r = decode(b"P5 # hi\n1 # c\n 1\n255\n\x07", p).unwrap();
        assert_eq!(r.data, [7]);
        assert!(decode(b"P4\n1 1\n255\n\0", p).is_err());
        assert!(decode(b"P5\n1 1\n65535\n\0\0", p).is_err());
        assert!(decode(b"P5\n2 1\n255\n\0", p).is_err());
        assert!(decode(b"P5\n1\n", p).is_err());
    }
}
