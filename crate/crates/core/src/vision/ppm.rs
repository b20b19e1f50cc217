//! Binary PPM (P6, maxval 255).

use std::fs;
use std::path::Path;

use super::{Image, VisionError};

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, VisionError> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(VisionError::Format("expected P6 magic".into()));
    }
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(VisionError::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(VisionError::Format("missing whitespace after maxval".into()));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| VisionError::Format("image dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(VisionError::Format(format!(
            "raster truncated: need {need} bytes, have {}",
            raster.len()
        )));
    }
    Image::new(width, height, raster[..need].to_vec())
        .map_err(|e| VisionError::Format(e.to_string()))
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], VisionError> {
    loop {
        while bytes.get(*pos).is_some_and(u8::is_ascii_whitespace) {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(VisionError::Format("header ended early".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, VisionError> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v: &usize| v > 0)
        .ok_or_else(|| VisionError::Format(format!("bad {what}")))
}

pub fn read_ppm(path: &Path) -> Result<Image, VisionError> {
    let wrap = |source| VisionError::File {
        path: path.to_path_buf(),
        source: Box::new(source),
    };
    let bytes = fs::read(path).map_err(|e| wrap(e.into()))?;
    decode_ppm(&bytes).map_err(wrap)
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<(), VisionError> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = Image::from_fn(5, 3, |x, y| [x as u8, y as u8, (x * y) as u8]);
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn header_comments() {
        let mut bytes = b"P6 # comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_ppm(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x01\x02").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x01\x02\x03\x04\x05\x06").is_err());
    }
}
