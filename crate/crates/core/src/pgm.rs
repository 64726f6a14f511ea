//! Binary PGM (16-bit grayscale) and PPM (8-bit RGB) reading and writing.
//!
//! Rasters store ids as pixel values; 16-bit samples are big-endian per the
//! netpbm convention. Round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write a 16-bit binary PGM (`P5`, maxval 65535).
pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "pgm data length {} does not match {width}x{height}",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(32 + data.len() * 2);
    write!(buf, "P5\n{width} {height}\n65535\n")?;
    for v in data {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read a 16-bit binary PGM written by [`write_pgm16`].
///
/// Header parsing follows netpbm: `P5`, then width, height, and maxval as
/// whitespace-separated decimal tokens (with `#` comments), then a single
/// whitespace byte before the raster.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::Format(format!(
            "{}: not a binary PGM (missing P5 magic)",
            path.display()
        )));
    }
    let mut pos = 2;
    let mut fields = [0i64; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
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
        if pos < bytes.len() && bytes[pos] == b'-' {
            pos += 1;
        }
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!(
                "{}: malformed PGM header",
                path.display()
            )));
        }
        let token = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Format(format!("{}: malformed PGM header", path.display())))?;
        *field = token
            .parse::<i64>()
            .map_err(|_| Error::Format(format!("{}: malformed PGM header", path.display())))?;
    }
    let [w, h, maxval] = fields;
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!(
            "{}: non-positive dimensions {w}x{h}",
            path.display()
        )));
    }
    if maxval != 65535 {
        return Err(Error::Format(format!(
            "{}: expected maxval 65535, found {maxval}",
            path.display()
        )));
    }
    // Exactly one whitespace byte separates header and raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format(format!(
            "{}: malformed PGM header",
            path.display()
        )));
    }
    pos += 1;
    let (w, h) = (w as usize, h as usize);
    let expected = w * h * 2;
    if bytes.len() - pos != expected {
        return Err(Error::Format(format!(
            "{}: raster size {} does not match {w}x{h} 16-bit samples",
            path.display(),
            bytes.len() - pos
        )));
    }
    let data = bytes[pos..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, data))
}

/// Write an 8-bit binary PPM (`P6`, maxval 255) from packed RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidArgument(format!(
            "ppm data length {} does not match {width}x{height} rgb",
            rgb.len()
        )));
    }
    let mut buf = Vec::with_capacity(32 + rgb.len());
    write!(buf, "P6\n{width} {height}\n255\n")?;
    buf.extend_from_slice(rgb);
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("ciae_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.pgm");
        let data: Vec<u16> = (0..12).map(|i| (i * 4999) as u16).collect();
        write_pgm16(&path, 4, 3, &data).unwrap();
        let (w, h, back) = read_pgm16(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, data);
    }

    #[test]
    fn pgm_rejects_negative_dimension() {
        let dir = std::env::temp_dir().join("ciae_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("neg.pgm");
        fs::write(&path, b"P5\n-3 2\n65535\n").unwrap();
        assert!(matches!(read_pgm16(&path), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_rejects_truncated_raster() {
        let dir = std::env::temp_dir().join("ciae_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.pgm");
        fs::write(&path, b"P5\n2 2\n65535\n\x00\x01").unwrap();
        assert!(matches!(read_pgm16(&path), Err(Error::Format(_))));
    }
}
