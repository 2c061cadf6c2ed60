//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{ImageError, Result};
use crate::tensor::{Dims4, Tensor4};

/// Raw 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Raw 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<[u8; 3]>,
}

fn header_tokens(bytes: &[u8], magic: &'static str) -> Result<([usize; 3], usize), ImageError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ImageError::WrongMagic { expected: magic, found });
    }
    let mut at = 2;
    let mut vals = [0usize; 3];
    for (i, slot) in vals.iter_mut().enumerate() {
        loop {
            match bytes.get(at) {
                Some(b) if b.is_ascii_whitespace() => at += 1,
                Some(b'#') => {
                    while bytes.get(at).is_some_and(|&b| b != b'\n') {
                        at += 1;
                    }
                }
                _ => break,
            }
        }
        let start = at;
        while bytes.get(at).is_some_and(u8::is_ascii_digit) {
            at += 1;
        }
        if start == at {
            return Err(ImageError::MalformedHeader(format!("missing header field {}", i + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..at]).expect("ascii digits");
        *slot = text
            .parse()
            .map_err(|_| ImageError::MalformedHeader(format!("number out of range: {text}")))?;
    }
    match bytes.get(at) {
        Some(b) if b.is_ascii_whitespace() => at += 1,
        _ => return Err(ImageError::MalformedHeader("no whitespace after maxval".into())),
    }
    if vals[0] == 0 || vals[1] == 0 {
        return Err(ImageError::MalformedHeader(format!("empty raster {}x{}", vals[0], vals[1])));
    }
    if vals[2] != 255 {
        return Err(ImageError::Unsupported(format!("maxval {} (only 255 is supported)", vals[2])));
    }
    Ok((vals, at))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Gray, ImageError> {
    let ([cols, rows, _], at) = header_tokens(bytes, "P5")?;
    let expected = rows * cols;
    let found = bytes.len() - at;
    if found < expected {
        return Err(ImageError::ShortFile { expected, found });
    }
    Ok(Gray {
        rows,
        cols,
        pixels: bytes[at..at + expected].to_vec(),
    })
}

pub fn encode_pgm(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.cols, img.rows).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb, ImageError> {
    let ([cols, rows, _], at) = header_tokens(bytes, "P6")?;
    let expected = 3 * rows * cols;
    let found = bytes.len() - at;
    if found < expected {
        return Err(ImageError::ShortFile { expected, found });
    }
    let pixels = bytes[at..at + expected]
        .chunks_exact(3)
        .map(|p| [p[0], p[1], p[2]])
        .collect();
    Ok(Rgb { rows, cols, pixels })
}

pub fn encode_ppm(img: &Rgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.cols, img.rows).into_bytes();
    out.extend(img.pixels.iter().flatten());
    out
}

/// round(127.5 * (v + 1)) clamped to 0..=255.
pub fn denormalize(v: f64) -> u8 {
    (127.5 * (v + 1.0)).round().clamp(0.0, 255.0) as u8
}

/// Grayscale raster of a single-channel sample, de-normalized.
pub fn gray_from_tensor(t: &Tensor4) -> Result<Gray> {
    let d = t.dims();
    if d.batch != 1 || d.channels != 1 {
        return Err(crate::error::Error::usage(format!(
            "expected a 1x1xHxW image, got {d}"
        )));
    }
    Ok(Gray {
        rows: d.rows,
        cols: d.cols,
        pixels: t.data().iter().map(|&v| denormalize(v)).collect(),
    })
}

/// Normalized 1x1xHxW tensor of a grayscale raster.
pub fn tensor_from_gray(g: &Gray) -> Result<Tensor4> {
    let raw: Vec<f64> = g.pixels.iter().map(|&p| f64::from(p)).collect();
    super::normalize(&raw, g.rows, g.cols)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor4> {
    let bytes = fs::read(path)?;
    tensor_from_gray(&decode_pgm(&bytes)?)
}

pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    fs::write(path, encode_pgm(&gray_from_tensor(t)?))?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Rgb) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub(crate) fn image_dims(rows: usize, cols: usize) -> Dims4 {
    Dims4::new(1, 1, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes_round_trip() {
        let g = Gray {
            rows: 2,
            cols: 3,
            pixels: vec![0, 1, 2, 253, 254, 255],
        };
        let bytes = encode_pgm(&g);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), g);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # a comment\n2 # cols\n1\n255\n".to_vec();
        bytes.extend([7, 9]);
        let g = decode_pgm(&bytes).unwrap();
        assert_eq!((g.rows, g.cols, g.pixels), (1, 2, vec![7, 9]));
    }

    #[test]
    fn ppm_round_trip() {
        let img = Rgb {
            rows: 1,
            cols: 2,
            pixels: vec![[255, 0, 0], [0, 12, 0]],
        };
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\0"), Err(ImageError::WrongMagic { .. })));
        assert!(matches!(decode_pgm(b"P5\n1\n255\n\0"), Err(ImageError::MalformedHeader(_))));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(ImageError::Unsupported(_))));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\0\0"),
            Err(ImageError::ShortFile { expected: 4, found: 2 })
        ));
        assert!(matches!(decode_pgm(b""), Err(ImageError::WrongMagic { .. })));
    }

    #[test]
    fn denormalize_endpoints_and_clamp() {
        assert_eq!(denormalize(-1.0), 0);
        assert_eq!(denormalize(1.0), 255);
        assert_eq!(denormalize(3.0), 255);
        assert_eq!(denormalize(-7.0), 0);
        assert_eq!(denormalize(0.0), 128);
    }

    #[test]
    fn file_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let data: Vec<f64> = (0..12).map(|i| -1.0 + i as f64 * 0.17).collect();
        let t = Tensor4::from_vec(image_dims(3, 4), data).unwrap();
        write_pgm(&path, &t).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 127.5 + 1e-12);
        }
    }
}
