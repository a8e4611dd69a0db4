//! Binary PPM (P6) and PGM (P5) image I/O. Images live in memory as
//! `[C,H,W]` arrays with values in [0,1].

use crate::arr::Arr;
use crate::error::{RdcError, Result};
use std::io::{Read, Write};
use std::path::Path;

fn clamp_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Skips whitespace and `#` comments, then reads one ASCII integer.
fn read_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
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
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(RdcError::Data("malformed netpbm header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| RdcError::Data("malformed netpbm header".into()))
}

fn read_netpbm(path: &Path, magic: &[u8], channels: usize) -> Result<Arr> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(RdcError::Data(format!(
            "{}: expected {} file",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let w = read_token(&bytes, &mut pos)?;
    let h = read_token(&bytes, &mut pos)?;
    let maxval = read_token(&bytes, &mut pos)?;
    if maxval != 255 {
        return Err(RdcError::Data("only maxval 255 is supported".into()));
    }
    pos += 1; // single whitespace byte after maxval
    let n = w * h * channels;
    if bytes.len() < pos + n {
        return Err(RdcError::Data("truncated pixel data".into()));
    }
    let mut data = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = bytes[pos + (y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Arr::from_vec(&[channels, h, w], data)
}

fn write_netpbm(path: &Path, img: &Arr, magic: &str, channels: usize) -> Result<()> {
    if img.shape.len() != 3 || img.shape[0] != channels {
        return Err(RdcError::InvalidArgument(format!(
            "expected [{channels},H,W] image, got {:?}",
            img.shape
        )));
    }
    let (h, w) = (img.shape[1], img.shape[2]);
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                out.push(clamp_byte(img.data[(c * h + y) * w + x]));
            }
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reads a binary RGB PPM into a [3,H,W] array in [0,1].
pub fn read_ppm(path: &Path) -> Result<Arr> {
    read_netpbm(path, b"P6", 3)
}

pub fn write_ppm(path: &Path, img: &Arr) -> Result<()> {
    write_netpbm(path, img, "P6", 3)
}

/// Reads a binary grayscale PGM into a [1,H,W] array in [0,1].
pub fn read_pgm(path: &Path) -> Result<Arr> {
    read_netpbm(path, b"P5", 1)
}

pub fn write_pgm(path: &Path, img: &Arr) -> Result<()> {
    write_netpbm(path, img, "P5", 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        let img = Arr::from_vec(
            &[3, 2, 2],
            (0..12).map(|i| i as f64 / 11.0).collect(),
        )
        .unwrap();
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape, vec![3, 2, 2]);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let img = Arr::from_vec(&[1, 2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.shape, vec![1, 2, 3]);

        let commented = b"P5\n# a comment\n2 1\n255\n\x00\xff";
        std::fs::write(&p, commented).unwrap();
        let c = read_pgm(&p).unwrap();
        assert_eq!(c.data, vec![0.0, 1.0]);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P5\n1 1\n255\n\x00").unwrap();
        assert!(read_ppm(&p).is_err());
    }
}
