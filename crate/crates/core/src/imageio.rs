//! Binary PPM (P6) images and PGM (P5) masks.
//!
//! Images are 3-channel, scaled between [0,1] floats and 8-bit bytes; masks
//! store raw label values. Roundtrips are lossless for 8-bit data.

use std::fs;
use std::path::Path;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn format_err(path: &Path, detail: &str) -> Error {
    Error::Format(format!("{}: {detail}", path.display()))
}

/// Writes a (3,H,W) tensor with values in [0,1] as binary PPM.
pub fn write_image<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("write_image", format!("expected 3×H×W, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + p].to_f64().clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PPM into a (3,H,W) tensor scaled to [0,1].
pub fn read_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let (magic, w, h, maxval, pixels) = parse_pnm(path, &bytes)?;
    if magic != "P6" {
        return Err(format_err(path, "expected P6 image"));
    }
    if maxval != 255 {
        return Err(format_err(path, &format!("unsupported maxval {maxval}")));
    }
    if pixels.len() != 3 * w * h {
        return Err(format_err(path, "truncated pixel data"));
    }
    let plane = w * h;
    let mut data = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = T::from_f64(pixels[3 * p + c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(data, &[3, h, w])
}

/// Writes an (H,W) mask as binary PGM with raw label bytes.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        other => return Err(Error::shape("write_mask", format!("expected H×W, got {other:?}"))),
    };
    if mask.max_label() > 255 {
        return Err(Error::invalid("write_mask", "labels beyond 8-bit range"));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| v as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM mask, rejecting labels outside [0, n_classes).
pub fn read_mask(path: &Path, n_classes: usize) -> Result<Mask> {
    let bytes = fs::read(path)?;
    let (magic, w, h, maxval, pixels) = parse_pnm(path, &bytes)?;
    if magic != "P5" {
        return Err(format_err(path, "expected P5 mask"));
    }
    if maxval != 255 {
        return Err(format_err(path, &format!("unsupported maxval {maxval}")));
    }
    if pixels.len() != w * h {
        return Err(format_err(path, "truncated pixel data"));
    }
    let data: Vec<u32> = pixels.iter().map(|&b| b as u32).collect();
    if let Some(&bad) = data.iter().find(|&&v| v as usize >= n_classes) {
        return Err(format_err(path, &format!("label {bad} out of range for {n_classes} classes")));
    }
    Mask::new(data, &[h, w])
}

/// Parses a PNM header (magic, width, height, maxval) and returns the raw
/// raster that follows.
fn parse_pnm<'a>(path: &Path, bytes: &'a [u8]) -> Result<(String, usize, usize, u32, &'a [u8])> {
    let mut pos = 0usize;
    let mut token = |skip_one_after: bool| -> Result<String> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "malformed header"));
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        if skip_one_after {
            pos += 1; // exactly one whitespace byte separates header and raster
        }
        Ok(tok)
    };
    let magic = token(false)?;
    let w: usize = token(false)?.parse().map_err(|_| format_err(path, "bad width"))?;
    let h: usize = token(false)?.parse().map_err(|_| format_err(path, "bad height"))?;
    let maxval: u32 = token(true)?.parse().map_err(|_| format_err(path, "bad maxval"))?;
    if w == 0 || h == 0 {
        return Err(format_err(path, "zero dimensions"));
    }
    Ok((magic, w, h, maxval, &bytes[pos.min(bytes.len())..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn image_roundtrip_is_lossless_on_8bit_grid() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| ((i * 7) % 256) as f64 / 255.0).collect();
        let img = Tensor::from_vec(data.clone(), &[3, 4, 5]).unwrap();
        write_image(&path, &img).unwrap();
        let back: Tensor<f64> = read_image(&path).unwrap();
        assert_eq!(back.shape(), &[3, 4, 5]);
        assert_eq!(*back.data(), data);
    }

    #[test]
    fn mask_roundtrip_and_label_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Mask::new(vec![0, 1, 1, 0, 1, 0], &[2, 3]).unwrap();
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path, 2).unwrap(), mask);
        // Same file with fewer classes: labels out of range.
        assert!(read_mask(&path, 1).is_err());
    }

    #[test]
    fn truncated_file_is_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = Tensor::from_vec(vec![0.5f64; 3 * 4 * 4], &[3, 4, 4]).unwrap();
        write_image(&path, &img).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, bytes).unwrap();
        assert!(read_image::<f64>(&path).is_err());
    }

    #[test]
    fn malformed_header_is_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P6\nnot a number\n255\nxxxx").unwrap();
        assert!(read_image::<f64>(&path).is_err());
    }
}
