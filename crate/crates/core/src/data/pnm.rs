//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a P6 or P5 file as a `[3, h, w]` image in `[0, 1]`; gray images are
/// replicated to three channels.
pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    decode_pnm(&bytes).map_err(|detail| Error::Malformed {
        what: "PNM image",
        path: path.to_path_buf(),
        detail,
    })
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format!("unsupported magic {m:?}")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval must be 255, got {maxval}"));
    }
    let n = w * h * channels;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| format!("expected {n} raster bytes"))?;
    let mut data = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let src = if channels == 3 { raster[i * 3 + c] } else { raster[i] };
            data[c * h * w + i] = src as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| e.to_string())
}

/// P6 bytes of a `[3, h, w]` (or `[1, h, w]`) image; values are clamped to
/// `[0, 1]` and rounded to the nearest of 256 levels.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        &[c @ (1 | 3), h, w] => (c, h, w),
        s => return Err(Error::shape("encode_ppm", format!("expected [3|1, h, w], got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            let v = d[(ch % c) * h * w + i];
            out.push(quantize(v));
        }
    }
    Ok(out)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_the_byte_grid() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f32 / 255.0);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        let back = decode_pnm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn gray_images_and_comments() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P6\n1 1\n65535\n\x00\x00\x00").is_err());
        let err = read_pnm(Path::new("/nonexistent/1.ppm")).unwrap_err();
        assert!(err.to_string().contains("1.ppm"));
    }
}
