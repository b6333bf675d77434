//! Binary PGM (`P5`) and PPM (`P6`) decoding, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a binary netpbm image into `(H, W, 3)` values in `[0, 1]`.
/// Grayscale is replicated across the three channels.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes, path)
}

pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let malformed = |detail: String| Error::MalformedImage {
        path: path.to_path_buf(),
        detail,
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                detail: format!(
                    "magic `{magic}`; only binary PGM (P5) and PPM (P6) are read, convert first \
                     (e.g. `convert in.jpeg -depth 8 out.pgm`)"
                ),
            });
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and `#` comments
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
        fields[i] = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(format!("missing {name}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("header not terminated by whitespace".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(malformed(format!("zero extent {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            detail: format!("maxval {maxval}; only 8-bit images are read"),
        });
    }
    let n = w * h * channels;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| malformed(format!("payload truncated: need {n} bytes, have {}", bytes.len() - pos)))?;
    let scale = 1.0 / maxval as f32;
    let data: Vec<f32> = if channels == 3 {
        payload.iter().map(|&b| (b as f32 * scale).min(1.0)).collect()
    } else {
        payload.iter().flat_map(|&b| [(b as f32 * scale).min(1.0); 3]).collect()
    };
    Tensor::new(vec![h, w, 3], data)
}

/// Binary PGM of a single-channel `(H, W)` or the first channel of an
/// `(H, W, C)` image with values in `[0, 1]`.
pub fn encode_pgm(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let c = if image.rank() == 3 { image.shape()[2] } else { 1 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .step_by(c)
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("fixture.pgm")
    }

    #[test]
    fn decodes_a_hand_made_pgm() {
        let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
        bytes.extend([0, 128, 255, 64]);
        let t = decode_bytes(&bytes, p()).unwrap();
        assert_eq!(t.shape(), [2, 2, 3]);
        let expected = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (px, e) in t.data().chunks(3).zip(expected) {
            assert_eq!(px, [e as f32; 3]);
        }
    }

    #[test]
    fn white_ppm_is_all_ones() {
        let mut bytes = b"P6 3 1 255\n".to_vec();
        bytes.extend([255; 9]);
        let t = decode_bytes(&bytes, p()).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ascii_and_truncated_files_fail() {
        assert!(matches!(
            decode_bytes(b"P3\n1 1\n255\n0 0 0\n", p()),
            Err(Error::UnsupportedImage { .. })
        ));
        assert!(matches!(
            decode_bytes(b"P5\n2 2\n255\n\x00\x01", p()),
            Err(Error::MalformedImage { .. })
        ));
        assert!(matches!(
            decode_bytes(b"P5\n2\n", p()),
            Err(Error::MalformedImage { .. })
        ));
    }

    #[test]
    fn encode_then_decode() {
        let img = Tensor::from_fn(vec![3, 4, 1], |i| i as f32 / 11.0);
        let back = decode_bytes(&encode_pgm(&img), p()).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter().step_by(3)) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
