//! Binary PPM (P6) and PGM (P5) writers and minimal readers.
//!
//! Dependency-free and bit-exactly specified; used for episode dumps,
//! correlation heatmaps, and mask images.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> io::Result<()> {
    assert_eq!(gray.len(), w * h);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    f.write_all(gray)
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> io::Result<()> {
    assert_eq!(rgb.len(), 3 * w * h);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", w, h)?;
    f.write_all(rgb)
}

/// Parse a binary P5/P6 file; returns (magic, width, height, payload).
pub fn read_pnm(path: &Path) -> io::Result<(String, usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1; // single whitespace byte after maxval
    let magic = fields[0].clone();
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("unsupported maxval"));
    }
    let expected = match magic.as_str() {
        "P5" => w * h,
        "P6" => 3 * w * h,
        _ => return Err(bad("unsupported magic")),
    };
    if bytes.len() < pos + expected {
        return Err(bad("truncated payload"));
    }
    Ok((magic, w, h, bytes[pos..pos + expected].to_vec()))
}

/// Min-max normalize a map to 0..255 gray; a constant map becomes mid-gray.
pub fn gray_from_map<S: Scalar>(map: &Tensor<S>) -> Vec<u8> {
    let data = map.data();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        let v = v.into_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return vec![128; data.len()];
    }
    data.iter()
        .map(|&v| (255.0 * (v.into_f64() - lo) / (hi - lo)).round() as u8)
        .collect()
}

/// `[3×h×w]` tensor in [0,1] to interleaved 8-bit RGB.
pub fn rgb_from_image<S: Scalar>(image: &Tensor<S>) -> Vec<u8> {
    assert_eq!(image.rank(), 3);
    assert_eq!(image.shape()[0], 3);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.at3(ch, y, x).into_f64().clamp(0.0, 1.0);
                out[(y * w + x) * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Binary mask to 0/255 gray.
pub fn gray_from_mask<S: Scalar>(mask: &Tensor<S>) -> Vec<u8> {
    mask.data()
        .iter()
        .map(|&v| if v > S::zero() { 255 } else { 0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pgm_roundtrip() {
        let dir = std::env::temp_dir().join("fewseg-pnm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        let gray: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        write_pgm(&path, 4, 3, &gray).unwrap();
        let (magic, w, h, payload) = read_pnm(&path).unwrap();
        assert_eq!((magic.as_str(), w, h), ("P5", 4, 3));
        assert_eq!(payload, gray);
    }

    #[test]
    fn constant_map_renders_mid_gray() {
        let t = Tensor::<f64>::filled(vec![2, 2], 0.7);
        assert_eq!(gray_from_map(&t), vec![128; 4]);
    }

    #[test]
    fn map_normalization_spans_full_range() {
        let t = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 4.0]).unwrap();
        let g = gray_from_map(&t);
        assert_eq!(g[0], 0);
        assert_eq!(g[2], 255);
    }
}
