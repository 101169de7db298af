//! Binary PGM (P5, maxval 255) read/write for dataset images and masks.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Write a [0,1] grid as an 8-bit PGM, rounding half up.
pub fn write_pgm<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::with_capacity(t.len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", t.cols(), t.rows()).as_bytes());
    for &v in t.as_slice() {
        let clamped = v.as_f64().clamp(0.0, 1.0);
        out.push((clamped * 255.0 + 0.5).floor() as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read an 8-bit PGM back to a [0,1] grid.
pub fn read_pgm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open image {}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));

    if raw.len() < 2 || &raw[..2] != b"P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    // Header: three whitespace-separated fields (width, height, maxval),
    // comment lines allowed, then a single whitespace byte before the data.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < raw.len() {
            if raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else if raw[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace separator before pixel data
    if raw.len() < pos || raw.len() - pos < w * h {
        return Err(bad("truncated pixel data"));
    }
    let data = raw[pos..pos + w * h]
        .iter()
        .map(|&b| T::cast(b as f64 / 255.0))
        .collect();
    Tensor::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_quantized_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let t = Tensor::<f64>::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        write_pgm(&path, &t).unwrap();
        let back: Tensor<f64> = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), (2, 3));
        for (a, b) in t.as_slice().iter().zip(back.as_slice()) {
            // one 8-bit quantization step of tolerance
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "{a} vs {b}");
        }
        // a second round trip is exact: values are already on the grid
        let path2 = dir.path().join("t2.pgm");
        write_pgm(&path2, &back).unwrap();
        let again: Tensor<f64> = read_pgm(&path2).unwrap();
        assert_eq!(back.as_slice(), again.as_slice());
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0").unwrap();
        assert!(read_pgm::<f64>(&path).is_err());
        std::fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(read_pgm::<f64>(&path).is_err());
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0u8, 255u8]);
        std::fs::write(&path, bytes).unwrap();
        let t: Tensor<f64> = read_pgm(&path).unwrap();
        assert_eq!(t.shape(), (1, 2));
        assert_eq!(t.as_slice(), &[0.0, 1.0]);
    }
}
