//! Plain-text Netpbm writers for heatmaps (P2) and masks (P1).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::localization::SegmentationMask;
use crate::tensor::Tensor;

/// 8-bit P2 image, min-max normalized. A constant map is written as all zeros.
pub fn pgm_string(map: &Tensor) -> Result<String> {
    if map.rank() != 2 {
        return Err(Error::Rank {
            op: "pgm",
            expected: 2,
            shape: map.shape().to_vec(),
        });
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in map.data().chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
                (level as u8).to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

/// P1 bitmap; set pixels are written as `1`.
pub fn pbm_string(mask: &SegmentationMask) -> String {
    let mut out = format!("P1\n{} {}\n", mask.width, mask.height);
    for row in mask.bits.chunks(mask.width) {
        let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn write_pgm(map: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, pgm_string(map)?).map_err(|e| Error::io(path, e))
}

pub fn write_pbm(mask: &SegmentationMask, path: &Path) -> Result<()> {
    std::fs::write(path, pbm_string(mask)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_normalizes_to_full_range() {
        let t = Tensor::matrix(2, 2, vec![-1.0, 0.0, 1.0, 0.5]).unwrap();
        assert_eq!(pgm_string(&t).unwrap(), "P2\n2 2\n255\n0 128\n255 191\n");
    }

    #[test]
    fn pgm_constant_map_is_black() {
        let t = Tensor::full(&[1, 3], 4.0);
        assert_eq!(pgm_string(&t).unwrap(), "P2\n3 1\n255\n0 0 0\n");
    }

    #[test]
    fn pbm_layout() {
        let m = SegmentationMask {
            height: 2,
            width: 3,
            bits: vec![true, false, false, false, true, true],
            threshold: 0.0,
        };
        assert_eq!(pbm_string(&m), "P1\n3 2\n1 0 0\n0 1 1\n");
    }
}
