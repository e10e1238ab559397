//! The joint localization space and the read-outs taken from it.
//!
//! For a feature grid `a[r,c,:]` and token rows `s[d,:]` the space holds
//! `m[r,c,d] = a[r,c,:]·s[d,:]`. The MaxImage score averages the spatial
//! maximum of each valid depth slice; the slices themselves are the per-token
//! attention maps.

use std::ops::Range;

use crate::encoders::{FeatureGrid, TokenMatrix};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct LocalizationSpace<'t> {
    /// `[rows, cols, max_len]`
    pub values: Var<'t>,
    pub mask: Tensor,
    pub n_valid: usize,
    pub rows: usize,
    pub cols: usize,
    pub source_size: (usize, usize),
    /// `(image id, caption id)` when known.
    pub provenance: Option<(u32, u32)>,
}

pub fn build_localization_space<'t>(
    grid: &FeatureGrid<'t>,
    toks: &TokenMatrix<'t>,
) -> Result<LocalizationSpace<'t>> {
    if grid.dim != toks.dim {
        return Err(Error::Config(format!(
            "feature grid dim {} does not match token dim {}",
            grid.dim, toks.dim
        )));
    }
    let flat = grid.values.reshape(&[grid.regions(), grid.dim])?;
    let values = flat
        .matmul(toks.values.t()?)?
        .reshape(&[grid.rows, grid.cols, toks.max_len])?;
    Ok(LocalizationSpace {
        values,
        mask: toks.mask.clone(),
        n_valid: toks.n_valid,
        rows: grid.rows,
        cols: grid.cols,
        source_size: grid.source_size,
        provenance: None,
    })
}

/// `S(I, T) = (1/n) Σ_{valid d} max_{r,c} m[r,c,d]`.
pub fn max_image_score<'t>(space: &LocalizationSpace<'t>) -> Result<Var<'t>> {
    if space.n_valid == 0 {
        return Err(Error::EmptyCaption);
    }
    let tape = space.values.tape();
    let maxima = tape.max_over_spatial(space.values)?;
    tape.mean_masked(maxima, &space.mask)
}

/// Grid-resolution attention map with an optional pixel-resolution copy.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `[rows, cols]`
    pub grid: Tensor,
    pub label: String,
    /// `[height, width]`
    pub upsampled: Option<Tensor>,
}

impl SaliencyMap {
    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    /// `(row, col)` of the first maximum of the grid in row-major order.
    pub fn grid_argmax(&self) -> (usize, usize) {
        let i = argmax_first(self.grid.data());
        (i / self.cols(), i % self.cols())
    }
}

/// Index of the first maximal element.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn slice_of(space: &LocalizationSpace<'_>, d: usize) -> Vec<f64> {
    let depth = space.mask.numel();
    space
        .values
        .with_value(|v| v.data().iter().skip(d).step_by(depth).copied().collect())
}

/// The `d`-th depth slice, detached from the tape.
pub fn token_saliency(space: &LocalizationSpace<'_>, d: usize) -> Result<SaliencyMap> {
    if d >= space.n_valid {
        return Err(Error::Index {
            index: d,
            limit: space.n_valid,
        });
    }
    Ok(SaliencyMap {
        grid: Tensor::new(vec![space.rows, space.cols], slice_of(space, d))?,
        label: format!("token {d}"),
        upsampled: None,
    })
}

/// Cellwise mean of the slices in `span`.
pub fn span_saliency_word_mode(space: &LocalizationSpace<'_>, span: Range<usize>) -> Result<SaliencyMap> {
    if span.is_empty() {
        return Err(Error::Span(format!("empty span {}..{}", span.start, span.end)));
    }
    if span.end > space.n_valid {
        return Err(Error::Span(format!(
            "span {}..{} exceeds {} valid tokens",
            span.start, span.end, space.n_valid
        )));
    }
    let mut acc = vec![0.0; space.rows * space.cols];
    for d in span.clone() {
        for (a, v) in acc.iter_mut().zip(slice_of(space, d)) {
            *a += v;
        }
    }
    let n = span.len() as f64;
    if span.len() > 1 {
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(SaliencyMap {
        grid: Tensor::new(vec![space.rows, space.cols], acc)?,
        label: format!("span {}..{}", span.start, span.end),
        upsampled: None,
    })
}

/// Bilinear resampling to `height × width`. Cell `(r, c)` covers pixels
/// `[r·H/R, (r+1)·H/R)` and its value sits at the footprint center. Samples
/// beyond the outermost centers mirror back into the grid, so a peak in a
/// border cell stays at that cell's center instead of spreading a plateau
/// to the image edge.
pub fn upsample_map(map: &SaliencyMap, height: usize, width: usize) -> Result<SaliencyMap> {
    let (rows, cols) = (map.rows(), map.cols());
    if height < rows || width < cols {
        return Err(Error::Config(format!(
            "cannot upsample a {rows}x{cols} map to {height}x{width}"
        )));
    }
    let coord = |p: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let last = (src - 1) as f64;
        let raw = (p as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        let x = if raw < 0.0 {
            (-raw).min(last)
        } else if raw > last {
            (2.0 * last - raw).max(0.0)
        } else {
            raw
        };
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    let g = map.grid.data();
    let at = |r: usize, c: usize| g[r * cols + c];
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (r0, r1, fy) = coord(y, rows, height);
        for x in 0..width {
            let (c0, c1, fx) = coord(x, cols, width);
            let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
            let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(SaliencyMap {
        upsampled: Some(Tensor::new(vec![height, width], out)?),
        ..map.clone()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
    pub threshold: f64,
}

impl SegmentationMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Keep pixels at or above the `quantile`-th quantile of the upsampled map.
///
/// The threshold is the value at sorted position `⌊q·n⌋`, so a constant map
/// yields an all-ones mask.
pub fn threshold_mask(map: &SaliencyMap, quantile: f64) -> Result<SegmentationMask> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Config(format!("mask quantile {quantile} outside (0, 1)")));
    }
    let up = map
        .upsampled
        .as_ref()
        .ok_or_else(|| Error::Config("threshold_mask needs an upsampled map".into()))?;
    let mut sorted = up.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let idx = ((quantile * n as f64).floor() as usize).min(n - 1);
    let threshold = sorted[idx];
    Ok(SegmentationMask {
        height: up.shape()[0],
        width: up.shape()[1],
        bits: up.data().iter().map(|&v| v >= threshold).collect(),
        threshold,
    })
}
