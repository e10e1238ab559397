//! Pointing game, its random and center baselines, and Recall@K retrieval.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{BoundingBox, Corpus, CorpusRecord};
use crate::encoders::{FeatureGrid, Model, ParseMode, TokenMatrix};
use crate::error::{Error, Result};
use crate::localization::{
    argmax_first, build_localization_space, span_saliency_word_mode, token_saliency, upsample_map, SaliencyMap,
};
use crate::tensor::{matmul_raw, transpose_raw, Tape, Tensor};

/// One grounded phrase to be localized.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundQuery {
    pub caption_id: u32,
    pub span_index: usize,
    /// `(height, width)` of the source image.
    pub image_size: (usize, usize),
    pub boxes: Vec<BoundingBox>,
}

/// Every phrase span of every caption, in corpus order.
pub fn queries(corpus: &Corpus) -> Vec<GroundQuery> {
    corpus
        .records
        .iter()
        .flat_map(|r| {
            r.captions.iter().flat_map(move |c| {
                c.spans.iter().enumerate().map(move |(k, s)| GroundQuery {
                    caption_id: c.caption_id,
                    span_index: k,
                    image_size: r.scene.size(),
                    boxes: s.boxes.clone(),
                })
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointingOutcome {
    /// `(x, y)` of the chosen pixel.
    pub pixel: (usize, usize),
    /// First box containing the pixel, if any.
    pub matched_box: Option<usize>,
}

impl PointingOutcome {
    pub fn is_hit(&self) -> bool {
        self.matched_box.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointingRecord {
    pub caption_id: u32,
    pub span_index: usize,
    pub span_len: usize,
    pub outcome: PointingOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointingResult {
    /// Per-query outcomes. Monte Carlo baselines leave this empty and only
    /// fill the counters.
    pub records: Vec<PointingRecord>,
    pub hits: usize,
    pub total: usize,
}

impl PointingResult {
    fn from_records(records: Vec<PointingRecord>) -> Self {
        let hits = records.iter().filter(|r| r.outcome.is_hit()).count();
        let total = records.len();
        PointingResult { records, hits, total }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            return f64::NAN;
        }
        self.hits as f64 / self.total as f64
    }

    /// Binomial standard error of the accuracy at hit rate `p`.
    pub fn sigma_at(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.total as f64).sqrt()
    }

    /// One line per query: caption id, span, x, y, hit|miss.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.caption_id,
                r.span_index,
                r.outcome.pixel.0,
                r.outcome.pixel.1,
                if r.outcome.is_hit() { "hit" } else { "miss" }
            );
        }
        out
    }
}

fn locate(x: usize, y: usize, boxes: &[BoundingBox]) -> PointingOutcome {
    PointingOutcome {
        pixel: (x, y),
        matched_box: boxes.iter().position(|b| b.contains(x as u32, y as u32)),
    }
}

/// Hit iff the first maximal pixel of the upsampled map lies in any box.
pub fn pointing_query(map: &SaliencyMap, boxes: &[BoundingBox]) -> Result<PointingOutcome> {
    if boxes.is_empty() {
        return Err(Error::Annotation("query phrase has no boxes".into()));
    }
    let up = map
        .upsampled
        .as_ref()
        .ok_or_else(|| Error::Config("pointing needs an upsampled map".into()))?;
    let w = up.shape()[1];
    let i = argmax_first(up.data());
    Ok(locate(i % w, i / w, boxes))
}

/// Attention map for span `k` of a caption under the given parse mode.
///
/// Word mode averages the per-token maps over the span. Phrase mode re-encodes
/// the caption with only that span collapsed to one averaged input, then
/// reads the collapsed row.
pub fn span_map(
    model: &Model,
    features: &Tensor,
    source_size: (usize, usize),
    tokens: &[u32],
    span: Range<usize>,
    mode: ParseMode,
) -> Result<SaliencyMap> {
    if span.is_empty() || span.end > tokens.len() {
        return Err(Error::Annotation(format!(
            "span {}..{} outside caption of {} tokens",
            span.start,
            span.end,
            tokens.len()
        )));
    }
    let tape = Tape::new();
    let grid = FeatureGrid::constant(&tape, features.clone(), source_size)?;
    let map = match mode {
        ParseMode::WordMode => {
            let (vals, n) = model.encode_tokens_detached(tokens, &[], mode)?;
            let space = build_localization_space(&grid, &TokenMatrix::constant(&tape, vals, n)?)?;
            span_saliency_word_mode(&space, span)?
        }
        ParseMode::PhraseMode => {
            let (vals, n) = model.encode_tokens_detached(tokens, std::slice::from_ref(&span), mode)?;
            let space = build_localization_space(&grid, &TokenMatrix::constant(&tape, vals, n)?)?;
            let mut m = token_saliency(&space, span.start)?;
            m.label = format!("phrase {}..{}", span.start, span.end);
            m
        }
    };
    upsample_map(&map, source_size.0, source_size.1)
}

fn point_record(model: &Model, record: &CorpusRecord, mode: ParseMode) -> Result<Vec<PointingRecord>> {
    let features = model.encode_image_detached(&record.scene.image)?;
    let size = record.scene.size();
    let mut out = Vec::new();
    for c in &record.captions {
        for (k, s) in c.spans.iter().enumerate() {
            let map = span_map(model, &features, size, &c.tokens, s.range(), mode)?;
            out.push(PointingRecord {
                caption_id: c.caption_id,
                span_index: k,
                span_len: s.end - s.start,
                outcome: pointing_query(&map, &s.boxes)?,
            });
        }
    }
    Ok(out)
}

/// One query per annotated phrase span, evaluated in parallel over images.
pub fn pointing_accuracy(model: &Model, corpus: &Corpus, mode: ParseMode) -> Result<PointingResult> {
    let per_image = corpus
        .records
        .par_iter()
        .map(|r| point_record(model, r, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointingResult::from_records(per_image.into_iter().flatten().collect()))
}

/// Point at pixel `(⌊W/2⌋, ⌊H/2⌋)` of every image.
pub fn center_baseline(queries: &[GroundQuery]) -> PointingResult {
    PointingResult::from_records(
        queries
            .iter()
            .map(|q| PointingRecord {
                caption_id: q.caption_id,
                span_index: q.span_index,
                span_len: 0,
                outcome: locate(q.image_size.1 / 2, q.image_size.0 / 2, &q.boxes),
            })
            .collect(),
    )
}

/// Point at `trials` uniformly random pixels per query.
pub fn random_baseline(queries: &[GroundQuery], trials: usize, seed: u64) -> PointingResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for q in queries {
        for _ in 0..trials {
            let x = rng.gen_range(0..q.image_size.1);
            let y = rng.gen_range(0..q.image_size.0);
            hits += locate(x, y, &q.boxes).is_hit() as usize;
        }
    }
    PointingResult {
        records: Vec::new(),
        hits,
        total: queries.len() * trials,
    }
}

/// Expected random-baseline hit rate: mean covered-area fraction per query.
pub fn random_baseline_expectation(queries: &[GroundQuery]) -> f64 {
    let total: f64 = queries
        .iter()
        .map(|q| {
            let (h, w) = q.image_size;
            let covered = (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| q.boxes.iter().any(|b| b.contains(x as u32, y as u32)))
                .count();
            covered as f64 / (h * w) as f64
        })
        .sum();
    total / queries.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ImageToCaption,
    CaptionToImage,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" | "image-to-caption" => Ok(Direction::ImageToCaption),
            "t2i" | "caption-to-image" => Ok(Direction::CaptionToImage),
            other => Err(Error::Config(format!("unknown retrieval direction `{other}`"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::ImageToCaption => "image-to-caption",
            Direction::CaptionToImage => "caption-to-image",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub direction: Direction,
    /// 1-based rank of the best-placed correct candidate, per query.
    pub ranks: Vec<usize>,
    pub ks: Vec<usize>,
    /// `R@K` for each entry of `ks`.
    pub recalls: Vec<f64>,
}

impl RetrievalResult {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }
}

/// Similarities of every image against every caption: `[images, captions]`.
pub fn score_table(model: &Model, records: &[CorpusRecord]) -> Result<Tensor> {
    let captions: Vec<(Tensor, usize)> = records
        .iter()
        .flat_map(|r| r.captions.iter())
        .map(|c| model.encode_tokens_detached(&c.tokens, &[], ParseMode::WordMode))
        .collect::<Result<_>>()?;
    let rows = records
        .par_iter()
        .map(|r| {
            let grid = model.encode_image_detached(&r.scene.image)?;
            Ok(captions.iter().map(|(t, n)| raw_score(&grid, t, *n)).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![records.len(), captions.len()], rows.concat())
}

/// MaxImage score computed directly on detached tensors.
pub fn raw_score(grid: &Tensor, tokens: &Tensor, n_valid: usize) -> f64 {
    let dim = tokens.shape()[1];
    let regions = grid.numel() / dim;
    let tok_t = transpose_raw(&tokens.data()[..n_valid * dim], n_valid, dim);
    let m = matmul_raw(grid.data(), &tok_t, regions, dim, n_valid);
    let mut total = 0.0;
    for d in 0..n_valid {
        total += m.iter().skip(d).step_by(n_valid).copied().fold(f64::NEG_INFINITY, f64::max);
    }
    total / n_valid as f64
}

/// Recall@K from a precomputed `[images, captions]` table. `caption_owner[j]`
/// is the row index of caption `j`'s source image. Ties are broken by
/// candidate index.
pub fn recall_from_scores(
    scores: &Tensor,
    caption_owner: &[usize],
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalResult> {
    let (n_img, n_cap) = (scores.shape()[0], scores.shape()[1]);
    if caption_owner.len() != n_cap {
        return Err(Error::Dimension {
            op: "recall_at_k",
            lhs: scores.shape().to_vec(),
            rhs: vec![caption_owner.len()],
        });
    }
    let candidates = match direction {
        Direction::ImageToCaption => n_cap,
        Direction::CaptionToImage => n_img,
    };
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > candidates) {
        return Err(Error::Config(format!("K={k} outside 1..={candidates} candidates")));
    }
    let s = |i: usize, j: usize| scores.data()[i * n_cap + j];
    let rank_of = |cand_scores: &dyn Fn(usize) -> f64, correct: &dyn Fn(usize) -> bool| {
        let mut order: Vec<usize> = (0..candidates).collect();
        order.sort_by(|&a, &b| cand_scores(b).total_cmp(&cand_scores(a)).then(a.cmp(&b)));
        order.iter().position(|&c| correct(c)).map(|p| p + 1)
    };
    let ranks: Vec<usize> = match direction {
        Direction::CaptionToImage => (0..n_cap)
            .map(|j| rank_of(&|i| s(i, j), &|i| i == caption_owner[j]))
            .collect::<Option<_>>(),
        Direction::ImageToCaption => (0..n_img)
            .map(|i| rank_of(&|j| s(i, j), &|j| caption_owner[j] == i))
            .collect::<Option<_>>(),
    }
    .ok_or_else(|| Error::Annotation("a query has no correct candidate".into()))?;
    let recalls = ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
        .collect();
    Ok(RetrievalResult {
        direction,
        ranks,
        ks: ks.to_vec(),
        recalls,
    })
}

/// Recall@K on a single fold of images and all of their captions.
pub fn recall_at_k(model: &Model, fold: &[CorpusRecord], ks: &[usize], direction: Direction) -> Result<RetrievalResult> {
    let scores = score_table(model, fold)?;
    let owner: Vec<usize> = fold
        .iter()
        .enumerate()
        .flat_map(|(i, r)| std::iter::repeat(i).take(r.captions.len()))
        .collect();
    recall_from_scores(&scores, &owner, ks, direction)
}

/// Mean Recall@K over up to `max_folds` disjoint consecutive folds of
/// `fold_size` images. Ranks from all folds are concatenated.
pub fn recall_over_folds(
    model: &Model,
    corpus: &Corpus,
    fold_size: usize,
    max_folds: usize,
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalResult> {
    let folds = (corpus.len() / fold_size.max(1)).min(max_folds);
    if fold_size == 0 || folds == 0 {
        return Err(Error::CorpusSize {
            available: corpus.len(),
            needed: fold_size,
        });
    }
    let mut ranks = Vec::new();
    let mut sums = vec![0.0; ks.len()];
    for f in 0..folds {
        let r = recall_at_k(model, &corpus.records[f * fold_size..(f + 1) * fold_size], ks, direction)?;
        for (s, v) in sums.iter_mut().zip(&r.recalls) {
            *s += v;
        }
        ranks.extend(r.ranks);
    }
    Ok(RetrievalResult {
        direction,
        ranks,
        ks: ks.to_vec(),
        recalls: sums.iter().map(|s| s / folds as f64).collect(),
    })
}
