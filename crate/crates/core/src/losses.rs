//! Batch construction, the B×B score matrix and the two ranking losses.
//!
//! Row `i` of the score matrix is image `i`, column `j` is caption `j`; the
//! diagonal holds the positive pairs and every off-diagonal entry is an
//! impostor for both its row anchor and its column anchor.

use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, GroundedCaption};
use crate::encoders::{ModelVars, ParseMode};
use crate::error::{Error, Result};
use crate::localization::{build_localization_space, max_image_score};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BatchCaption {
    pub caption_id: u32,
    pub image_id: u32,
    pub tokens: Vec<u32>,
}

impl From<&GroundedCaption> for BatchCaption {
    fn from(c: &GroundedCaption) -> Self {
        BatchCaption {
            caption_id: c.caption_id,
            image_id: c.image_id,
            tokens: c.tokens.clone(),
        }
    }
}

/// `B` images and one positive caption for each, in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image_ids: Vec<u32>,
    pub images: Vec<Tensor>,
    pub captions: Vec<BatchCaption>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Build a batch from explicit record indices, drawing one caption per image.
    pub fn from_records(corpus: &Corpus, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mut seen = std::collections::HashSet::new();
        let mut batch = Batch {
            image_ids: Vec::with_capacity(indices.len()),
            images: Vec::with_capacity(indices.len()),
            captions: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let rec = corpus.records.get(i).ok_or(Error::Index {
                index: i,
                limit: corpus.len(),
            })?;
            if !seen.insert(rec.image_id) {
                return Err(Error::Config(format!("image {} appears twice in a batch", rec.image_id)));
            }
            let caption = rec
                .captions
                .choose(rng)
                .ok_or_else(|| Error::Annotation(format!("image {} has no captions", rec.image_id)))?;
            batch.image_ids.push(rec.image_id);
            batch.images.push(rec.scene.image.clone());
            batch.captions.push(caption.into());
        }
        Ok(batch)
    }
}

/// `B` distinct images drawn uniformly without replacement, each with one
/// uniformly drawn caption.
pub fn build_batch(corpus: &Corpus, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::BatchSize(0));
    }
    if corpus.len() < batch_size {
        return Err(Error::CorpusSize {
            available: corpus.len(),
            needed: batch_size,
        });
    }
    let picks = index::sample(rng, corpus.len(), batch_size).into_vec();
    Batch::from_records(corpus, &picks, rng)
}

/// `[B, B]` similarities; entry `(i, j)` scores image `i` against caption `j`.
#[derive(Clone, Debug)]
pub struct ScoreMatrix<'t> {
    pub values: Var<'t>,
    pub image_ids: Vec<u32>,
    pub caption_ids: Vec<u32>,
}

impl<'t> ScoreMatrix<'t> {
    pub fn size(&self) -> usize {
        self.image_ids.len()
    }

    /// Wrap a raw `[B, B]` variable, e.g. for testing the losses in isolation.
    pub fn from_var(values: Var<'t>) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::Rank {
                op: "score_matrix",
                expected: 2,
                shape,
            });
        }
        let ids: Vec<u32> = (0..shape[0] as u32).collect();
        Ok(ScoreMatrix {
            values,
            image_ids: ids.clone(),
            caption_ids: ids,
        })
    }
}

pub fn score_matrix<'t>(batch: &Batch, model: &ModelVars<'t>) -> Result<ScoreMatrix<'t>> {
    let tape = model.tape();
    let b = batch.len();
    if b == 0 || batch.captions.len() != b {
        return Err(Error::BatchSize(b));
    }
    let grids = batch
        .images
        .iter()
        .map(|img| model.image.encode(tape.constant(img.clone())))
        .collect::<Result<Vec<_>>>()?;
    let no_spans: [Range<usize>; 0] = [];
    let toks = batch
        .captions
        .iter()
        .map(|c| model.text.encode(&c.tokens, &no_spans, ParseMode::WordMode))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(b * b);
    for (i, grid) in grids.iter().enumerate() {
        for (j, tok) in toks.iter().enumerate() {
            let mut space = build_localization_space(grid, tok)?;
            space.provenance = Some((batch.image_ids[i], batch.captions[j].caption_id));
            entries.push(max_image_score(&space)?);
        }
    }
    let values = tape.concat(&entries)?.reshape(&[b, b])?;
    Ok(ScoreMatrix {
        values,
        image_ids: batch.image_ids.clone(),
        caption_ids: batch.captions.iter().map(|c| c.caption_id).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mining {
    /// Highest-scoring impostor in the batch.
    Hardest,
    /// Uniformly drawn impostor, seeded.
    Random(u64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: Mining,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.2,
            mining: Mining::Hardest,
        }
    }
}

/// Per-anchor impostor indices: `(caption for each image row, image for each caption column)`.
pub fn mine_impostors(scores: &Tensor, mining: Mining) -> (Vec<usize>, Vec<usize>) {
    let b = scores.shape()[0];
    let s = |i: usize, j: usize| scores.data()[i * b + j];
    match mining {
        Mining::Hardest => {
            let pick = |f: &dyn Fn(usize) -> f64, j: usize| {
                let mut best: Option<usize> = None;
                for i in (0..b).filter(|&i| i != j) {
                    if best.map_or(true, |k| f(i) > f(k)) {
                        best = Some(i);
                    }
                }
                best.expect("batch has at least two entries")
            };
            let rows = (0..b).map(|j| pick(&|i| s(j, i), j)).collect();
            let cols = (0..b).map(|j| pick(&|i| s(i, j), j)).collect();
            (rows, cols)
        }
        Mining::Random(seed) => {
            use rand::SeedableRng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |j: usize| {
                let k = rng.gen_range(0..b - 1);
                if k >= j {
                    k + 1
                } else {
                    k
                }
            };
            let rows = (0..b).map(&mut draw).collect();
            let cols = (0..b).map(&mut draw).collect();
            (rows, cols)
        }
    }
}

fn require_pairs(scores: &ScoreMatrix<'_>) -> Result<usize> {
    let b = scores.size();
    if b < 2 {
        return Err(Error::BatchSize(b));
    }
    Ok(b)
}

/// `(1/B) Σ_j [η + s(j, ĉ_j) − s(j, j)]₊ + [η + s(î_j, j) − s(j, j)]₊` with
/// impostors picked per [`Mining`] from the current values.
pub fn triplet_loss<'t>(scores: &ScoreMatrix<'t>, cfg: &TripletConfig) -> Result<Var<'t>> {
    let b = require_pairs(scores)?;
    if !(cfg.margin >= 0.0) {
        return Err(Error::Config(format!("margin {} must be nonnegative", cfg.margin)));
    }
    let (row_imp, col_imp) = scores.values.with_value(|v| mine_impostors(v, cfg.mining));
    let s = scores.values;
    let diag = s.gather((0..b).map(|j| j * b + j).collect(), &[b])?;
    let row = s.gather((0..b).map(|j| j * b + row_imp[j]).collect(), &[b])?;
    let col = s.gather((0..b).map(|j| col_imp[j] * b + j).collect(), &[b])?;
    let hinge = |imp: Var<'t>| imp.sub(diag).map(|d| d.add_scalar(cfg.margin).relu());
    Ok(hinge(row)?.add(hinge(col)?)?.sum().scale(1.0 / b as f64))
}

/// `(1/B) Σ_j [lse(s(j, ·)) − s(j, j)] + [lse(s(·, j)) − s(j, j)]`.
pub fn npair_loss<'t>(scores: &ScoreMatrix<'t>) -> Result<Var<'t>> {
    let b = require_pairs(scores)?;
    let s = scores.values;
    let tape = s.tape();
    let mut terms = Vec::with_capacity(2 * b);
    for j in 0..b {
        terms.push(s.gather((0..b).map(|i| j * b + i).collect(), &[b])?.log_sum_exp());
        terms.push(s.gather((0..b).map(|i| i * b + j).collect(), &[b])?.log_sum_exp());
    }
    let lse_total = tape.concat(&terms)?.sum();
    let diag_total = s.gather((0..b).map(|j| j * b + j).collect(), &[b])?.sum();
    Ok(lse_total.sub(diag_total.scale(2.0))?.scale(1.0 / b as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    NPair,
    Triplet(TripletConfig),
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::NPair => "npair",
            LossKind::Triplet(_) => "triplet",
        }
    }

    pub fn apply<'t>(&self, scores: &ScoreMatrix<'t>) -> Result<Var<'t>> {
        match self {
            LossKind::NPair => npair_loss(scores),
            LossKind::Triplet(cfg) => triplet_loss(scores, cfg),
        }
    }
}
