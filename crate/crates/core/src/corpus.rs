//! Synthetic grounded image–caption corpus.
//!
//! Each scene is a small RGB image over a cluttered background of 2×2
//! colored blocks, holding one to four solid objects (square, circle,
//! triangle, bar) in an eight-color palette. Captions are templated from the
//! objects with glue words in between; every noun phrase is recorded as a
//! token span together with the boxes of the objects it refers to.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tenfile;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Bar];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Bar => "bar",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }
}

/// Pixel box, half-open on both axes: `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Annotation(format!(
                "degenerate box ({x_min},{y_min})-({x_max},{y_max})"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn area(&self) -> u32 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn intersection(&self, other: &BoundingBox) -> u32 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w * h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_max as usize <= width && self.y_max as usize <= height
    }

    fn expanded(&self, by: u32) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.saturating_sub(by),
            y_min: self.y_min.saturating_sub(by),
            x_max: self.x_max + by,
            y_max: self.y_max + by,
        }
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl std::str::FromStr for BoundingBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Annotation(format!("bad box `{s}`")))?;
        if v.len() != 4 {
            return Err(Error::Annotation(format!("bad box `{s}`")));
        }
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[height, width, 3]` in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }
}

/// Token span `[start, end)` grounded to one or more boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseSpan {
    pub start: usize,
    pub end: usize,
    pub boxes: Vec<BoundingBox>,
}

impl PhraseSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundedCaption {
    pub caption_id: u32,
    pub image_id: u32,
    pub tokens: Vec<u32>,
    pub spans: Vec<PhraseSpan>,
}

impl GroundedCaption {
    pub fn span_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.spans.iter().map(PhraseSpan::range).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub image_id: u32,
    pub scene: Scene,
    pub captions: Vec<GroundedCaption>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn standard() -> Self {
        let mut words: Vec<String> = GLUE.iter().map(|s| s.to_string()).collect();
        words.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        words.extend(ShapeKind::ALL.iter().map(|s| s.word().to_string()));
        Vocab { words }
    }

    pub fn from_words(words: Vec<String>) -> Self {
        Vocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn expect(&self, word: &str) -> u32 {
        self.id(word).unwrap_or_else(|| panic!("`{word}` missing from vocabulary"))
    }
}

const GLUE: [&str; 18] = [
    "a", "the", "there", "is", "of", "picture", "image", "with", "and", "near", "beside", "above",
    "below", "next", "to", "small", "large", "shows",
];

/// Generation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    pub captions_per_image: usize,
    /// Target mean number of phrase spans per caption.
    pub mean_phrases: f64,
    pub max_phrases: usize,
    pub max_tokens: usize,
    /// Probability that a scene repeats an existing (color, shape) pair.
    pub duplicate_fraction: f64,
    /// Probability that a background block is filled with a palette color.
    pub clutter_density: f64,
    /// Side of the square background blocks, in pixels.
    pub clutter_block: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            image_size: 32,
            min_objects: 3,
            max_objects: 4,
            min_object_size: 8,
            max_object_size: 12,
            captions_per_image: 5,
            mean_phrases: 2.8,
            max_phrases: 3,
            max_tokens: 12,
            duplicate_fraction: 0.15,
            clutter_density: 1.0,
            clutter_block: 2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > 4 {
            return bad("at most 4 objects per scene".into());
        }
        if self.min_object_size < 3 || self.min_object_size > self.max_object_size {
            return bad("object size range invalid".into());
        }
        if self.max_object_size > self.image_size {
            return bad("objects larger than the image".into());
        }
        if self.captions_per_image == 0 || self.captions_per_image > 5 {
            return bad("captions per image must be in 1..=5".into());
        }
        if !(1.0..=self.max_phrases as f64).contains(&self.mean_phrases) {
            return bad(format!("mean phrases {} outside 1..={}", self.mean_phrases, self.max_phrases));
        }
        if self.max_phrases == 0 || self.max_phrases > 3 {
            return bad("max phrases must be in 1..=3".into());
        }
        // plainest layout: determiner, color, shape per mention plus connectors
        if self.max_tokens < 4 * self.max_phrases - 1 {
            return bad(format!("{} tokens cannot hold {} phrases", self.max_tokens, self.max_phrases));
        }
        if !(0.0..=1.0).contains(&self.duplicate_fraction) || !(0.0..=1.0).contains(&self.clutter_density) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.clutter_block == 0 {
            return bad("clutter blocks must be at least one pixel".into());
        }
        Ok(())
    }

    fn to_lines(&self) -> Vec<(String, String)> {
        vec![
            ("image_size".into(), self.image_size.to_string()),
            ("min_objects".into(), self.min_objects.to_string()),
            ("max_objects".into(), self.max_objects.to_string()),
            ("min_object_size".into(), self.min_object_size.to_string()),
            ("max_object_size".into(), self.max_object_size.to_string()),
            ("captions_per_image".into(), self.captions_per_image.to_string()),
            ("mean_phrases".into(), format!("{:?}", self.mean_phrases)),
            ("max_phrases".into(), self.max_phrases.to_string()),
            ("max_tokens".into(), self.max_tokens.to_string()),
            ("duplicate_fraction".into(), format!("{:?}", self.duplicate_fraction)),
            ("clutter_density".into(), format!("{:?}", self.clutter_density)),
            ("clutter_block".into(), self.clutter_block.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub vocab: Vocab,
    pub records: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_captions(&self) -> usize {
        self.records.iter().map(|r| r.captions.len()).sum()
    }

    pub fn captions(&self) -> impl Iterator<Item = &GroundedCaption> {
        self.records.iter().flat_map(|r| r.captions.iter())
    }

    pub fn find_caption(&self, caption_id: u32) -> Option<(&CorpusRecord, &GroundedCaption)> {
        self.records
            .iter()
            .find_map(|r| r.captions.iter().find(|c| c.caption_id == caption_id).map(|c| (r, c)))
    }

    fn with_records(&self, records: Vec<CorpusRecord>) -> Corpus {
        Corpus {
            config: self.config.clone(),
            seed: self.seed,
            vocab: self.vocab.clone(),
            records,
        }
    }
}

/// Pixel mask of a shape drawn in the `size × size` square at `(x0, y0)`.
/// Returns the covered pixels in row-major order.
pub fn shape_pixels(shape: ShapeKind, x0: usize, y0: usize, size: usize, horizontal: bool) -> Vec<(usize, usize)> {
    let s = size as f64;
    let mut px = Vec::new();
    for dy in 0..size {
        for dx in 0..size {
            let (cx, cy) = (dx as f64 + 0.5, dy as f64 + 0.5);
            let inside = match shape {
                ShapeKind::Square => true,
                ShapeKind::Circle => {
                    let r = s / 2.0;
                    (cx - r).powi(2) + (cy - r).powi(2) <= r * r
                }
                ShapeKind::Triangle => {
                    // apex at top center, base along the bottom edge
                    let half_width = (cy / s) * (s / 2.0);
                    (cx - s / 2.0).abs() <= half_width
                }
                ShapeKind::Bar => {
                    let thick = (size / 3).max(2) as f64;
                    let off = (s - thick) / 2.0;
                    let along = if horizontal { cy } else { cx };
                    along >= off && along < off + thick
                }
            };
            if inside {
                px.push((x0 + dx, y0 + dy));
            }
        }
    }
    px
}

/// Tight extent of a pixel set.
pub fn tight_box(pixels: &[(usize, usize)]) -> Option<BoundingBox> {
    let x_min = pixels.iter().map(|p| p.0).min()?;
    let x_max = pixels.iter().map(|p| p.0).max()? + 1;
    let y_min = pixels.iter().map(|p| p.1).min()?;
    let y_max = pixels.iter().map(|p| p.1).max()? + 1;
    Some(BoundingBox {
        x_min: x_min as u32,
        y_min: y_min as u32,
        x_max: x_max as u32,
        y_max: y_max as u32,
    })
}

/// Geometry needed to redraw an object; kept alongside the scene so the
/// stored box can be recomputed from the renderer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub horizontal: bool,
}

const PLACEMENT_RETRIES: usize = 100;
const LAYOUT_RETRIES: usize = 20;

/// Place every object in turn; `None` if one of them finds no free spot.
fn try_layout(
    cfg: &CorpusConfig,
    kinds: &[(ShapeKind, Color)],
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<SceneObject>, Vec<Placement>)> {
    let n = cfg.image_size;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(kinds.len());
    let mut placements = Vec::with_capacity(kinds.len());
    for &(shape, color) in kinds {
        let (bbox, placement) = (0..PLACEMENT_RETRIES).find_map(|_| {
            let size = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
            let horizontal = rng.gen_bool(0.5);
            let x0 = rng.gen_range(0..=n - size);
            let y0 = rng.gen_range(0..=n - size);
            let bbox = tight_box(&shape_pixels(shape, x0, y0, size, horizontal))?;
            let clear = objects.iter().all(|o| o.bbox.expanded(1).intersection(&bbox) == 0);
            clear.then_some((bbox, Placement { x0, y0, size, horizontal }))
        })?;
        objects.push(SceneObject { shape, color, bbox });
        placements.push(placement);
    }
    Some((objects, placements))
}

fn image_rng(seed: u64, image_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id as u64 + 1);
    rng
}

struct Referent {
    color: Option<Color>,
    shape: ShapeKind,
    size_word: Option<&'static str>,
    boxes: Vec<BoundingBox>,
    anchor: (f64, f64),
}

fn generate_record(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    seed: u64,
    image_id: u32,
    first_caption_id: u32,
) -> Result<(CorpusRecord, Vec<Placement>)> {
    let mut rng = image_rng(seed, image_id);
    let n = cfg.image_size;

    let needed = (cfg.mean_phrases.ceil() as usize).min(cfg.max_objects);
    let lo = cfg.min_objects.max(needed);
    let n_objects = rng.gen_range(lo..=cfg.max_objects);
    let duplicate = n_objects > needed && rng.gen_bool(cfg.duplicate_fraction);

    let mut image = Tensor::zeros(&[n, n, 3]);
    let cb = cfg.clutter_block;
    for by in (0..n).step_by(cb) {
        for bx in (0..n).step_by(cb) {
            if rng.gen_bool(cfg.clutter_density) {
                let rgb = Color::ALL.choose(&mut rng).unwrap().rgb();
                for y in by..(by + cb).min(n) {
                    for x in bx..(bx + cb).min(n) {
                        for (c, v) in rgb.iter().enumerate() {
                            image.set(&[y, x, c], *v);
                        }
                    }
                }
            }
        }
    }

    let mut kinds: Vec<(ShapeKind, Color)> = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let kind = if duplicate && k == n_objects - 1 {
            kinds[0]
        } else {
            loop {
                let s = *ShapeKind::ALL.choose(&mut rng).unwrap();
                let c = *Color::ALL.choose(&mut rng).unwrap();
                if !kinds.contains(&(s, c)) {
                    break (s, c);
                }
            }
        };
        kinds.push(kind);
    }

    let (objects, placements) = (0..LAYOUT_RETRIES)
        .find_map(|_| try_layout(cfg, &kinds, &mut rng))
        .ok_or_else(|| {
            Error::Generation(format!(
                "image {image_id}: could not place {n_objects} objects without overlap"
            ))
        })?;
    for (o, p) in objects.iter().zip(&placements) {
        let rgb = o.color.rgb();
        for (x, y) in shape_pixels(o.shape, p.x0, p.y0, p.size, p.horizontal) {
            for (c, v) in rgb.iter().enumerate() {
                image.set(&[y, x, c], *v);
            }
        }
    }

    let mut captions = Vec::with_capacity(cfg.captions_per_image);
    for k in 0..cfg.captions_per_image {
        let caption = generate_caption(cfg, vocab, &objects, &mut rng, image_id, first_caption_id + k as u32);
        captions.push(caption);
    }

    Ok((
        CorpusRecord {
            image_id,
            scene: Scene { image, objects },
            captions,
        },
        placements,
    ))
}

fn referents(objects: &[SceneObject], rng: &mut ChaCha8Rng) -> Vec<Referent> {
    // group identical (color, shape) objects
    let mut groups: BTreeMap<(ShapeKind, Color), Vec<&SceneObject>> = BTreeMap::new();
    for o in objects {
        groups.entry((o.shape, o.color)).or_default().push(o);
    }
    let mut out: Vec<Referent> = Vec::new();
    for ((shape, color), members) in groups {
        let boxes: Vec<BoundingBox> = members.iter().map(|o| o.bbox).collect();
        let b = boxes[0];
        let anchor = (
            (b.x_min + b.x_max) as f64 / 2.0,
            (b.y_min + b.y_max) as f64 / 2.0,
        );
        let roll: f64 = rng.gen();
        let same_shape: Vec<BoundingBox> = objects.iter().filter(|o| o.shape == shape).map(|o| o.bbox).collect();
        if roll < 0.15 {
            // bare shape word: grounded to every object of that shape
            out.push(Referent {
                color: None,
                shape,
                size_word: None,
                boxes: same_shape,
                anchor,
            });
        } else {
            let size_word = if roll > 0.8 && members.len() == 1 {
                Some(if b.area() >= 50 { "large" } else { "small" })
            } else {
                None
            };
            out.push(Referent {
                color: Some(color),
                shape,
                size_word,
                boxes,
                anchor,
            });
        }
    }
    out
}

fn generate_caption(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    objects: &[SceneObject],
    rng: &mut ChaCha8Rng,
    image_id: u32,
    caption_id: u32,
) -> GroundedCaption {
    let mut pool = referents(objects, rng);
    pool.shuffle(rng);
    // bare-shape referents may duplicate each other's shape; keep the first
    let mut seen_bare = Vec::new();
    pool.retain(|r| {
        if r.color.is_none() {
            if seen_bare.contains(&r.shape) {
                return false;
            }
            seen_bare.push(r.shape);
        }
        true
    });

    let lo = cfg.mean_phrases.floor();
    let k_target = if rng.gen_bool(cfg.mean_phrases - lo) { lo as usize + 1 } else { lo as usize };
    let k = k_target.clamp(1, cfg.max_phrases).min(pool.len());
    let mentions: Vec<&Referent> = pool.iter().take(k).collect();

    let phrase_words = |r: &Referent, allow_size: bool| -> Vec<&'static str> {
        let mut w = Vec::new();
        if let (Some(s), true) = (r.size_word, allow_size) {
            w.push(s);
        }
        if let Some(c) = r.color {
            w.push(c.word());
        }
        w.push(r.shape.word());
        w
    };
    let connector = |a: &Referent, b: &Referent, rng: &mut ChaCha8Rng| -> &'static str {
        let (dx, dy) = (b.anchor.0 - a.anchor.0, b.anchor.1 - a.anchor.1);
        match rng.gen_range(0..3) {
            0 if dy.abs() > dx.abs() => {
                if dy > 0.0 {
                    "above"
                } else {
                    "below"
                }
            }
            0 | 1 => ["and", "with"][rng.gen_range(0..2)],
            _ => ["near", "beside"][rng.gen_range(0..2)],
        }
    };
    let prefixes: [&[&str]; 4] = [&[], &["there", "is"], &["a", "picture", "of"], &["the", "image", "shows"]];
    let prefix = prefixes[rng.gen_range(0..prefixes.len())];
    let connectors: Vec<&str> = mentions.windows(2).map(|w| connector(w[0], w[1], rng)).collect();
    let dets: Vec<&str> = mentions.iter().map(|_| if rng.gen_bool(0.8) { "a" } else { "the" }).collect();

    // try the richest layout first, then drop sizes, then drop the prefix
    for (allow_size, use_prefix) in [(true, true), (false, true), (true, false), (false, false)] {
        let mut words: Vec<&str> = Vec::new();
        let mut spans = Vec::new();
        if use_prefix {
            words.extend(prefix);
        }
        for (i, r) in mentions.iter().enumerate() {
            if i > 0 {
                words.push(connectors[i - 1]);
            }
            words.push(dets[i]);
            let start = words.len();
            words.extend(phrase_words(r, allow_size));
            spans.push(PhraseSpan {
                start,
                end: words.len(),
                boxes: r.boxes.clone(),
            });
        }
        if words.len() <= cfg.max_tokens {
            return GroundedCaption {
                caption_id,
                image_id,
                tokens: words.iter().map(|w| vocab.expect(w)).collect(),
                spans,
            };
        }
    }
    unreachable!("validated configuration always fits the plainest layout")
}

/// Generate `num_images` scenes with their captions. Deterministic in `seed`.
pub fn generate_corpus(num_images: usize, seed: u64, config: &CorpusConfig) -> Result<Corpus> {
    generate_corpus_with_placements(num_images, seed, config).map(|(c, _)| c)
}

/// Like [`generate_corpus`], also returning the drawing parameters of every
/// object so that boxes can be re-derived from the renderer.
pub fn generate_corpus_with_placements(
    num_images: usize,
    seed: u64,
    config: &CorpusConfig,
) -> Result<(Corpus, Vec<Vec<Placement>>)> {
    if num_images == 0 {
        return Err(Error::Config("corpus needs at least one image".into()));
    }
    config.validate()?;
    let vocab = Vocab::standard();
    let per_image = config.captions_per_image as u32;
    let results: Vec<Result<(CorpusRecord, Vec<Placement>)>> = {
        use rayon::prelude::*;
        (0..num_images as u32)
            .into_par_iter()
            .map(|id| generate_record(config, &vocab, seed, id, id * per_image))
            .collect()
    };
    let mut records = Vec::with_capacity(num_images);
    let mut placements = Vec::with_capacity(num_images);
    for r in results {
        let (rec, pl) = r?;
        records.push(rec);
        placements.push(pl);
    }
    Ok((
        Corpus {
            config: config.clone(),
            seed,
            vocab,
            records,
        },
        placements,
    ))
}

/// Partition by image into train/val/test. Sizes are `round(f·n)` for the
/// first two parts; the remainder goes to test.
pub fn split(corpus: &Corpus, fractions: [f64; 3], seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = corpus.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "split {fractions:?} of {n} images leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        corpus.with_records(idx.iter().map(|&i| corpus.records[i].clone()).collect())
    };
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}

fn objects_tensor(objects: &[SceneObject]) -> Tensor {
    let mut data = Vec::with_capacity(objects.len() * 6);
    for o in objects {
        let shape = ShapeKind::ALL.iter().position(|s| *s == o.shape).unwrap();
        let color = Color::ALL.iter().position(|c| *c == o.color).unwrap();
        data.extend([
            shape as f64,
            color as f64,
            o.bbox.x_min as f64,
            o.bbox.y_min as f64,
            o.bbox.x_max as f64,
            o.bbox.y_max as f64,
        ]);
    }
    if objects.is_empty() {
        return Tensor::zeros(&[1, 6]).reshaped(&[6]).unwrap();
    }
    Tensor::new(vec![objects.len(), 6], data).unwrap()
}

fn objects_from_tensor(t: &Tensor, path: &Path) -> Result<Vec<SceneObject>> {
    let corrupt = |reason: &str| Error::Corruption {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if t.rank() == 1 {
        return Ok(Vec::new());
    }
    if t.rank() != 2 || t.shape()[1] != 6 {
        return Err(corrupt("object table has the wrong shape"));
    }
    t.data()
        .chunks(6)
        .map(|row| {
            let shape = *ShapeKind::ALL.get(row[0] as usize).ok_or_else(|| corrupt("bad shape code"))?;
            let color = *Color::ALL.get(row[1] as usize).ok_or_else(|| corrupt("bad color code"))?;
            let bbox = BoundingBox::new(row[2] as u32, row[3] as u32, row[4] as u32, row[5] as u32)
                .map_err(|_| corrupt("degenerate object box"))?;
            Ok(SceneObject { shape, color, bbox })
        })
        .collect()
}

fn format_annotation(c: &GroundedCaption) -> String {
    let tokens: Vec<String> = c.tokens.iter().map(u32::to_string).collect();
    let spans: Vec<String> = c
        .spans
        .iter()
        .map(|s| {
            let boxes: Vec<String> = s.boxes.iter().map(BoundingBox::to_string).collect();
            format!("{}:{}:{}", s.start, s.end, boxes.join(";"))
        })
        .collect();
    format!("{}\t{}\t{}\t{}", c.image_id, c.caption_id, tokens.join(" "), spans.join(" "))
}

fn parse_annotation(line: &str, lineno: usize) -> Result<GroundedCaption> {
    let bad = |what: &str| Error::Annotation(format!("annotations.txt line {lineno}: {what}"));
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(bad("expected 4 tab-separated fields"));
    }
    let image_id = fields[0].parse().map_err(|_| bad("bad image id"))?;
    let caption_id = fields[1].parse().map_err(|_| bad("bad caption id"))?;
    let tokens = fields[2]
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| bad("bad token id")))
        .collect::<Result<Vec<_>>>()?;
    let spans = fields[3]
        .split_whitespace()
        .map(|s| {
            let mut parts = s.splitn(3, ':');
            let start = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad("bad span start"))?;
            let end = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad("bad span end"))?;
            let boxes = parts
                .next()
                .ok_or_else(|| bad("span without boxes"))?
                .split(';')
                .map(str::parse)
                .collect::<Result<Vec<BoundingBox>>>()?;
            Ok(PhraseSpan { start, end, boxes })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundedCaption {
        caption_id,
        image_id,
        tokens,
        spans,
    })
}

/// Write the corpus directory: `images/{id}.ten`, `annotations.txt`,
/// `vocab.txt` and `manifest.txt`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for r in &corpus.records {
        let objects = objects_tensor(&r.scene.objects);
        tenfile::write(
            &images.join(format!("{}.ten", r.image_id)),
            &[("image", &r.scene.image), ("objects", &objects)],
        )?;
    }
    let mut ann = String::new();
    for c in corpus.captions() {
        ann.push_str(&format_annotation(c));
        ann.push('\n');
    }
    write_text(&dir.join("annotations.txt"), &ann)?;
    let mut vocab = corpus.vocab.words().join("\n");
    vocab.push('\n');
    write_text(&dir.join("vocab.txt"), &vocab)?;
    write_text(&dir.join("manifest.txt"), &manifest_text(corpus))?;
    Ok(())
}

fn manifest_text(corpus: &Corpus) -> String {
    let mut lines = vec![
        format!("schema_version={SCHEMA_VERSION}"),
        format!("seed={}", corpus.seed),
        format!("images={}", corpus.len()),
        format!("captions={}", corpus.num_captions()),
        format!("vocab_size={}", corpus.vocab.len()),
    ];
    let ids: Vec<String> = corpus.records.iter().map(|r| r.image_id.to_string()).collect();
    lines.push(format!("image_ids={}", ids.join(",")));
    for (k, v) in corpus.config.to_lines() {
        lines.push(format!("{k}={v}"));
    }
    lines.join("\n") + "\n"
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.txt");
    let manifest: BTreeMap<String, String> = read_text(&manifest_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("manifest line `{l}` is not key=value")))
        })
        .collect::<Result<_>>()?;
    let get = |k: &str| {
        manifest
            .get(k)
            .ok_or_else(|| Error::Format(format!("manifest missing `{k}`")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("manifest `{k}` is not a number")))
    };
    let version = num("schema_version")? as u32;
    if version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "corpus schema version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| Error::Format("manifest seed is not an integer".into()))?;
    let config = CorpusConfig {
        image_size: num("image_size")? as usize,
        min_objects: num("min_objects")? as usize,
        max_objects: num("max_objects")? as usize,
        min_object_size: num("min_object_size")? as usize,
        max_object_size: num("max_object_size")? as usize,
        captions_per_image: num("captions_per_image")? as usize,
        mean_phrases: num("mean_phrases")?,
        max_phrases: num("max_phrases")? as usize,
        max_tokens: num("max_tokens")? as usize,
        duplicate_fraction: num("duplicate_fraction")?,
        clutter_density: num("clutter_density")?,
        clutter_block: num("clutter_block")? as usize,
    };
    let ids: Vec<u32> = get("image_ids")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Format("bad image id in manifest".into())))
        .collect::<Result<_>>()?;

    let vocab = Vocab::from_words(read_text(&dir.join("vocab.txt"))?.lines().map(str::to_string).collect());

    let mut by_image: BTreeMap<u32, Vec<GroundedCaption>> = BTreeMap::new();
    for (i, line) in read_text(&dir.join("annotations.txt"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c = parse_annotation(line, i + 1)?;
        if let Some(&bad) = c.tokens.iter().find(|&&t| t as usize >= vocab.len()) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: vocab.len(),
            });
        }
        by_image.entry(c.image_id).or_default().push(c);
    }

    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let path = dir.join("images").join(format!("{id}.ten"));
        let tensors = tenfile::read(&path)?;
        let image = tenfile::find(&tensors, "image", &path)?.clone();
        if image.rank() != 3 || image.shape()[2] != 3 {
            return Err(Error::Corruption {
                path,
                reason: format!("image tensor has shape {:?}", image.shape()),
            });
        }
        let objects = objects_from_tensor(tenfile::find(&tensors, "objects", &path)?, &path)?;
        let captions = by_image.remove(&id).unwrap_or_default();
        if captions.is_empty() {
            return Err(Error::Annotation(format!("image {id} has no captions")));
        }
        records.push(CorpusRecord {
            image_id: id,
            scene: Scene { image, objects },
            captions,
        });
    }
    if let Some((&orphan, _)) = by_image.iter().next() {
        return Err(Error::Annotation(format!("captions reference unknown image {orphan}")));
    }
    Ok(Corpus {
        config,
        seed,
        vocab,
        records,
    })
}

/// SHA-256 over every file of a saved corpus, in a fixed order.
pub fn corpus_checksum(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut files = vec![
        dir.join("manifest.txt"),
        dir.join("vocab.txt"),
        dir.join("annotations.txt"),
    ];
    let mut images: Vec<_> = std::fs::read_dir(dir.join("images"))
        .map_err(|e| Error::io(dir.join("images"), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    images.sort();
    files.extend(images);
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        hasher.update(f.file_name().unwrap().to_string_lossy().as_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_covers_templates() {
        let v = Vocab::standard();
        assert_eq!(v.len(), 30);
        for w in ["a", "red", "bar", "there", "above"] {
            assert!(v.id(w).is_some(), "{w}");
        }
    }

    #[test]
    fn box_geometry() {
        let a = BoundingBox::new(0, 0, 4, 4).unwrap();
        let b = BoundingBox::new(2, 2, 6, 6).unwrap();
        assert_eq!(a.intersection(&b), 4);
        assert!((a.iou(&b) - 4.0 / 28.0).abs() < 1e-12);
        assert!(a.contains(3, 3) && !a.contains(4, 0));
        assert!(BoundingBox::new(3, 0, 3, 1).is_err());
        assert_eq!("1,2,3,4".parse::<BoundingBox>().unwrap(), BoundingBox::new(1, 2, 3, 4).unwrap());
    }

    #[test]
    fn one_object_scenes_have_one_phrase() {
        let cfg = CorpusConfig {
            min_objects: 1,
            max_objects: 1,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(40, 3, &cfg).unwrap();
        for c in corpus.captions() {
            assert_eq!(c.spans.len(), 1);
        }
    }

    #[test]
    fn scene_invariants() {
        let corpus = generate_corpus(60, 17, &CorpusConfig::default()).unwrap();
        let mut multi_box = 0;
        for r in &corpus.records {
            assert!((1..=4).contains(&r.scene.objects.len()));
            for (i, a) in r.scene.objects.iter().enumerate() {
                assert!(a.bbox.fits(32, 32));
                for b in &r.scene.objects[i + 1..] {
                    assert!(a.bbox.iou(&b.bbox) <= 0.1);
                }
            }
            for c in &r.captions {
                assert!(!c.tokens.is_empty() && c.tokens.len() <= 12);
                assert!(c.tokens.iter().all(|&t| (t as usize) < corpus.vocab.len()));
                for s in &c.spans {
                    assert!(s.start < s.end && s.end <= c.tokens.len());
                    assert!(!s.boxes.is_empty());
                    multi_box += (s.boxes.len() > 1) as usize;
                }
            }
        }
        assert!(multi_box > 0, "no multi-box phrases generated");
    }

    #[test]
    fn infeasible_config_fails_after_retries() {
        let cfg = CorpusConfig {
            min_objects: 4,
            max_objects: 4,
            min_object_size: 15,
            max_object_size: 16,
            ..CorpusConfig::default()
        };
        assert!(matches!(generate_corpus(5, 1, &cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn split_sizes_and_errors() {
        let corpus = generate_corpus(100, 5, &CorpusConfig::default()).unwrap();
        let (a, b, c) = split(&corpus, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        assert!(matches!(split(&corpus, [1.0, 0.0, 0.0], 9), Err(Error::Config(_))));
        assert!(matches!(split(&corpus, [0.5, 0.2, 0.2], 9), Err(Error::Config(_))));
    }
}
