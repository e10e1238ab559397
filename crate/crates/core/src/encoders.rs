//! Trainable image and caption branches.
//!
//! The image branch is a small strided CNN followed by a linear projection to
//! the joint dimension `L`; its output is a [`FeatureGrid`] of region vectors.
//! The caption branch embeds token ids and runs a single-layer GRU, producing
//! one `L`-dimensional row per token in a [`TokenMatrix`].

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Zero padding added on every side.
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub layers: Vec<ConvSpec>,
    pub embed_dim: usize,
}

impl ImageEncoderConfig {
    /// 32×32×3 → conv(4, /2) → 15×15×16 → conv(3, /2) → 7×7×32 → linear to 32.
    pub fn desk() -> Self {
        ImageEncoderConfig {
            height: 32,
            width: 32,
            in_channels: 3,
            layers: vec![
                ConvSpec {
                    in_channels: 3,
                    out_channels: 16,
                    kernel: 4,
                    stride: 2,
                    padding: 0,
                },
                ConvSpec {
                    in_channels: 16,
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                    padding: 0,
                },
            ],
            embed_dim: 32,
        }
    }

    /// Spatial size after every layer, or a configuration error when a
    /// stride does not tile its input exactly.
    pub fn spatial_schedule(&self) -> Result<Vec<(usize, usize)>> {
        if self.layers.is_empty() {
            return Err(Error::Config("image encoder needs at least one conv layer".into()));
        }
        let mut dims = vec![(self.height, self.width)];
        let mut channels = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            let (h, w) = *dims.last().unwrap();
            let (h, w) = (h + 2 * l.padding, w + 2 * l.padding);
            if l.in_channels != channels {
                return Err(Error::Config(format!(
                    "conv layer {i} expects {} input channels, previous stage gives {channels}",
                    l.in_channels
                )));
            }
            if l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(Error::Config(format!("conv layer {i} has a zero-sized parameter")));
            }
            for (side, name) in [(h, "height"), (w, "width")] {
                if side < l.kernel || (side - l.kernel) % l.stride != 0 {
                    return Err(Error::Config(format!(
                        "conv layer {i}: {name} {side} is not tiled by kernel {} stride {}",
                        l.kernel, l.stride
                    )));
                }
            }
            dims.push(((h - l.kernel) / l.stride + 1, (w - l.kernel) / l.stride + 1));
            channels = l.out_channels;
        }
        Ok(dims)
    }

    pub fn grid_dims(&self) -> Result<(usize, usize)> {
        Ok(*self.spatial_schedule()?.last().unwrap())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl TextEncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            embed_dim: 16,
            hidden_dim: 32,
            max_len: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            image: ImageEncoderConfig::desk(),
            text: TextEncoderConfig::desk(vocab_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.spatial_schedule()?;
        if self.image.embed_dim != self.text.hidden_dim {
            return Err(Error::Config(format!(
                "image embed dim {} differs from caption embed dim {}",
                self.image.embed_dim, self.text.hidden_dim
            )));
        }
        let t = &self.text;
        if t.vocab_size == 0 || t.embed_dim == 0 || t.hidden_dim == 0 || t.max_len == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Flat numeric encoding, stored alongside parameters in checkpoints.
    pub fn to_tensor(&self) -> Tensor {
        let i = &self.image;
        let mut v = vec![
            i.height as f64,
            i.width as f64,
            i.in_channels as f64,
            i.embed_dim as f64,
            i.layers.len() as f64,
        ];
        for l in &i.layers {
            v.extend([l.in_channels, l.out_channels, l.kernel, l.stride, l.padding].map(|x| x as f64));
        }
        let t = &self.text;
        v.extend([t.vocab_size, t.embed_dim, t.hidden_dim, t.max_len].map(|x| x as f64));
        Tensor::vector(v)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let bad = || Error::Format("malformed model configuration record".into());
        let v: Vec<usize> = t
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(bad())
                }
            })
            .collect::<Result<_>>()?;
        if v.len() < 5 {
            return Err(bad());
        }
        let n_layers = v[4];
        if v.len() != 5 + 5 * n_layers + 4 {
            return Err(bad());
        }
        let layers = (0..n_layers)
            .map(|k| {
                let o = 5 + 5 * k;
                ConvSpec {
                    in_channels: v[o],
                    out_channels: v[o + 1],
                    kernel: v[o + 2],
                    stride: v[o + 3],
                    padding: v[o + 4],
                }
            })
            .collect();
        let o = 5 + 5 * n_layers;
        let cfg = ModelConfig {
            image: ImageEncoderConfig {
                height: v[0],
                width: v[1],
                in_channels: v[2],
                embed_dim: v[3],
                layers,
            },
            text: TextEncoderConfig {
                vocab_size: v[o],
                embed_dim: v[o + 1],
                hidden_dim: v[o + 2],
                max_len: v[o + 3],
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on ±√(3/fan_in) (unit-variance pre-activations), zero biases.
    FanInUniform,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParseMode {
    WordMode,
    PhraseMode,
}

impl std::str::FromStr for ParseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(ParseMode::WordMode),
            "phrase" => Ok(ParseMode::PhraseMode),
            other => Err(Error::Config(format!("unknown parse mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    /// `[kernel·kernel·in_channels, out_channels]`, rows ordered (ky, kx, c).
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderParams {
    pub config: ImageEncoderConfig,
    pub layers: Vec<ConvLayer>,
    /// `[last_channels, embed_dim]`
    pub projection: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights {
    pub w_reset: Tensor,
    pub w_update: Tensor,
    pub w_candidate: Tensor,
    pub u_reset: Tensor,
    pub u_update: Tensor,
    pub u_candidate: Tensor,
    pub b_reset: Tensor,
    pub b_update: Tensor,
    pub b_candidate: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderParams {
    pub config: TextEncoderConfig,
    /// `[vocab_size, embed_dim]`
    pub embedding: Tensor,
    pub gru: GruWeights,
}

struct Init {
    rng: ChaCha8Rng,
    scheme: InitScheme,
}

impl Init {
    fn weight(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        match self.scheme {
            InitScheme::Zeros => Tensor::zeros(shape),
            InitScheme::FanInUniform => {
                let bound = (3.0 / fan_in as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
            }
        }
    }
}

/// Deterministic parameter initialization for both branches.
pub fn init_params(
    config: &ModelConfig,
    seed: u64,
    scheme: InitScheme,
) -> Result<(ImageEncoderParams, TextEncoderParams)> {
    config.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        scheme,
    };

    let layers = config
        .image
        .layers
        .iter()
        .map(|&spec| {
            let fan_in = spec.kernel * spec.kernel * spec.in_channels;
            ConvLayer {
                spec,
                weight: init.weight(&[fan_in, spec.out_channels], fan_in),
                bias: Tensor::zeros(&[spec.out_channels]),
            }
        })
        .collect::<Vec<_>>();
    let last = config.image.layers.last().unwrap().out_channels;
    let projection = init.weight(&[last, config.image.embed_dim], last);
    let image = ImageEncoderParams {
        config: config.image.clone(),
        layers,
        projection,
    };

    let t = &config.text;
    let (e, l) = (t.embed_dim, t.hidden_dim);
    let embedding = init.weight(&[t.vocab_size, e], 1);
    let gru = GruWeights {
        w_reset: init.weight(&[e, l], e),
        w_update: init.weight(&[e, l], e),
        w_candidate: init.weight(&[e, l], e),
        u_reset: init.weight(&[l, l], l),
        u_update: init.weight(&[l, l], l),
        u_candidate: init.weight(&[l, l], l),
        b_reset: Tensor::zeros(&[l]),
        b_update: Tensor::zeros(&[l]),
        b_candidate: Tensor::zeros(&[l]),
    };
    let text = TextEncoderParams {
        config: t.clone(),
        embedding,
        gru,
    };
    Ok((image, text))
}

/// `R_rows × C_cols` grid of `L`-dimensional region vectors.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid<'t> {
    /// `[rows, cols, dim]`
    pub values: Var<'t>,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub source_size: (usize, usize),
}

impl<'t> FeatureGrid<'t> {
    /// Wrap a detached `[rows, cols, dim]` tensor as a constant on `tape`.
    pub fn constant(tape: &'t Tape, values: Tensor, source_size: (usize, usize)) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Rank {
                op: "feature_grid",
                expected: 3,
                shape: values.shape().to_vec(),
            });
        }
        let (rows, cols, dim) = (values.shape()[0], values.shape()[1], values.shape()[2]);
        Ok(FeatureGrid {
            values: tape.constant(values),
            rows,
            cols,
            dim,
            source_size,
        })
    }

    pub fn regions(&self) -> usize {
        self.rows * self.cols
    }
}

/// `N_max × L` caption token embeddings with a prefix validity mask.
#[derive(Clone, Debug)]
pub struct TokenMatrix<'t> {
    /// `[max_len, dim]`
    pub values: Var<'t>,
    /// `[max_len]` of 0/1, ones first.
    pub mask: Tensor,
    pub n_valid: usize,
    pub max_len: usize,
    pub dim: usize,
}

impl<'t> TokenMatrix<'t> {
    pub fn constant(tape: &'t Tape, values: Tensor, n_valid: usize) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Rank {
                op: "token_matrix",
                expected: 2,
                shape: values.shape().to_vec(),
            });
        }
        let (max_len, dim) = (values.shape()[0], values.shape()[1]);
        if n_valid == 0 || n_valid > max_len {
            return Err(Error::Index {
                index: n_valid,
                limit: max_len,
            });
        }
        Ok(TokenMatrix {
            values: tape.constant(values),
            mask: prefix_mask(n_valid, max_len),
            n_valid,
            max_len,
            dim,
        })
    }
}

fn prefix_mask(n_valid: usize, max_len: usize) -> Tensor {
    Tensor::from_fn(&[max_len], |i| if i < n_valid { 1.0 } else { 0.0 })
}

/// Flat input offsets for every (output position, ky, kx, channel) patch
/// entry. Taps that fall in the padding point at offset `h·w·c`, one past the
/// input, where the caller appends a zero.
fn patch_indices(h: usize, w: usize, c: usize, spec: &ConvSpec) -> (Vec<usize>, usize, usize) {
    let p = spec.padding;
    let oh = (h + 2 * p - spec.kernel) / spec.stride + 1;
    let ow = (w + 2 * p - spec.kernel) / spec.stride + 1;
    let pad = h * w * c;
    let mut idx = Vec::with_capacity(oh * ow * spec.kernel * spec.kernel * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..spec.kernel {
                for kx in 0..spec.kernel {
                    let (y, x) = (oy * spec.stride + ky, ox * spec.stride + kx);
                    if y < p || x < p || y >= h + p || x >= w + p {
                        idx.extend(std::iter::repeat(pad).take(c));
                    } else {
                        let base = ((y - p) * w + x - p) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    (idx, oh, ow)
}

struct ConvVars<'t> {
    spec: ConvSpec,
    weight: Var<'t>,
    bias: Var<'t>,
}

pub struct ImageEncoderVars<'t> {
    config: ImageEncoderConfig,
    layers: Vec<ConvVars<'t>>,
    projection: Var<'t>,
}

impl ImageEncoderParams {
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ImageEncoderVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ImageEncoderVars {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvVars {
                    spec: l.spec,
                    weight: leaf(&l.weight),
                    bias: leaf(&l.bias),
                })
                .collect(),
            projection: leaf(&self.projection),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("image.conv{i}.weight"), &l.weight));
            out.push((format!("image.conv{i}.bias"), &l.bias));
        }
        out.push(("image.projection".to_string(), &self.projection));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.projection);
        out
    }
}

impl<'t> ImageEncoderVars<'t> {
    pub fn params(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight);
            out.push(l.bias);
        }
        out.push(self.projection);
        out
    }

    /// `[H, W, C_in]` image → feature grid.
    pub fn encode(&self, image: Var<'t>) -> Result<FeatureGrid<'t>> {
        let cfg = &self.config;
        let expected = [cfg.height, cfg.width, cfg.in_channels];
        if image.shape() != expected {
            return Err(Error::Dimension {
                op: "encode_image",
                lhs: image.shape(),
                rhs: expected.to_vec(),
            });
        }
        let (mut h, mut w, mut c) = (cfg.height, cfg.width, cfg.in_channels);
        let mut x = image;
        for layer in &self.layers {
            let (idx, oh, ow) = patch_indices(h, w, c, &layer.spec);
            let k = layer.spec.kernel * layer.spec.kernel * c;
            let source = if layer.spec.padding > 0 {
                let zero = x.tape().constant(Tensor::zeros(&[1]));
                x.tape().concat(&[x, zero])?
            } else {
                x
            };
            let patches = source.gather(idx, &[oh * ow, k])?;
            x = patches.matmul(layer.weight)?.add_bias(layer.bias)?.relu();
            (h, w, c) = (oh, ow, layer.spec.out_channels);
        }
        let projected = x.matmul(self.projection)?;
        let values = projected.reshape(&[h, w, cfg.embed_dim])?;
        Ok(FeatureGrid {
            values,
            rows: h,
            cols: w,
            dim: cfg.embed_dim,
            source_size: (cfg.height, cfg.width),
        })
    }
}

pub struct TextEncoderVars<'t> {
    config: TextEncoderConfig,
    embedding: Var<'t>,
    w: [Var<'t>; 3],
    u: [Var<'t>; 3],
    b: [Var<'t>; 3],
}

impl TextEncoderParams {
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> TextEncoderVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let g = &self.gru;
        TextEncoderVars {
            config: self.config.clone(),
            embedding: leaf(&self.embedding),
            w: [leaf(&g.w_reset), leaf(&g.w_update), leaf(&g.w_candidate)],
            u: [leaf(&g.u_reset), leaf(&g.u_update), leaf(&g.u_candidate)],
            b: [leaf(&g.b_reset), leaf(&g.b_update), leaf(&g.b_candidate)],
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let g = &self.gru;
        vec![
            ("text.embedding".to_string(), &self.embedding),
            ("text.gru.w_reset".to_string(), &g.w_reset),
            ("text.gru.w_update".to_string(), &g.w_update),
            ("text.gru.w_candidate".to_string(), &g.w_candidate),
            ("text.gru.u_reset".to_string(), &g.u_reset),
            ("text.gru.u_update".to_string(), &g.u_update),
            ("text.gru.u_candidate".to_string(), &g.u_candidate),
            ("text.gru.b_reset".to_string(), &g.b_reset),
            ("text.gru.b_update".to_string(), &g.b_update),
            ("text.gru.b_candidate".to_string(), &g.b_candidate),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let g = &mut self.gru;
        vec![
            &mut self.embedding,
            &mut g.w_reset,
            &mut g.w_update,
            &mut g.w_candidate,
            &mut g.u_reset,
            &mut g.u_update,
            &mut g.u_candidate,
            &mut g.b_reset,
            &mut g.b_update,
            &mut g.b_candidate,
        ]
    }
}

/// Output rows of a caption under a parse mode: each entry lists the input
/// token positions averaged into that row.
pub fn row_groups(n_tokens: usize, spans: &[Range<usize>], mode: ParseMode) -> Result<Vec<Vec<usize>>> {
    if mode == ParseMode::WordMode {
        return Ok((0..n_tokens).map(|i| vec![i]).collect());
    }
    let mut sorted: Vec<&Range<usize>> = spans.iter().collect();
    sorted.sort_by_key(|r| r.start);
    for r in &sorted {
        if r.start >= r.end || r.end > n_tokens {
            return Err(Error::Span(format!(
                "span {}..{} invalid for {n_tokens} tokens",
                r.start, r.end
            )));
        }
    }
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::Span(format!(
                "spans {}..{} and {}..{} overlap",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    let mut groups = Vec::new();
    let mut i = 0;
    let mut next = sorted.iter().peekable();
    while i < n_tokens {
        match next.peek() {
            Some(r) if r.start == i => {
                groups.push((r.start..r.end).collect());
                i = r.end;
                next.next();
            }
            _ => {
                groups.push(vec![i]);
                i += 1;
            }
        }
    }
    Ok(groups)
}

impl<'t> TextEncoderVars<'t> {
    pub fn params(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.embedding];
        out.extend(self.w);
        out.extend(self.u);
        out.extend(self.b);
        out
    }

    /// Encode a token id sequence. In phrase mode every span's embeddings
    /// are averaged into one input vector before the recurrent pass.
    pub fn encode(&self, ids: &[u32], spans: &[Range<usize>], mode: ParseMode) -> Result<TokenMatrix<'t>> {
        let cfg = &self.config;
        if ids.is_empty() {
            return Err(Error::EmptyCaption);
        }
        if ids.len() > cfg.max_len {
            return Err(Error::Index {
                index: ids.len(),
                limit: cfg.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: cfg.vocab_size,
            });
        }
        let groups = row_groups(ids.len(), spans, mode)?;
        let tape = self.embedding.tape();
        let (e, l) = (cfg.embed_dim, cfg.hidden_dim);

        let gather_idx: Vec<usize> = ids
            .iter()
            .flat_map(|&id| (id as usize * e)..(id as usize * e + e))
            .collect();
        let mut inputs = self.embedding.gather(gather_idx, &[ids.len(), e])?;
        if groups.len() != ids.len() {
            let mut avg = Tensor::zeros(&[groups.len(), ids.len()]);
            for (row, g) in groups.iter().enumerate() {
                for &tok in g {
                    avg.set(&[row, tok], 1.0 / g.len() as f64);
                }
            }
            inputs = tape.constant(avg).matmul(inputs)?;
        }

        let n = groups.len();
        let [xr, xz, xn] = [0, 1, 2].map(|k| inputs.matmul(self.w[k]).and_then(|v| v.add_bias(self.b[k])));
        let (xr, xz, xn) = (xr?, xz?, xn?);

        let mut h = tape.constant(Tensor::zeros(&[1, l]));
        let mut rows = Vec::with_capacity(cfg.max_len);
        for t in 0..n {
            let row = |m: Var<'t>| m.gather((t * l..(t + 1) * l).collect(), &[1, l]);
            let r = row(xr)?.add(h.matmul(self.u[0])?)?.sigmoid();
            let z = row(xz)?.add(h.matmul(self.u[1])?)?.sigmoid();
            let cand = row(xn)?.add(r.mul(h.matmul(self.u[2])?)?)?.tanh();
            // h' = (1 − z)·cand + z·h
            h = cand.add(z.mul(h.sub(cand)?)?)?;
            rows.push(h);
        }
        if n < cfg.max_len {
            rows.push(tape.constant(Tensor::zeros(&[cfg.max_len - n, l])));
        }
        let values = tape.concat(&rows)?.reshape(&[cfg.max_len, l])?;
        Ok(TokenMatrix {
            values,
            mask: prefix_mask(n, cfg.max_len),
            n_valid: n,
            max_len: cfg.max_len,
            dim: l,
        })
    }
}

/// Both branches of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
}

pub struct ModelVars<'t> {
    pub image: ImageEncoderVars<'t>,
    pub text: TextEncoderVars<'t>,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64, scheme: InitScheme) -> Result<Self> {
        let (image, text) = init_params(config, seed, scheme)?;
        Ok(Model { image, text })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            image: self.image.config.clone(),
            text: self.text.config.clone(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ModelVars<'t> {
        ModelVars {
            image: self.image.bind(tape, trainable),
            text: self.text.bind(tape, trainable),
        }
    }

    /// Bind caller-owned variables, one per tensor of [`Model::named_tensors`]
    /// in the same order. Shapes must match the stored parameters.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<ModelVars<'t>> {
        let named = self.named_tensors();
        if vars.len() != named.len() {
            return Err(Error::Config(format!(
                "expected {} parameter variables, got {}",
                named.len(),
                vars.len()
            )));
        }
        for ((_, t), v) in named.iter().zip(vars) {
            if v.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "bind_vars",
                    lhs: t.shape().to_vec(),
                    rhs: v.shape(),
                });
            }
        }
        let n_img = 2 * self.image.layers.len() + 1;
        let image = ImageEncoderVars {
            config: self.image.config.clone(),
            layers: self
                .image
                .layers
                .iter()
                .enumerate()
                .map(|(k, l)| ConvVars {
                    spec: l.spec,
                    weight: vars[2 * k],
                    bias: vars[2 * k + 1],
                })
                .collect(),
            projection: vars[n_img - 1],
        };
        let t = &vars[n_img..];
        let text = TextEncoderVars {
            config: self.text.config.clone(),
            embedding: t[0],
            w: [t[1], t[2], t[3]],
            u: [t[4], t[5], t[6]],
            b: [t[7], t[8], t[9]],
        };
        Ok(ModelVars { image, text })
    }

    /// Every parameter tensor with a stable name, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.image.named_tensors();
        out.extend(self.text.named_tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.image.tensors_mut();
        out.extend(self.text.tensors_mut());
        out
    }

    /// Image features with no gradient tracking, as a `[rows, cols, dim]` tensor.
    pub fn encode_image_detached(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.image.bind(&tape, false);
        Ok(vars.encode(tape.constant(image.clone()))?.values.value())
    }

    /// Caption rows with no gradient tracking; returns `([max_len, dim], n_valid)`.
    pub fn encode_tokens_detached(
        &self,
        ids: &[u32],
        spans: &[Range<usize>],
        mode: ParseMode,
    ) -> Result<(Tensor, usize)> {
        let tape = Tape::new();
        let vars = self.text.bind(&tape, false);
        let toks = vars.encode(ids, spans, mode)?;
        Ok((toks.values.value(), toks.n_valid))
    }
}

impl<'t> ModelVars<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.image.projection.tape()
    }

    pub fn params(&self) -> Vec<Var<'t>> {
        let mut out = self.image.params();
        out.extend(self.text.params());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small_config() -> ModelConfig {
        ModelConfig {
            image: ImageEncoderConfig {
                height: 8,
                width: 8,
                in_channels: 2,
                layers: vec![ConvSpec {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 4,
                    stride: 2,
                    padding: 0,
                }],
                embed_dim: 4,
            },
            text: TextEncoderConfig {
                vocab_size: 6,
                embed_dim: 3,
                hidden_dim: 4,
                max_len: 5,
            },
        }
    }

    #[test]
    fn desk_shape_schedule() {
        let cfg = ImageEncoderConfig::desk();
        assert_eq!(cfg.spatial_schedule().unwrap(), vec![(32, 32), (15, 15), (7, 7)]);
        let model = ModelConfig::desk(30);
        let (img, _) = init_params(&model, 1, InitScheme::FanInUniform).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[32, 32, 3], |i| (i % 7) as f64 / 7.0));
        let grid = img.bind(&tape, false).encode(x).unwrap();
        assert_eq!(grid.values.shape(), vec![7, 7, 32]);
        assert_eq!(grid.regions(), 49);
    }

    #[test]
    fn indivisible_stride_is_config_error() {
        let mut cfg = ImageEncoderConfig::desk();
        cfg.height = 33;
        assert!(matches!(cfg.spatial_schedule(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_grid() {
        let (img, _) = init_params(&ModelConfig::desk(10), 3, InitScheme::FanInUniform).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[32, 32, 3]));
        let grid = img.bind(&tape, false).encode(x).unwrap();
        assert!(grid.values.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let cfg = small_config();
        let (img, _) = init_params(&cfg, 5, InitScheme::FanInUniform).unwrap();
        let input = Tensor::from_fn(&[8, 8, 2], |i| ((i * 37) % 11) as f64 / 11.0 - 0.4);
        let tape = Tape::new();
        let grid = img.bind(&tape, false).encode(tape.constant(input.clone())).unwrap();
        let got = grid.values.value();

        let layer = &img.layers[0];
        for oy in 0..3 {
            for ox in 0..3 {
                let mut hidden = [0.0; 3];
                for (o, hv) in hidden.iter_mut().enumerate() {
                    let mut acc = layer.bias.data()[o];
                    for ky in 0..4 {
                        for kx in 0..4 {
                            for c in 0..2 {
                                let x = input.get(&[oy * 2 + ky, ox * 2 + kx, c]);
                                acc += x * layer.weight.get(&[(ky * 4 + kx) * 2 + c, o]);
                            }
                        }
                    }
                    *hv = acc.max(0.0);
                }
                for d in 0..4 {
                    let want: f64 = (0..3).map(|o| hidden[o] * img.projection.get(&[o, d])).sum();
                    assert!((got.get(&[oy, ox, d]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::desk(20);
        let a = init_params(&cfg, 11, InitScheme::FanInUniform).unwrap();
        let b = init_params(&cfg, 11, InitScheme::FanInUniform).unwrap();
        let c = init_params(&cfg, 12, InitScheme::FanInUniform).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.projection, c.0.projection);
    }

    #[test]
    fn fan_in_init_std_near_target() {
        let cfg = ModelConfig {
            image: ImageEncoderConfig {
                height: 32,
                width: 32,
                in_channels: 64,
                layers: vec![ConvSpec {
                    in_channels: 64,
                    out_channels: 16,
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                }],
                embed_dim: 8,
            },
            text: TextEncoderConfig {
                vocab_size: 4,
                embed_dim: 2,
                hidden_dim: 8,
                max_len: 3,
            },
        };
        let (img, _) = init_params(&cfg, 99, InitScheme::FanInUniform).unwrap();
        // 2·2·64 = 256 fan-in, 256×16 = 4096 elements; check the first 1024
        let w = &img.layers[0].weight.data()[..1024];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 1.0 / 256f64.sqrt();
        assert!((var.sqrt() - target).abs() < 0.2 * target, "{} vs {target}", var.sqrt());
    }

    #[test]
    fn degenerate_recurrence_single_token() {
        let cfg = small_config();
        let (_, mut text) = init_params(&cfg, 2, InitScheme::FanInUniform).unwrap();
        for u in [&mut text.gru.u_reset, &mut text.gru.u_update, &mut text.gru.u_candidate] {
            *u = Tensor::zeros(u.shape());
        }
        let tape = Tape::new();
        let toks = text.bind(&tape, false).encode(&[3], &[], ParseMode::WordMode).unwrap();
        let out = toks.values.value();
        let emb: Vec<f64> = (0..3).map(|k| text.embedding.get(&[3, k])).collect();
        let pre = |w: &Tensor, j: usize| (0..3).map(|k| emb[k] * w.get(&[k, j])).sum::<f64>();
        for j in 0..4 {
            let z = 1.0 / (1.0 + (-pre(&text.gru.w_update, j)).exp());
            let want = (1.0 - z) * pre(&text.gru.w_candidate, j).tanh();
            assert!((out.get(&[0, j]) - want).abs() < 1e-14);
        }
        assert_eq!(toks.n_valid, 1);
        assert!(out.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phrase_mode_duplicate_token_average_is_idempotent() {
        let cfg = small_config();
        let (_, text) = init_params(&cfg, 4, InitScheme::FanInUniform).unwrap();
        let tape = Tape::new();
        let vars = text.bind(&tape, false);
        let phrase = vars.encode(&[2, 2], &[0..2], ParseMode::PhraseMode).unwrap();
        let single = vars.encode(&[2], &[], ParseMode::WordMode).unwrap();
        assert_eq!(phrase.n_valid, 1);
        assert!(phrase.values.value().max_abs_diff(&single.values.value()) < 1e-15);
    }

    #[test]
    fn phrase_mode_row_accounting() {
        let cfg = small_config();
        let (_, text) = init_params(&cfg, 4, InitScheme::FanInUniform).unwrap();
        let tape = Tape::new();
        let vars = text.bind(&tape, false);
        let ids = [0, 1, 2, 3];
        let word = vars.encode(&ids, &[1..3], ParseMode::WordMode).unwrap();
        let phrase = vars.encode(&ids, &[1..3], ParseMode::PhraseMode).unwrap();
        assert_eq!(word.n_valid, 4);
        assert_eq!(phrase.n_valid, 3);
        assert_eq!(phrase.mask.data(), &[1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn span_and_vocab_errors() {
        let cfg = small_config();
        let (_, text) = init_params(&cfg, 4, InitScheme::FanInUniform).unwrap();
        let tape = Tape::new();
        let vars = text.bind(&tape, false);
        assert!(matches!(
            vars.encode(&[0, 1, 2], &[0..2, 1..3], ParseMode::PhraseMode),
            Err(Error::Span(_))
        ));
        assert!(matches!(
            vars.encode(&[0, 6], &[], ParseMode::WordMode),
            Err(Error::Vocabulary { id: 6, .. })
        ));
        assert!(vars.encode(&[0; 6], &[], ParseMode::WordMode).is_err());
    }

    #[test]
    fn padding_does_not_touch_valid_rows() {
        let cfg = small_config();
        let (_, text) = init_params(&cfg, 8, InitScheme::FanInUniform).unwrap();
        let mut longer = cfg.text.clone();
        longer.max_len = 9;
        let text_long = TextEncoderParams {
            config: longer,
            ..text.clone()
        };
        let tape = Tape::new();
        let a = text.bind(&tape, false).encode(&[1, 4, 2], &[], ParseMode::WordMode).unwrap();
        let b = text_long.bind(&tape, false).encode(&[1, 4, 2], &[], ParseMode::WordMode).unwrap();
        let (av, bv) = (a.values.value(), b.values.value());
        assert_eq!(&av.data()[..12], &bv.data()[..12]);
        assert!(bv.data()[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoders_are_differentiable() {
        let cfg = small_config();
        let mut model = Model::init(&cfg, 21, InitScheme::FanInUniform).unwrap();
        // nudge biases off zero so relu kinks are not sitting exactly at the inputs
        model.image.layers[0].bias = Tensor::vector(vec![0.013, -0.021, 0.034]);
        let image = Tensor::from_fn(&[8, 8, 2], |i| ((i * 13) % 17) as f64 / 17.0);
        let params: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let err = grad_check(
            |tape, vars| {
                let m = model.bind_vars(vars)?;
                let grid = m.image.encode(tape.constant(image.clone()))?;
                let toks = m.text.encode(&[1, 3, 5], &[], ParseMode::WordMode)?;
                let flat = grid.values.reshape(&[grid.regions(), grid.dim])?;
                let space = flat.matmul(toks.values.t()?)?.reshape(&[grid.rows, grid.cols, toks.max_len])?;
                let m = tape.max_over_spatial(space)?;
                tape.mean_masked(m, &toks.mask)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
