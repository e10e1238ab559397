//! Gradient and oracle verification suite behind `coloc selfcheck`.
//!
//! Every differentiable tape op is checked against central finite
//! differences at several random points, the full training loss is checked
//! end to end on a tiny model, and the score and loss functions are compared
//! with brute-force reimplementations on random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{
    ConvSpec, FeatureGrid, ImageEncoderConfig, InitScheme, Model, ModelConfig, TextEncoderConfig, TokenMatrix,
};
use crate::error::Result;
use crate::localization::{build_localization_space, max_image_score};
use crate::losses::{npair_loss, score_matrix, triplet_loss, Batch, BatchCaption, LossKind, Mining, ScoreMatrix, TripletConfig};
use crate::tensor::{grad_check_on, Tape, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const FD_STEP: f64 = 1e-5;

/// Inputs closer than this to a relu kink or a max tie are redrawn.
const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Gradient,
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error < self.tolerance
    }

    pub fn line(&self) -> String {
        let kind = match self.kind {
            CheckKind::Gradient => "grad",
            CheckKind::Oracle => "oracle",
        };
        format!(
            "{}\t{kind}\t{}\tmax_err={:.3e}\ttol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn max_error(&self, kind: CheckKind) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.max_error)
            .fold(0.0, f64::max)
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self.checks.iter().map(Check::line).collect();
        out.push(format!(
            "max gradient error {:.3e}, max oracle error {:.3e}, {} of {} checks passed",
            self.max_error(CheckKind::Gradient),
            self.max_error(CheckKind::Oracle),
            self.checks.len() - self.failures().len(),
            self.checks.len()
        ));
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Random points per op gradient check.
    pub points: usize,
    /// Random instances per oracle comparison.
    pub instances: usize,
    /// Deliberately break the backward rule of this op (fault injection).
    pub corrupt: Option<&'static str>,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            seed: 0,
            points: 10,
            instances: 100,
            corrupt: None,
        }
    }
}

/// Names of the ops covered by the per-op gradient checks.
pub const OPS: &[&str] = &[
    "matmul",
    "transpose",
    "reshape",
    "max_over_spatial",
    "mean_masked",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "neg",
    "add",
    "sub",
    "mul",
    "add_scalar",
    "mul_scalar",
    "log_sum_exp",
    "sum",
    "gather",
    "concat",
    "add_bias",
];

pub fn run(opts: &SelfCheckOptions) -> Result<SelfCheckReport> {
    let mut report = SelfCheckReport::default();
    let make_tape = || match opts.corrupt {
        Some(op) => Tape::with_corrupted_backward(op),
        None => Tape::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for &op in OPS {
        let mut worst: f64 = 0.0;
        for _ in 0..opts.points {
            worst = worst.max(op_point(op, &mut rng, &make_tape)?);
        }
        report.checks.push(Check {
            name: op.to_string(),
            kind: CheckKind::Gradient,
            max_error: worst,
            tolerance: GRAD_TOLERANCE,
        });
    }
    for loss in [LossKind::NPair, LossKind::Triplet(TripletConfig::default())] {
        report.checks.push(Check {
            name: format!("pipeline.{}", loss.name()),
            kind: CheckKind::Gradient,
            max_error: pipeline_error(loss, opts.seed, &make_tape)?,
            tolerance: GRAD_TOLERANCE,
        });
    }
    let oracles: [(&str, fn(&mut ChaCha8Rng) -> Result<f64>); 3] = [
        ("max_image_score", max_image_score_gap),
        ("triplet_loss", triplet_gap),
        ("npair_loss", npair_gap),
    ];
    for (name, f) in oracles {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
        let mut worst: f64 = 0.0;
        for _ in 0..opts.instances {
            worst = worst.max(f(&mut rng)?);
        }
        report.checks.push(Check {
            name: format!("oracle.{name}"),
            kind: CheckKind::Oracle,
            max_error: worst,
            tolerance: ORACLE_TOLERANCE,
        });
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform draw in `[-2, 2]` with every entry at least the kink clearance away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Every depth slice has a unique maximum with a clear gap to the runner-up.
fn clear_maxima(t: &Tensor) -> bool {
    let s = t.shape();
    let (regions, depth) = (s[0] * s[1], s[2]);
    (0..depth).all(|d| {
        let mut v: Vec<f64> = (0..regions).map(|r| t.data()[r * depth + d]).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v[0] - v[1] > KINK_CLEARANCE
    })
}

/// Contract an op output against fixed random weights so that every output
/// element receives a distinct upstream gradient.
fn weighted<'t>(tape: &'t Tape, out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let w = tape.constant(weights.reshaped(&out.shape())?);
    Ok(out.mul(w)?.sum())
}

fn op_point(op: &str, rng: &mut ChaCha8Rng, make_tape: &dyn Fn() -> Tape) -> Result<f64> {
    let w = uniform(rng, &[64], -1.0, 1.0);
    let weights = |n: usize| Tensor::vector(w.data()[..n].to_vec());
    let unary = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| vec![uniform(rng, &[2, 4], lo, hi)];
    let check = |params: Vec<Tensor>, f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>| {
        grad_check_on(make_tape, f, &params, FD_STEP)
    };

    match op {
        "matmul" => check(
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)],
            &|t, v| weighted(t, v[0].matmul(v[1])?, &weights(6)),
        ),
        "transpose" => check(vec![uniform(rng, &[3, 4], -1.0, 1.0)], &|t, v| {
            weighted(t, v[0].t()?, &weights(12))
        }),
        "reshape" => check(vec![uniform(rng, &[3, 4], -1.0, 1.0)], &|t, v| {
            weighted(t, v[0].reshape(&[2, 6])?, &weights(12))
        }),
        "max_over_spatial" => {
            let x = loop {
                let x = uniform(rng, &[3, 3, 4], -1.0, 1.0);
                if clear_maxima(&x) {
                    break x;
                }
            };
            check(vec![x], &|t, v| weighted(t, t.max_over_spatial(v[0])?, &weights(4)))
        }
        "mean_masked" => {
            let mut mask = Tensor::from_fn(&[6], |_| rng.gen_bool(0.6) as u8 as f64);
            mask.data_mut()[rng.gen_range(0..6)] = 1.0;
            check(vec![uniform(rng, &[6], -1.0, 1.0)], &|t, v| t.mean_masked(v[0], &mask))
        }
        "relu" => check(vec![away_from_zero(rng, &[2, 4])], &|t, v| {
            weighted(t, v[0].relu(), &weights(8))
        }),
        "tanh" => check(unary(rng, -2.0, 2.0), &|t, v| weighted(t, v[0].tanh(), &weights(8))),
        "sigmoid" => check(unary(rng, -3.0, 3.0), &|t, v| weighted(t, v[0].sigmoid(), &weights(8))),
        "exp" => check(unary(rng, -2.0, 2.0), &|t, v| weighted(t, v[0].exp(), &weights(8))),
        "log" => check(unary(rng, 0.2, 3.0), &|t, v| weighted(t, v[0].ln()?, &weights(8))),
        "neg" => check(unary(rng, -2.0, 2.0), &|t, v| weighted(t, v[0].neg(), &weights(8))),
        "add" | "sub" | "mul" => {
            let params = vec![
                uniform(rng, &[6], -1.5, 1.5),
                uniform(rng, &[6], -1.5, 1.5),
                uniform(rng, &[], -1.5, 1.5),
            ];
            fn apply<'t>(op: &str, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
                match op {
                    "add" => a.add(b),
                    "sub" => a.sub(b),
                    _ => a.mul(b),
                }
            }
            // elementwise, then tensor-with-scalar and scalar-with-tensor broadcasting
            check(params, &|t, v| {
                let x = apply(op, v[0], v[1])?;
                let y = apply(op, x, v[2])?;
                let z = apply(op, v[2], y)?;
                weighted(t, z, &weights(6))
            })
        }
        "add_scalar" => check(unary(rng, -1.0, 1.0), &|t, v| {
            weighted(t, v[0].add_scalar(0.7), &weights(8))
        }),
        "mul_scalar" => check(unary(rng, -1.0, 1.0), &|t, v| {
            weighted(t, v[0].scale(-1.3), &weights(8))
        }),
        "log_sum_exp" => check(vec![uniform(rng, &[6], -5.0, 5.0)], &|_, v| Ok(v[0].log_sum_exp())),
        "sum" => check(unary(rng, -1.0, 1.0), &|_, v| Ok(v[0].sum())),
        "gather" => check(vec![uniform(rng, &[6], -1.0, 1.0)], &|t, v| {
            // repeated indices exercise gradient accumulation
            weighted(t, v[0].gather(vec![0, 2, 2, 5, 1], &[5])?, &weights(5))
        }),
        "concat" => check(
            vec![
                uniform(rng, &[2], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
                uniform(rng, &[1], -1.0, 1.0),
            ],
            &|t, v| weighted(t, t.concat(v)?, &weights(6)),
        ),
        "add_bias" => check(
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)],
            &|t, v| weighted(t, v[0].add_bias(v[1])?, &weights(12)),
        ),
        other => Err(crate::error::Error::Config(format!("no gradient check for op `{other}`"))),
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image: ImageEncoderConfig {
            height: 8,
            width: 8,
            in_channels: 3,
            layers: vec![ConvSpec {
                in_channels: 3,
                out_channels: 3,
                kernel: 4,
                stride: 2,
                padding: 1,
            }],
            embed_dim: 4,
        },
        text: TextEncoderConfig {
            vocab_size: 7,
            embed_dim: 3,
            hidden_dim: 4,
            max_len: 5,
        },
    }
}

/// Worst relative error of the training loss through both encoders on a
/// three-pair batch.
fn pipeline_error(loss: LossKind, seed: u64, make_tape: &dyn Fn() -> Tape) -> Result<f64> {
    let cfg = tiny_model_config();
    let mut model = Model::init(&cfg, seed, InitScheme::FanInUniform)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    // biases drawn away from zero keep relu pre-activations off their kinks
    for layer in &mut model.image.layers {
        layer.bias = away_from_zero(&mut rng, layer.bias.shape()).scale(0.05);
    }
    let captions: [&[u32]; 3] = [&[1, 4, 2], &[3, 6, 6, 5], &[2, 5]];
    let batch = Batch {
        image_ids: vec![0, 1, 2],
        images: (0..3).map(|_| uniform(&mut rng, &[8, 8, 3], 0.0, 1.0)).collect(),
        captions: captions
            .iter()
            .enumerate()
            .map(|(i, toks)| BatchCaption {
                caption_id: i as u32,
                image_id: i as u32,
                tokens: toks.to_vec(),
            })
            .collect(),
    };
    let params: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    grad_check_on(
        make_tape,
        |_tape, vars| {
            let bound = model.bind_vars(vars)?;
            loss.apply(&score_matrix(&batch, &bound)?)
        },
        &params,
        FD_STEP,
    )
}

fn max_image_score_gap(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (rows, cols) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let dim = rng.gen_range(1..6);
    let max_len = rng.gen_range(1..7);
    let n_valid = rng.gen_range(1..=max_len);
    let grid = uniform(rng, &[rows, cols, dim], -1.0, 1.0);
    let toks = uniform(rng, &[max_len, dim], -1.0, 1.0);

    let mut brute = 0.0;
    for d in 0..n_valid {
        let mut best = f64::NEG_INFINITY;
        for r in 0..rows {
            for c in 0..cols {
                let dot: f64 = (0..dim).map(|k| grid.get(&[r, c, k]) * toks.get(&[d, k])).sum();
                best = best.max(dot);
            }
        }
        brute += best;
    }
    brute /= n_valid as f64;

    let tape = Tape::new();
    let g = FeatureGrid::constant(&tape, grid, (rows, cols))?;
    let t = TokenMatrix::constant(&tape, toks, n_valid)?;
    let fast = max_image_score(&build_localization_space(&g, &t)?)?.item();
    Ok((fast - brute).abs())
}

fn random_scores(rng: &mut ChaCha8Rng) -> (usize, Tensor) {
    let b = rng.gen_range(2..9);
    (b, uniform(rng, &[b, b], -5.0, 5.0))
}

fn triplet_gap(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, s) = random_scores(rng);
    let margin = rng.gen_range(0.0..1.0);
    let at = |i: usize, j: usize| s.data()[i * b + j];
    // exhaustive: the hinge is monotone in the impostor score, so the
    // hardest impostor's hinge is the largest hinge over all impostors
    let mut brute = 0.0;
    for j in 0..b {
        let mut row_worst = 0.0f64;
        let mut col_worst = 0.0f64;
        for i in (0..b).filter(|&i| i != j) {
            row_worst = row_worst.max((margin + at(j, i) - at(j, j)).max(0.0));
            col_worst = col_worst.max((margin + at(i, j) - at(j, j)).max(0.0));
        }
        brute += row_worst + col_worst;
    }
    brute /= b as f64;

    let tape = Tape::new();
    let scores = ScoreMatrix::from_var(tape.constant(s))?;
    let cfg = TripletConfig {
        margin,
        mining: Mining::Hardest,
    };
    Ok((triplet_loss(&scores, &cfg)?.item() - brute).abs())
}

fn npair_gap(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, s) = random_scores(rng);
    let at = |i: usize, j: usize| s.data()[i * b + j];
    // naive softmax cross-entropy in both directions
    let mut brute = 0.0;
    for j in 0..b {
        let row: f64 = (0..b).map(|i| at(j, i).exp()).sum();
        let col: f64 = (0..b).map(|i| at(i, j).exp()).sum();
        brute -= (at(j, j).exp() / row).ln() + (at(j, j).exp() / col).ln();
    }
    brute /= b as f64;

    let tape = Tape::new();
    let scores = ScoreMatrix::from_var(tape.constant(s))?;
    Ok((npair_loss(&scores)?.item() - brute).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SelfCheckOptions {
        SelfCheckOptions {
            points: 2,
            instances: 10,
            ..SelfCheckOptions::default()
        }
    }

    #[test]
    fn clean_build_passes() {
        let report = run(&quick()).unwrap();
        for line in report.lines() {
            println!("{line}");
        }
        assert!(report.passed());
        assert_eq!(report.checks.len(), OPS.len() + 5);
    }

    #[test]
    fn corrupted_rule_is_named() {
        for op in ["tanh", "max_over_spatial", "gather"] {
            let report = run(&SelfCheckOptions {
                corrupt: Some(op),
                ..quick()
            })
            .unwrap();
            let failed: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
            assert!(failed.contains(&op), "{op}: {failed:?}");
        }
    }
}
