//! Independent reimplementations checked against the library on random inputs.

use coloc::corpus::{
    generate_corpus, generate_corpus_with_placements, shape_pixels, tight_box, BoundingBox, CorpusConfig,
};
use coloc::encoders::{
    ConvSpec, FeatureGrid, ImageEncoderConfig, InitScheme, Model, ModelConfig, ParseMode, TextEncoderConfig,
    TokenMatrix,
};
use coloc::eval::{center_baseline, random_baseline, recall_from_scores, Direction, GroundQuery};
use coloc::localization::{
    build_localization_space, max_image_score, span_saliency_word_mode, threshold_mask, token_saliency, upsample_map,
    SaliencyMap,
};
use coloc::losses::{npair_loss, score_matrix, triplet_loss, Batch, BatchCaption, Mining, ScoreMatrix, TripletConfig};
use coloc::tensor::{grad_check, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..20 {
        let a = random(&mut r, &[3, 4], -2.0, 2.0);
        let b = random(&mut r, &[4, 2], -2.0, 2.0);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(&[i, k]) * b.get(&[k, j]);
                }
                assert!((c.get(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn max_over_spatial_matches_nested_loops() {
    let mut r = rng(2);
    for _ in 0..20 {
        let t = random(&mut r, &[4, 4, 5], -3.0, 3.0);
        let tape = Tape::new();
        let out = tape.max_over_spatial(tape.constant(t.clone())).unwrap().value();
        for d in 0..5 {
            let mut best = f64::NEG_INFINITY;
            for y in 0..4 {
                for x in 0..4 {
                    best = best.max(t.get(&[y, x, d]));
                }
            }
            assert_eq!(out.data()[d], best);
        }
    }
}

#[test]
fn masked_mean_matches_scalar_loop() {
    let mut r = rng(3);
    for _ in 0..20 {
        let t = random(&mut r, &[7], -3.0, 3.0);
        let mut mask = Tensor::from_fn(&[7], |_| r.gen_bool(0.5) as u8 as f64);
        mask.data_mut()[r.gen_range(0..7)] = 1.0;
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..7 {
            if mask.data()[i] == 1.0 {
                s += t.data()[i];
                n += 1.0;
            }
        }
        let tape = Tape::new();
        let got = tape.mean_masked(tape.constant(t), &mask).unwrap().item();
        assert!((got - s / n).abs() < 1e-12);
    }
}

#[test]
fn log_sum_exp_matches_naive_form() {
    let mut r = rng(4);
    for _ in 0..50 {
        let t = random(&mut r, &[6], -5.0, 5.0);
        let naive = t.data().iter().map(|v| v.exp()).sum::<f64>().ln();
        let tape = Tape::new();
        assert!((tape.constant(t).log_sum_exp().item() - naive).abs() < 1e-10);
    }
    let tape = Tape::new();
    let big = tape.constant(Tensor::vector(vec![1000.0, 1000.0])).log_sum_exp().item();
    assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-9);
}

#[test]
fn tanh_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let x = random(&mut r, &[10], -2.0, 2.0);
    let err = grad_check(|_, v| Ok(v[0].tanh().sum()), &[x], 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn composite_graph_gradients() {
    let mut r = rng(6);
    let a = random(&mut r, &[3, 4], -1.0, 1.0);
    let b = random(&mut r, &[4, 3], -1.0, 1.0);
    let bias = random(&mut r, &[3], -1.0, 1.0);
    let err = grad_check(
        |tape, v| {
            let h = v[0].matmul(v[1])?.add_bias(v[2])?.sigmoid();
            let g = h.mul(h.tanh())?.t()?.reshape(&[9])?;
            let picked = g.gather(vec![0, 4, 8, 4], &[4])?;
            let parts = tape.concat(&[picked, g.exp().scale(0.1)])?;
            Ok(parts.log_sum_exp().add(v[2].sum())?.neg())
        },
        &[a, b, bias],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn tiny_model() -> Model {
    let cfg = ModelConfig {
        image: ImageEncoderConfig {
            height: 8,
            width: 8,
            in_channels: 3,
            layers: vec![ConvSpec {
                in_channels: 3,
                out_channels: 4,
                kernel: 4,
                stride: 2,
                padding: 0,
            }],
            embed_dim: 5,
        },
        text: TextEncoderConfig {
            vocab_size: 8,
            embed_dim: 3,
            hidden_dim: 5,
            max_len: 4,
        },
    };
    let mut m = Model::init(&cfg, 3, InitScheme::FanInUniform).unwrap();
    m.image.layers[0].bias = Tensor::vector(vec![0.011, -0.023, 0.031, 0.017]);
    m
}

fn tiny_batch(r: &mut ChaCha8Rng, b: usize) -> Batch {
    Batch {
        image_ids: (0..b as u32).collect(),
        images: (0..b).map(|_| random(r, &[8, 8, 3], 0.0, 1.0)).collect(),
        captions: (0..b)
            .map(|i| BatchCaption {
                caption_id: i as u32,
                image_id: i as u32,
                tokens: (0..r.gen_range(1..=4)).map(|_| r.gen_range(0..8)).collect(),
            })
            .collect(),
    }
}

#[test]
fn pipeline_loss_gradient_on_two_pairs() {
    let model = tiny_model();
    let batch = tiny_batch(&mut rng(7), 2);
    let params: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    for loss in [coloc::losses::LossKind::NPair, coloc::losses::LossKind::Triplet(TripletConfig::default())] {
        let err = grad_check(
            |_, v| loss.apply(&score_matrix(&batch, &model.bind_vars(v)?)?),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{}: {err}", loss.name());
    }
}

#[test]
fn max_image_score_gradient_wrt_conv_weights() {
    let model = tiny_model();
    let batch = tiny_batch(&mut rng(8), 1);
    let params = vec![model.image.layers[0].weight.clone()];
    let err = grad_check(
        |tape, v| {
            let mut all: Vec<_> = model.named_tensors().into_iter().map(|(_, t)| tape.constant(t.clone())).collect();
            all[0] = v[0];
            let m = model.bind_vars(&all)?;
            let grid = m.image.encode(tape.constant(batch.images[0].clone()))?;
            let toks = m.text.encode(&batch.captions[0].tokens, &[], ParseMode::WordMode)?;
            max_image_score(&build_localization_space(&grid, &toks)?)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn localization_space_and_score_match_loops() {
    let mut r = rng(9);
    for _ in 0..20 {
        let (rows, cols, dim, max_len) = (7, 7, 5, 6);
        let n_valid = r.gen_range(1..=max_len);
        let g = random(&mut r, &[rows, cols, dim], -1.0, 1.0);
        let t = random(&mut r, &[max_len, dim], -1.0, 1.0);
        let tape = Tape::new();
        let grid = FeatureGrid::constant(&tape, g.clone(), (32, 32)).unwrap();
        let toks = TokenMatrix::constant(&tape, t.clone(), n_valid).unwrap();
        let space = build_localization_space(&grid, &toks).unwrap();
        let vol = space.values.value();
        let dot = |y: usize, x: usize, d: usize| (0..dim).map(|k| g.get(&[y, x, k]) * t.get(&[d, k])).sum::<f64>();
        let mut mean_of_max = 0.0;
        for d in 0..n_valid {
            let mut best = f64::NEG_INFINITY;
            for y in 0..rows {
                for x in 0..cols {
                    let m = dot(y, x, d);
                    assert!((vol.get(&[y, x, d]) - m).abs() < 1e-12);
                    best = best.max(m);
                }
            }
            mean_of_max += best / n_valid as f64;
            // saliency slice is the same recomputation
            let slice = token_saliency(&space, d).unwrap();
            for y in 0..rows {
                for x in 0..cols {
                    assert!((slice.grid.get(&[y, x]) - dot(y, x, d)).abs() < 1e-12);
                }
            }
        }
        assert!((max_image_score(&space).unwrap().item() - mean_of_max).abs() < 1e-12);

        if n_valid >= 3 {
            let avg = span_saliency_word_mode(&space, 0..3).unwrap();
            for y in 0..rows {
                for x in 0..cols {
                    let want = (0..3).map(|d| dot(y, x, d)).sum::<f64>() / 3.0;
                    assert!((avg.grid.get(&[y, x]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn single_peak_upsamples_inside_its_footprint() {
    for cell in 0..49 {
        let (cy, cx) = (cell / 7, cell % 7);
        let mut grid = Tensor::zeros(&[7, 7]);
        grid.set(&[cy, cx], 1.0);
        let map = SaliencyMap {
            grid,
            label: String::new(),
            upsampled: None,
        };
        let up = upsample_map(&map, 32, 32).unwrap().upsampled.unwrap();
        let i = coloc::localization::argmax_first(up.data());
        let (py, px) = (i / 32, i % 32);
        // footprint of cell r is [r·32/7, (r+1)·32/7)
        let inside = |p: usize, c: usize| p * 7 >= c * 32 && p * 7 < (c + 1) * 32;
        assert!(inside(py, cy) && inside(px, cx), "cell ({cy},{cx}) peaked at ({py},{px})");
    }
}

#[test]
fn mask_cardinality_matches_sorted_quantile() {
    let mut r = rng(10);
    for _ in 0..30 {
        let (h, w) = (r.gen_range(4..40), r.gen_range(4..40));
        let up = random(&mut r, &[h, w], -1.0, 1.0);
        let map = SaliencyMap {
            grid: Tensor::zeros(&[1, 1]),
            label: String::new(),
            upsampled: Some(up.clone()),
        };
        let mask = threshold_mask(&map, 0.9).unwrap();
        let want = (0.1 * (h * w) as f64).ceil() as i64;
        assert!((mask.count() as i64 - want).abs() <= 1, "{h}x{w}: {} vs {want}", mask.count());
        let mut sorted = up.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let min_set = up
            .data()
            .iter()
            .zip(&mask.bits)
            .filter(|(_, &b)| b)
            .map(|(v, _)| *v)
            .fold(f64::INFINITY, f64::min);
        assert!(min_set >= sorted[sorted.len() - mask.count()]);
    }
}

#[test]
fn score_matrix_entries_match_single_pair_recomputation() {
    let model = tiny_model();
    let batch = tiny_batch(&mut rng(11), 3);
    let tape = Tape::new();
    let s = score_matrix(&batch, &model.bind(&tape, false)).unwrap().values.value();
    for i in 0..3 {
        for j in 0..3 {
            let t2 = Tape::new();
            let m = model.bind(&t2, false);
            let grid = m.image.encode(t2.constant(batch.images[i].clone())).unwrap();
            let toks = m.text.encode(&batch.captions[j].tokens, &[], ParseMode::WordMode).unwrap();
            let one = max_image_score(&build_localization_space(&grid, &toks).unwrap()).unwrap().item();
            assert_eq!(s.get(&[i, j]), one);
        }
    }
}

#[test]
fn triplet_matches_exhaustive_search() {
    let mut r = rng(12);
    for _ in 0..100 {
        let s = random(&mut r, &[4, 4], -3.0, 3.0);
        let at = |i: usize, j: usize| s.get(&[i, j]);
        let eta = 0.2;
        let mut want = 0.0;
        for j in 0..4 {
            // try every impostor choice, keep the one with the highest score
            let mut best_row = (f64::NEG_INFINITY, 0.0);
            let mut best_col = (f64::NEG_INFINITY, 0.0);
            for i in (0..4).filter(|&i| i != j) {
                let h_row = (eta + at(j, i) - at(j, j)).max(0.0);
                let h_col = (eta + at(i, j) - at(j, j)).max(0.0);
                if at(j, i) > best_row.0 {
                    best_row = (at(j, i), h_row);
                }
                if at(i, j) > best_col.0 {
                    best_col = (at(i, j), h_col);
                }
            }
            want += best_row.1 + best_col.1;
        }
        want /= 4.0;
        let tape = Tape::new();
        let sm = ScoreMatrix::from_var(tape.constant(s)).unwrap();
        let got = triplet_loss(&sm, &TripletConfig { margin: eta, mining: Mining::Hardest }).unwrap().item();
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn npair_matches_naive_softmax() {
    let mut r = rng(13);
    for _ in 0..100 {
        let s = random(&mut r, &[5, 5], -4.0, 4.0);
        let mut want = 0.0;
        for j in 0..5 {
            let row: f64 = (0..5).map(|i| s.get(&[j, i]).exp()).sum();
            let col: f64 = (0..5).map(|i| s.get(&[i, j]).exp()).sum();
            want += -(s.get(&[j, j]).exp() / row).ln() - (s.get(&[j, j]).exp() / col).ln();
        }
        want /= 5.0;
        let tape = Tape::new();
        let got = npair_loss(&ScoreMatrix::from_var(tape.constant(s)).unwrap()).unwrap().item();
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn caption_draws_are_uniform() {
    let corpus = generate_corpus(3, 1, &CorpusConfig::default()).unwrap();
    let mut r = rng(14);
    let n = 10_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        let b = Batch::from_records(&corpus, &[0, 1], &mut r).unwrap();
        counts[(b.captions[0].caption_id % 5) as usize] += 1;
    }
    let p = 0.2;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn sgd_two_step_recurrence() {
    use coloc::training::{sgd_momentum_step, TrainState};
    let model = tiny_model();
    let mut state = TrainState {
        velocity: model.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        model: model.clone(),
        epoch: 0,
        seed: 0,
    };
    let grads: Vec<Tensor> = model.named_tensors().iter().map(|(_, t)| Tensor::full(t.shape(), 0.5)).collect();
    let lr = 0.1;
    sgd_momentum_step(&mut state, &grads, lr, 0.9).unwrap();
    sgd_momentum_step(&mut state, &grads, lr, 0.9).unwrap();
    for ((_, p0), (_, p)) in model.named_tensors().iter().zip(state.model.named_tensors()) {
        let want = p0.map(|v| v - lr * (0.5 + 1.9 * 0.5));
        assert!(p.max_abs_diff(&want) < 1e-12);
    }
}

fn query(boxes: Vec<BoundingBox>) -> GroundQuery {
    GroundQuery {
        caption_id: 0,
        span_index: 0,
        image_size: (32, 32),
        boxes,
    }
}

#[test]
fn random_baseline_tracks_box_area_fraction() {
    // 16×16 box in a 32×32 image: f = 0.25
    let q = vec![query(vec![BoundingBox::new(8, 8, 24, 24).unwrap()])];
    let trials = 10_000;
    let hit = random_baseline(&q, trials, 3).accuracy();
    let sigma = (0.25 * 0.75 / trials as f64).sqrt();
    assert!((hit - 0.25).abs() <= 3.0 * sigma, "{hit}");
}

#[test]
fn center_baseline_on_constructed_set() {
    let with_center = BoundingBox::new(10, 10, 20, 20).unwrap();
    let without = BoundingBox::new(0, 0, 8, 8).unwrap();
    let qs: Vec<GroundQuery> = (0..1000)
        .map(|i| query(vec![if i % 5 == 4 { without } else { with_center }]))
        .collect();
    let acc = center_baseline(&qs).accuracy();
    assert!((acc - 0.8).abs() <= 0.02, "{acc}");
}

#[test]
fn recall_matches_rank_counting() {
    let mut r = rng(16);
    for _ in 0..20 {
        let (n_img, per) = (r.gen_range(2..8), r.gen_range(1..4));
        let n_cap = n_img * per;
        let scores = random(&mut r, &[n_img, n_cap], -1.0, 1.0);
        let owner: Vec<usize> = (0..n_cap).map(|j| j / per).collect();
        let ks: Vec<usize> = (1..=n_img).collect();
        let res = recall_from_scores(&scores, &owner, &ks, Direction::CaptionToImage).unwrap();
        for (k, got) in ks.iter().zip(&res.recalls) {
            let mut hits = 0;
            for j in 0..n_cap {
                let own = scores.get(&[owner[j], j]);
                let better = (0..n_img)
                    .filter(|&i| {
                        let v = scores.get(&[i, j]);
                        v > own || (v == own && i < owner[j])
                    })
                    .count();
                hits += (better < *k) as usize;
            }
            assert!((got - hits as f64 / n_cap as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn stored_boxes_match_renderer_extents() {
    let (corpus, placements) = generate_corpus_with_placements(40, 21, &CorpusConfig::default()).unwrap();
    for (rec, places) in corpus.records.iter().zip(&placements) {
        assert_eq!(rec.scene.objects.len(), places.len());
        for (obj, p) in rec.scene.objects.iter().zip(places) {
            let px = shape_pixels(obj.shape, p.x0, p.y0, p.size, p.horizontal);
            assert_eq!(tight_box(&px), Some(obj.bbox));
            let rgb = obj.color.rgb();
            for &(x, y) in &px {
                for (c, want) in rgb.iter().enumerate() {
                    assert_eq!(rec.scene.image.get(&[y, x, c]), *want);
                }
            }
        }
    }
}

#[test]
fn phrase_rate_near_configured_mean() {
    let cfg = CorpusConfig::default();
    let corpus = generate_corpus(500, 22, &cfg).unwrap();
    let spans: usize = corpus.captions().map(|c| c.spans.len()).sum();
    let mean = spans as f64 / corpus.num_captions() as f64;
    assert!((mean - cfg.mean_phrases).abs() <= 0.1 * cfg.mean_phrases, "{mean}");
}

#[test]
fn untrained_retrieval_is_at_chance() {
    use coloc::eval::recall_over_folds;
    let corpus = generate_corpus(100, 23, &CorpusConfig::default()).unwrap();
    let mut r1 = Vec::new();
    for seed in 0..5 {
        let m = Model::init(&ModelConfig::desk(corpus.vocab.len()), seed, InitScheme::FanInUniform).unwrap();
        let res = recall_over_folds(&m, &corpus, 100, 1, &[1], Direction::CaptionToImage).unwrap();
        r1.push(res.recalls[0]);
    }
    // 500 caption queries against 100 images, chance 0.01
    let sigma = (0.01 * 0.99 / 500.0f64).sqrt();
    let mean = r1.iter().sum::<f64>() / r1.len() as f64;
    assert!((mean - 0.01).abs() <= 3.0 * sigma, "{r1:?}");
}
