//! Train on a synthetic corpus and compare held-out pointing accuracy with
//! the untrained model and the random and center baselines.
//!
//! cargo run --release --example localization_emerges -- [seed] [epochs] [loss]

use std::time::Instant;

use coloc::corpus::{generate_corpus, split, CorpusConfig};
use coloc::encoders::{InitScheme, Model, ModelConfig, ParseMode};
use coloc::eval::{center_baseline, pointing_accuracy, queries, random_baseline, recall_over_folds, Direction};
use coloc::losses::LossKind;
use coloc::training::{resume, TrainConfig, TrainHooks, TrainState};

fn main() -> coloc::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let loss = match args.get(3).map(String::as_str) {
        Some("triplet") => TrainConfig::triplet(0.2),
        _ => LossKind::NPair,
    };

    let corpus = generate_corpus(500, seed, &CorpusConfig::default())?;
    let (train, val, test) = split(&corpus, [0.7, 0.1, 0.2], seed)?;
    let q = queries(&test);
    let random = random_baseline(&q, 100, seed).accuracy();
    let center = center_baseline(&q).accuracy();

    let cfg = TrainConfig {
        loss,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let untrained = Model::init(&ModelConfig::desk(corpus.vocab.len()), seed, InitScheme::FanInUniform)?;
    let before = pointing_accuracy(&untrained, &test, ParseMode::WordMode)?;
    println!("queries {}  random {random:.3}  center {center:.3}  untrained {:.3}", q.len(), before.accuracy());

    let start = Instant::now();
    let mut state = TrainState::new(&ModelConfig::desk(corpus.vocab.len()), seed)?;
    let mut print = |m: &coloc::training::EpochMetrics| println!("{}", m.log_line());
    resume(
        &mut state,
        &cfg,
        &train,
        TrainHooks {
            validation: Some(&val),
            on_epoch: Some(&mut print),
            ..TrainHooks::default()
        },
    )?;
    let word = pointing_accuracy(&state.model, &test, ParseMode::WordMode)?.accuracy();
    let phrase = pointing_accuracy(&state.model, &test, ParseMode::PhraseMode)?.accuracy();
    let r = recall_over_folds(&state.model, &test, 100, 5, &[1, 5, 10], Direction::CaptionToImage)?;
    println!(
        "trained word {word:.3} phrase {phrase:.3}  ratio {:.2}  R@1/5/10 {:.3}/{:.3}/{:.3}  {:.1}s",
        word / random,
        r.recalls[0],
        r.recalls[1],
        r.recalls[2],
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
