//! Pointing-game evaluation in both parse modes, next to the random and
//! center baselines, before and after a short training run.
//!
//! cargo run --release --example pointing_game -- [epochs]

use coloc::corpus::{generate_corpus, split, CorpusConfig};
use coloc::encoders::{InitScheme, Model, ModelConfig, ParseMode};
use coloc::eval::{center_baseline, pointing_accuracy, queries, random_baseline, random_baseline_expectation};
use coloc::training::{train, TrainConfig};

fn main() -> coloc::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let corpus = generate_corpus(300, 1, &CorpusConfig::default())?;
    let (train_set, _, test) = split(&corpus, [0.7, 0.1, 0.2], 1)?;

    let q = queries(&test);
    println!("{} phrase queries on {} test images", q.len(), test.len());
    println!("random  {:.3} (expected {:.3})", random_baseline(&q, 100, 1).accuracy(), random_baseline_expectation(&q));
    println!("center  {:.3}", center_baseline(&q).accuracy());

    let untrained = Model::init(&ModelConfig::desk(corpus.vocab.len()), 1, InitScheme::FanInUniform)?;
    let (state, _) = train(
        &TrainConfig {
            epochs,
            seed: 1,
            ..TrainConfig::default()
        },
        &train_set,
    )?;
    for (label, model) in [("untrained", &untrained), ("trained", &state.model)] {
        let word = pointing_accuracy(model, &test, ParseMode::WordMode)?;
        let phrase = pointing_accuracy(model, &test, ParseMode::PhraseMode)?;
        println!("{label:9} word {:.3}  phrase {:.3}", word.accuracy(), phrase.accuracy());
    }

    // per-query lines: caption id, span, x, y, hit|miss
    let word = pointing_accuracy(&state.model, &test, ParseMode::WordMode)?;
    for line in word.report().lines().take(5) {
        println!("  {line}");
    }
    Ok(())
}
