//! Recall@K in both retrieval directions on 100-image folds.
//!
//! cargo run --release --example retrieval_recall -- [epochs]

use coloc::corpus::{generate_corpus, split, CorpusConfig};
use coloc::eval::{recall_over_folds, Direction};
use coloc::training::{train, TrainConfig};

fn main() -> coloc::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let corpus = generate_corpus(500, 2, &CorpusConfig::default())?;
    let (train_set, _, test) = split(&corpus, [0.7, 0.1, 0.2], 2)?;
    let (state, _) = train(
        &TrainConfig {
            epochs,
            seed: 2,
            ..TrainConfig::default()
        },
        &train_set,
    )?;

    let ks = [1, 5, 10];
    for dir in [Direction::ImageToCaption, Direction::CaptionToImage] {
        let r = recall_over_folds(&state.model, &test, 100, 5, &ks, dir)?;
        let cells: Vec<String> = ks.iter().zip(&r.recalls).map(|(k, v)| format!("R@{k} {v:.3}")).collect();
        let median = {
            let mut ranks = r.ranks.clone();
            ranks.sort_unstable();
            ranks[ranks.len() / 2]
        };
        println!("{dir:17} {}  median rank {median}", cells.join("  "));
    }
    Ok(())
}
