//! Train for a few epochs, checkpoint halfway, resume from disk, and confirm
//! the resumed run lands on the same bytes as an uninterrupted one.
//!
//! cargo run --release --example train_and_resume

use coloc::corpus::{generate_corpus, CorpusConfig};
use coloc::encoders::ModelConfig;
use coloc::training::{encode_checkpoint, load_checkpoint, metrics_log, resume, save_checkpoint, train, TrainConfig, TrainHooks, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(120, 7, &CorpusConfig::default())?;
    let cfg = TrainConfig {
        epochs: 6,
        seed: 7,
        ..TrainConfig::default()
    };

    let (full, metrics) = train(&cfg, &corpus)?;
    print!("epoch\tmean loss\n{}", metrics_log(&metrics));

    let dir = std::env::temp_dir().join("coloc-train-and-resume");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("half.ckpt");
    let mut state = TrainState::new(&ModelConfig::desk(corpus.vocab.len()), cfg.seed)?;
    resume(&mut state, &TrainConfig { epochs: 3, ..cfg.clone() }, &corpus, TrainHooks::default())?;
    save_checkpoint(&state, &path)?;

    let mut restored = load_checkpoint(&path)?;
    println!("restored checkpoint at epoch {}", restored.epoch);
    resume(&mut restored, &cfg, &corpus, TrainHooks::default())?;
    let same = encode_checkpoint(&restored)? == encode_checkpoint(&full)?;
    println!("resumed run identical to uninterrupted run: {same}");
    Ok(())
}
