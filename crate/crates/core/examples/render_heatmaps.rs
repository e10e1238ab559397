//! Write per-phrase attention heatmaps (PGM) and thresholded masks (PBM) for
//! one caption, in both parse modes.
//!
//! cargo run --release --example render_heatmaps -- [out_dir]

use std::path::PathBuf;

use coloc::corpus::{generate_corpus, CorpusConfig};
use coloc::encoders::ParseMode;
use coloc::eval::{pointing_query, span_map};
use coloc::localization::threshold_mask;
use coloc::pnm::{write_pbm, write_pgm};
use coloc::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-heatmaps".into()));
    std::fs::create_dir_all(&out)?;
    let corpus = generate_corpus(200, 4, &CorpusConfig::default())?;
    let (state, _) = train(
        &TrainConfig {
            epochs: 10,
            seed: 4,
            ..TrainConfig::default()
        },
        &corpus,
    )?;

    let rec = &corpus.records[0];
    let cap = rec.captions.iter().max_by_key(|c| c.spans.len()).expect("captions");
    println!("caption {}: {}", cap.caption_id, corpus.vocab.decode(&cap.tokens));
    let features = state.model.encode_image_detached(&rec.scene.image)?;
    for (mode, tag) in [(ParseMode::WordMode, "word"), (ParseMode::PhraseMode, "phrase")] {
        for (k, span) in cap.spans.iter().enumerate() {
            let map = span_map(&state.model, &features, rec.scene.size(), &cap.tokens, span.range(), mode)?;
            let hit = pointing_query(&map, &span.boxes)?.is_hit();
            let mask = threshold_mask(&map, 0.9)?;
            let stem = format!("{}_{k}_{tag}", cap.caption_id);
            write_pgm(map.upsampled.as_ref().expect("upsampled"), &out.join(format!("{stem}.pgm")))?;
            write_pbm(&mask, &out.join(format!("{stem}.pbm")))?;
            let words = corpus.vocab.decode(&cap.tokens[span.range()]);
            println!("{tag:6} \"{words}\": {} mask pixels, pointing {}", mask.count(), if hit { "hit" } else { "miss" });
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
