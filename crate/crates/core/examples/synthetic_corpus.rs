//! Generate a grounded scene corpus, print a few captions with their boxes,
//! and write it to disk in the on-disk layout the CLI reads.
//!
//! cargo run --example synthetic_corpus -- [out_dir] [images] [seed]

use std::path::PathBuf;

use coloc::corpus::{corpus_checksum, generate_corpus, load_corpus, save_corpus, split, CorpusConfig};

fn main() -> coloc::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "target/example-corpus".into()));
    let images: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let corpus = generate_corpus(images, seed, &CorpusConfig::default())?;
    println!("{} images, {} captions, vocabulary of {}", corpus.len(), corpus.num_captions(), corpus.vocab.len());

    for rec in corpus.records.iter().take(2) {
        println!("image {}", rec.image_id);
        for obj in &rec.scene.objects {
            let b = obj.bbox;
            println!("  {} {} at ({},{})-({},{})", obj.color.word(), obj.shape.word(), b.x_min, b.y_min, b.x_max, b.y_max);
        }
        for cap in &rec.captions {
            println!("  [{}] {}", cap.caption_id, corpus.vocab.decode(&cap.tokens));
            for span in &cap.spans {
                let words = corpus.vocab.decode(&cap.tokens[span.range()]);
                println!("      \"{words}\" -> {} box(es)", span.boxes.len());
            }
        }
    }

    let (train, val, test) = split(&corpus, [0.7, 0.1, 0.2], seed)?;
    println!("split {} / {} / {}", train.len(), val.len(), test.len());

    save_corpus(&corpus, &out)?;
    let back = load_corpus(&out)?;
    assert_eq!(back, corpus);
    println!("wrote {} (checksum {})", out.display(), corpus_checksum(&out)?);
    Ok(())
}
