//! Build one training batch, score every image against every caption, and
//! compare how the N-pair and triplet losses spread their gradient over the
//! impostors.
//!
//! cargo run --example batch_losses

use coloc::corpus::{generate_corpus, CorpusConfig};
use coloc::encoders::{InitScheme, Model, ModelConfig};
use coloc::losses::{build_batch, mine_impostors, npair_loss, score_matrix, triplet_loss, Mining, TripletConfig};
use coloc::tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coloc::Result<()> {
    let corpus = generate_corpus(40, 3, &CorpusConfig::default())?;
    let model = Model::init(&ModelConfig::desk(corpus.vocab.len()), 3, InitScheme::FanInUniform)?;
    let batch = build_batch(&corpus, 6, &mut ChaCha8Rng::seed_from_u64(1))?;

    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let scores = score_matrix(&batch, &vars)?;
    let s = scores.values.value();
    let b = batch.len();
    println!("score matrix (rows images, columns captions; diagonal = matching pairs)");
    for i in 0..b {
        let row: Vec<String> = (0..b).map(|j| format!("{:7.3}", s.data()[i * b + j])).collect();
        println!("  {}", row.join(" "));
    }

    let cfg = TripletConfig {
        margin: 0.2,
        mining: Mining::Hardest,
    };
    let (caption_impostor, image_impostor) = mine_impostors(&s, cfg.mining);
    println!("hardest caption impostor per image {caption_impostor:?}");
    println!("hardest image impostor per caption {image_impostor:?}");

    for name in ["npair", "triplet"] {
        let tape = Tape::new();
        let m = coloc::losses::ScoreMatrix::from_var(tape.param(s.clone()))?;
        let loss = if name == "npair" { npair_loss(&m)? } else { triplet_loss(&m, &cfg)? };
        let g = tape.backward(loss)?.wrt(m.values);
        let touched = (0..b * b).filter(|&k| k / b != k % b && g.data()[k] != 0.0).count();
        println!("{name:8} loss {:.4}, off-diagonal entries with gradient {touched} of {}", loss.item(), b * b - b);
    }
    Ok(())
}
