//! Learns a subword vocabulary, then shows tokenization, encoding and exact
//! reconstruction.

use mmtx::data::{group_tokenize, normalize, SubwordVocab};

fn main() -> mmtx::Result<()> {
    let corpus = [
        "A dog runs across the grass.",
        "Two dogs, three cats.",
        "The dog and the cat are running!",
        "A man plays a guitar on the street.",
    ];
    let vocab = SubwordVocab::learn(&corpus, 60)?;
    println!(
        "{} entries, {} merges; first merges: {:?}",
        vocab.len(),
        vocab.merges().len(),
        &vocab.merges()[..5]
    );
    for s in ["Two dogs, three cats.", "A catdog runs!"] {
        let text = normalize(s);
        let ids = vocab.encode(&text)?;
        let pieces: Vec<&str> = ids.iter().map(|&i| vocab.piece(i).unwrap_or("?")).collect();
        println!(
            "{s:?}\n  groups {:?}\n  pieces {pieces:?}\n  decoded {:?}",
            group_tokenize(&text)?,
            vocab.decode(&ids)
        );
        assert_eq!(vocab.decode(&ids), text);
    }
    Ok(())
}
