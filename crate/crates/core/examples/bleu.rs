//! Corpus BLEU from summed per-sentence statistics.

use mmtx::eval::{bleu, bleu_tokens, BleuStats};

fn main() -> mmtx::Result<()> {
    let refs = [
        "a man rides a bike.",
        "two dogs play in the snow.",
        "the cat sleeps.",
    ];
    let hyps = [
        "a man rides a bicycle.",
        "two dogs are playing in snow.",
        "the cat sleeps.",
    ];
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(&refs) {
        let s = BleuStats::sentence(&bleu_tokens(h)?, &bleu_tokens(r)?);
        println!("{h:32} matches {:?} / {:?}", s.matches, s.totals);
        total += s;
    }
    println!(
        "corpus BLEU {:.2} (smoothed {:.2})",
        total.score(false),
        total.score(true)
    );
    println!("same via bleu(): {:.2}", bleu(&hyps, &refs, false)?);
    println!("identity: {:.1}", bleu(&refs, &refs, false)?);
    Ok(())
}
