//! Scaled dot-product attention with a causal mask, and the per-head view
//! of multi-head attention.

use mmtx::attention::{
    multi_head_attention_with_weights, scaled_dot_attention, AttentionMask, MultiHeadParams,
    ScaleMode,
};
use mmtx::params::ParamStore;
use mmtx::{SplitMix64, Tape, Tensor};

fn show(name: &str, t: &Tensor) {
    println!("{name}:");
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:6.3}")).collect();
        println!("  [{}]", row.join(" "));
    }
}

fn main() -> mmtx::Result<()> {
    let mut rng = SplitMix64::new(5);
    let x = Tensor::uniform(&[4, 6], 1.0, &mut rng);

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let mask = AttentionMask::causal(4);
    let (_, weights) = scaled_dot_attention(&mut tape, xv, xv, xv, 6, Some(&mask))?;
    show("causal self-attention weights", tape.value(weights));

    let mut store = ParamStore::new();
    let heads = MultiHeadParams::init(&mut store, "demo", 6, 3, &mut rng)?;
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, false);
    let xv = tape.leaf(x, false);
    let (ctx, per_head) = multi_head_attention_with_weights(
        &mut tape,
        xv,
        xv,
        xv,
        &heads,
        &vars,
        ScaleMode::PerHead,
        None,
    )?;
    for (h, w) in per_head.iter().enumerate() {
        show(&format!("head {h} weights"), tape.value(*w));
    }
    show("summed head outputs", tape.value(ctx));
    Ok(())
}
