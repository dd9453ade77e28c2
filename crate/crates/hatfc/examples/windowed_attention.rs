//! The windowed attention pieces in isolation: causal windows, the
//! learnable decay, and agreement with the dense reference oracle.
//!
//! Run with: cargo run --release --example windowed_attention

use hatfc::attention::{
    attend_with_pe, causal_window, full_attention_oracle, DecayKernel, WindowSpec,
};
use hatfc::mat::Mat;
use hatfc::Result;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() -> Result<()> {
    // the causal window never looks forward and spans floor(W/2)+1
    let w = 8;
    println!("causal windows for W = {w} (effective span {}):", w / 2 + 1);
    for t in [0usize, 2, 4, 9, 40] {
        let win = causal_window(t, w, 0);
        println!("  t = {t:>2}: [{}, {}]", win.start(), win.end());
    }

    // decay weights: exp(-gamma * offset), exactly 1 at the self position
    let kernel = DecayKernel::<f64>::with_gamma(0.5)?;
    let weights = kernel.decay_weights(10, 6..=10);
    println!("\ndecay at gamma = 0.5 over offsets 4..0: {weights:.3?}");

    // windowed attention vs the dense causal oracle with a covering window
    let t = 24;
    let dk = 16;
    let mut rng = StdRng::seed_from_u64(5);
    let q = Mat::from_fn(t, dk, |_, _| rng.gen_range(-0.2..0.2));
    let k = Mat::from_fn(t, dk, |_, _| rng.gen_range(-0.2..0.2));
    let v = Mat::from_fn(t, 4, |_, _| rng.gen_range(-0.2..0.2));
    let tiny_decay = DecayKernel::<f64>::with_gamma(1e-8)?;
    let covering = WindowSpec::new(4 * t)?;
    let pe_zero = Mat::zeros(covering.w_eff().min(t), dk);
    let ours = attend_with_pe(&q, &k, &v, &pe_zero, &tiny_decay, &covering)?;
    let dense = full_attention_oracle(&q, &k, &v, true, None, None)?;
    let max_diff = (0..t)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .map(|(r, c)| (ours.get(r, c) - dense.get(r, c)).abs())
        .fold(0.0f64, f64::max)
        ;
    println!("\ncovering window vs dense causal oracle: max |diff| = {max_diff:.2e}");

    // with a real window, positions outside it get exactly zero weight:
    // perturbing values beyond the window cannot move the output
    let narrow = WindowSpec::new(8)?; // spans 5 positions
    let pe = Mat::zeros(narrow.w_eff(), dk);
    let strong = DecayKernel::<f64>::with_gamma(0.7)?;
    let base = attend_with_pe(&q, &k, &v, &pe, &strong, &narrow)?;
    let mut v2 = v.clone();
    for p in 0..t - 8 {
        for c in 0..4 {
            v2.set(p, c, 1000.0);
        }
    }
    let moved = attend_with_pe(&q, &k, &v2, &pe, &strong, &narrow)?;
    let last_row_same = (0..4).all(|c| base.get(t - 1, c) == moved.get(t - 1, c));
    println!("last position ignores values beyond its window: {last_row_same}");
    Ok(())
}
