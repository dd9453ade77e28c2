//! The two-level generation loop piece by piece: segment seeds,
//! step-wise refinement, context growth, and mid-stream resumption
//! from a serialized state.
//!
//! Run with: cargo run --example generation_state

use hatfc::autoregress::{generate, generate_from, GenerationState, StateSnapshot};
use hatfc::mat::Mat;
use hatfc::model::{ModelConfig, ModelParams};
use hatfc::Result;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() -> Result<()> {
    let cfg = ModelConfig {
        lookback: 12,
        segment_len: 3,
        segments: 2,
        window: 6,
        hidden: 8,
        heads: 2,
        d_k: 8,
        d_v: 8,
        n_blocks: 1,
        variates: 1,
        ..ModelConfig::default()
    };
    let params = ModelParams::<f64>::init(&cfg, 21)?;
    let mut rng = StdRng::seed_from_u64(2);
    let x = Mat::from_fn(cfg.lookback, 1, |_, _| rng.gen_range(-1.0..1.0));

    // full horizon in one call: K segments of H refined steps
    let forecast = generate(&x, &params, &cfg)?;
    println!(
        "forecast of {} = {} x {} steps:",
        cfg.horizon(),
        cfg.segments,
        cfg.segment_len
    );
    for s in 0..cfg.horizon() {
        println!("  step {:>2}: {:+.4}", s + 1, forecast.get(s, 0));
    }

    // the same forecast driven step by step through an inspectable
    // state: stop after 4 of 6 steps, serialize, resume elsewhere
    let mut partial = GenerationState::new(x, &cfg)?;
    println!("\ncontext length starts at {}", partial.build_context()?.rows());
    for _ in 0..4 {
        hatfc::autoregress::step(&mut partial, &params, &cfg)?;
    }
    println!(
        "after 4 steps: segment {}, step {}, context {} rows",
        partial.segment() + 1,
        partial.step() + 1,
        partial.build_context()?.rows()
    );
    let json = serde_json::to_string(&partial.snapshot()).expect("serialize");
    println!("snapshot is {} bytes of JSON", json.len());

    let snap: StateSnapshot = serde_json::from_str(&json).expect("parse");
    let resumed = GenerationState::<f64>::resume(&snap, &cfg)?;
    let finished = generate_from(resumed, &params, &cfg)?;
    let identical = forecast
        .data()
        .iter()
        .zip(finished.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("resumed forecast bit-identical to the straight run: {identical}");

    Ok(())
}
