//! Verify recorded gradients against central finite differences, from
//! single primitives up to the whole teacher-forced training loss.
//!
//! Run with: cargo run --release --example gradient_check

use hatfc::autoregress::teacher_forced_graph;
use hatfc::mat::Mat;
use hatfc::model::{GraphParams, ModelConfig, ModelParams};
use hatfc::tensor::finite_diff_check;
use hatfc::training::hierarchical_loss_graph;
use hatfc::Result;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() -> Result<()> {
    // a single primitive: softmax of a matrix product
    let mut rng = StdRng::seed_from_u64(9);
    let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let err = finite_diff_check::<f64, _>(
        |g, ps| {
            let m = g.matmul(&ps[0], &ps[1])?;
            let s = g.softmax_rows(&m)?;
            let sq = g.mul(&s, &s)?;
            g.sum(&sq)
        },
        &[(a, vec![3, 4]), (b, vec![4, 2])],
        1e-6,
    )?;
    println!("softmax(matmul) gradient check: max relative error {err:.2e}");

    // the full model: every parameter of a small forecaster, checked
    // through segment initialization, windowed attention, refinement
    // and the hierarchical loss
    let cfg = ModelConfig {
        lookback: 10,
        segment_len: 3,
        segments: 2,
        window: 6,
        hidden: 6,
        heads: 2,
        d_k: 5,
        d_v: 4,
        n_blocks: 1,
        variates: 2,
        ..ModelConfig::default()
    };
    let params = ModelParams::<f64>::init(&cfg, 3)?;
    let flat: Vec<(Vec<f64>, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|v| (v.data.to_vec(), v.shape.clone()))
        .collect();
    println!(
        "checking all {} parameters of the full model ...",
        params.num_params()
    );
    let x = Mat::from_fn(10, 2, |_, _| rng.gen_range(-0.3..0.3));
    let y = Mat::from_fn(6, 2, |_, _| rng.gen_range(-0.3..0.3));
    let lambda = cfg.lambda();
    let cfg2 = cfg.clone();
    let err = finite_diff_check::<f64, _>(
        move |g, ps| {
            let gp = GraphParams::from_tensors(&cfg2, ps)?;
            let preds = teacher_forced_graph(g, &gp, &cfg2, &x, &y, false)?;
            hierarchical_loss_graph(g, &preds, &y, 0.8, &lambda)
        },
        &flat,
        1e-5,
    )?;
    println!("full teacher-forced loss: max relative error {err:.2e}");
    Ok(())
}
