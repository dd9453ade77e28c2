//! Reference forecasters on a synthetic series: persistence and the
//! linear family, trained with the same Adam loop as the main model.
//!
//! Run with: cargo run --release --example baselines

use hatfc::data::{synth_generate, Region, SynthKind};
use hatfc::evaluation::{fit_linear_baseline, mse, persistence_baseline, LinearKind};
use hatfc::mat::Mat;
use hatfc::training::TrainConfig;
use hatfc::Result;

fn main() -> Result<()> {
    let mut data = synth_generate(SynthKind::Multiscale, 2000, 2, 0.08, 11)?;
    data.standardize()?;
    let (lookback, horizon) = (48usize, 12usize);

    let train = data.window_iter(lookback, horizon, 1, Region::Train)?;
    let test = data.window_iter(lookback, horizon, 1, Region::Test)?;
    println!("{} training windows, {} test windows", train.len(), test.len());

    let score = |preds: &[Mat<f64>]| -> f64 {
        preds
            .iter()
            .zip(&test)
            .map(|(p, w)| mse(p, &w.target).unwrap())
            .sum::<f64>()
            / test.len() as f64
    };

    let persistence: Vec<Mat<f64>> = test
        .iter()
        .map(|w| persistence_baseline(&w.lookback, horizon))
        .collect();
    println!("\n{:>12}: test mse {:.4}", "persistence", score(&persistence));

    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 64,
        lr: 1e-2,
        seed: 4,
        ..TrainConfig::default()
    };
    for kind in [LinearKind::Linear, LinearKind::DLinear, LinearKind::NLinear] {
        let model = fit_linear_baseline(kind, &train, &cfg)?;
        let preds: Vec<Mat<f64>> = test
            .iter()
            .map(|w| model.predict(&w.lookback))
            .collect::<Result<_>>()?;
        println!("{:>12}: test mse {:.4}", kind.to_string(), score(&preds));
    }
    Ok(())
}
