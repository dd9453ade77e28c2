//! Train a small forecaster on synthetic data, checkpoint it, reload,
//! and forecast — the end-to-end happy path.
//!
//! Run with: cargo run --release --example train_and_forecast

use hatfc::data::{synth_generate, Region, SynthKind};
use hatfc::evaluation::{mae, mse};
use hatfc::mat::{cast, Mat};
use hatfc::model::{checkpoint, ModelConfig};
use hatfc::training::{fit, TrainConfig};
use hatfc::{autoregress, Result};

fn main() -> Result<()> {
    // two-channel series: daily-ish cycle plus a slow weekly swell
    let mut data = synth_generate(SynthKind::Multiscale, 1500, 2, 0.05, 42)?;
    data.standardize()?;

    let model_cfg = ModelConfig {
        lookback: 48,
        segment_len: 6,
        segments: 2, // horizon = 12
        window: 16,
        hidden: 32,
        heads: 2,
        d_k: 32,
        d_v: 32,
        n_blocks: 1,
        variates: 2,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 8,
        batch_size: 32,
        lr: 1e-3,
        seed: 7,
        train_stride: 2,
        ..TrainConfig::default()
    };

    println!("training {} parameters ...", {
        hatfc::model::ModelParams::<f32>::init(&model_cfg, 0)?.num_params()
    });
    let report = fit::<f32>(&data, &model_cfg, &train_cfg)?;
    for r in &report.epochs {
        println!(
            "  epoch {:>2}: train loss {:>8.4}  val mse {:.4}  val mae {:.4}",
            r.epoch, r.train_loss, r.val_mse, r.val_mae
        );
    }

    // persist the best weights and reload them
    let dir = std::env::temp_dir().join("hatfc_example_ckpt");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    let scaler = data.scaler().map(|s| s.to_state());
    checkpoint::save(&path, &model_cfg, &report.best_params, scaler.as_ref())?;
    let (cfg2, params2, _) = checkpoint::load::<f32>(&path)?;
    println!("checkpoint round-trip ok ({} bytes)", std::fs::metadata(&path)?.len());

    // forecast the first test window and score it
    let window = data
        .window_iter(cfg2.lookback, cfg2.horizon(), 1, Region::Test)?
        .remove(0);
    let x: Mat<f32> = cast(&window.lookback);
    let forecast = autoregress::generate(&x, &params2, &cfg2)?;
    let forecast64 = forecast.map(|v| v as f64);
    println!(
        "first test window: mse {:.4}, mae {:.4} (standardized scale)",
        mse(&forecast64, &window.target)?,
        mae(&forecast64, &window.target)?
    );
    for step in 0..cfg2.horizon() {
        println!(
            "  step {:>2}: predicted ({:+.3}, {:+.3})  actual ({:+.3}, {:+.3})",
            step + 1,
            forecast64.get(step, 0),
            forecast64.get(step, 1),
            window.target.get(step, 0),
            window.target.get(step, 1)
        );
    }
    Ok(())
}
