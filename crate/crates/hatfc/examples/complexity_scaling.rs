//! Windowed versus dense attention cost: analytic counts, the memory
//! model, and measured wall-time scaling.
//!
//! Run with: cargo run --release --example complexity_scaling

use hatfc::bench::{flop_count, memory_estimate, time_scaling, AttnMode};
use hatfc::Result;

fn main() -> Result<()> {
    let (w, d) = (32usize, 64usize);
    let w_eff = w / 2 + 1;

    println!("analytic multiply-accumulate counts (W = {w}, w_eff = {w_eff}, d = {d}):");
    println!("{:>6} {:>16} {:>16} {:>8}", "L", "windowed", "full", "ratio");
    for l in [256usize, 512, 1024, 2048, 4096] {
        let win = flop_count(AttnMode::Windowed, l, w, d);
        let full = flop_count(AttnMode::Full, l, w, d);
        println!("{l:>6} {win:>16} {full:>16} {:>8.1}", full as f64 / win as f64);
    }
    let ratio = flop_count(AttnMode::Full, 1024, w, d) as f64
        / flop_count(AttnMode::Windowed, 1024, w, d) as f64;
    println!(
        "\nat L = 1024 the ratio is {ratio:.1}; normalized to the nominal span W \
         (x w_eff/W) it reads {:.1}x",
        ratio * w_eff as f64 / w as f64
    );

    println!("\nkernel scratch model (f32):");
    for l in [512usize, 1024, 2048] {
        let win = memory_estimate(AttnMode::Windowed, l, w, d, 4);
        let full = memory_estimate(AttnMode::Full, l, w, d, 4);
        println!(
            "  L = {l:>4}: banded scores {:>10} B   dense scores {:>12} B   ratio {:>6.1}",
            win.scratch_bytes,
            full.scratch_bytes,
            full.scratch_bytes as f64 / win.scratch_bytes as f64
        );
    }

    println!("\nmeasuring wall time (median of 7, single thread) ...");
    let rep = time_scaling(&[512, 1024, 2048], w, d, 7)?;
    for row in &rep.rows {
        println!(
            "  L = {:>4} {:>9}: {:>9.2} ms   ({} MACs)",
            row.l,
            row.mode,
            row.median_seconds * 1e3,
            row.flops
        );
    }
    println!(
        "log-log slopes: windowed {:.2} (r² {:.3}), full {:.2} (r² {:.3})",
        rep.windowed_slope, rep.windowed_r2, rep.full_slope, rep.full_r2
    );
    Ok(())
}
