//! Complexity harness: windowed versus full attention.
//!
//! Counts are multiply-accumulate style and use one convention on both
//! sides so ratios are meaningful: `d` MACs per pair for the logits,
//! 4 ops per pair for the softmax (max-subtract, exp, sum, divide),
//! `d` MACs per pair for the weighted sum. Windowed attention touches
//! `min(w_eff, t+1)` pairs at step t with `w_eff = floor(W/2) + 1`;
//! the dense kernel computes all T² pairs and masks afterwards, which
//! is what the naive implementation really does.
//!
//! Memory estimates model the kernel's own scratch: the score matrix
//! (band or dense). Query/key/value/output buffers are caller-owned
//! and reported separately, since the total-footprint and per-step
//! numbers answer different questions.
//!
//! Wall-time measurements pin everything to the calling thread, run a
//! warm-up pass, and take the median of the repeats.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::attention::{attend_counting, full_attention_counting, DecayKernel, WindowSpec};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Which attention kernel a measurement refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Windowed,
    Full,
}

impl std::fmt::Display for AttnMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttnMode::Windowed => write!(f, "windowed"),
            AttnMode::Full => write!(f, "full"),
        }
    }
}

/// Ops accounted per attended pair: d (logits) + 4 (softmax) + d (sum).
pub fn ops_per_pair(d: usize) -> u64 {
    2 * d as u64 + 4
}

/// Number of (query, key) pairs each kernel touches.
pub fn pair_count(mode: AttnMode, l: usize, w: usize) -> u64 {
    match mode {
        AttnMode::Full => (l * l) as u64,
        AttnMode::Windowed => {
            let w_eff = w / 2 + 1;
            if l <= w_eff {
                // triangular: every window still growing
                (l * (l + 1) / 2) as u64
            } else {
                // growing prefix, then saturated windows of w_eff
                ((w_eff - 1) * w_eff / 2 + (l - w_eff + 1) * w_eff) as u64
            }
        }
    }
}

/// Analytic multiply-accumulate count for logits + softmax + weighted
/// sum at sequence length `l`, window hyperparameter `w`, head dim `d`.
pub fn flop_count(mode: AttnMode, l: usize, w: usize, d: usize) -> u64 {
    pair_count(mode, l, w) * ops_per_pair(d)
}

/// Scratch and I/O byte estimates from the kernels' allocation model.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MemoryEstimate {
    /// The kernel's own peak scratch: its score matrix (band L×w_eff
    /// or dense L×L).
    pub scratch_bytes: u64,
    /// Caller-owned q, k, v, output buffers (4 · L · d elements).
    pub io_bytes: u64,
}

/// Peak live-buffer model for one kernel invocation.
pub fn memory_estimate(
    mode: AttnMode,
    l: usize,
    w: usize,
    d: usize,
    elem_bytes: usize,
) -> MemoryEstimate {
    let scratch = match mode {
        AttnMode::Full => (l * l) as u64,
        AttnMode::Windowed => (l * (w / 2 + 1)) as u64,
    };
    MemoryEstimate {
        scratch_bytes: scratch * elem_bytes as u64,
        io_bytes: (4 * l * d) as u64 * elem_bytes as u64,
    }
}

/// One measured grid point.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub l: usize,
    pub mode: String,
    pub flops: u64,
    pub measured_flops: u64,
    pub median_seconds: f64,
    pub scratch_bytes: u64,
    pub io_bytes: u64,
}

/// Full harness output: grid rows plus fitted log-log exponents.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub w: usize,
    pub w_eff: usize,
    pub d: usize,
    pub repeats: usize,
    pub rows: Vec<ScalingRow>,
    pub windowed_slope: f64,
    pub windowed_r2: f64,
    pub full_slope: f64,
    pub full_r2: f64,
    /// flop_count(full) / flop_count(windowed) per measured L.
    pub analytic_ratios: Vec<(usize, f64)>,
    /// Ratio renormalized by w_eff / W: comparable to a nominal-span
    /// window reading of L / W.
    pub normalized_ratios: Vec<(usize, f64)>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares slope and R² of y against x.
fn slope_r2(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

/// Minimum trustworthy median; modern monotonic clocks tick well below
/// 100 ns, so a microsecond clears ten ticks.
const MIN_MEASURABLE_SECONDS: f64 = 1e-6;

/// Measure wall-time scaling of both kernels over the `ls` grid.
/// Median of `repeats` runs after one discarded warm-up; single thread.
pub fn time_scaling(ls: &[usize], w: usize, d: usize, repeats: usize) -> Result<ScalingReport> {
    if ls.is_empty() {
        return Err(Error::Contract("empty measurement grid".into()));
    }
    if repeats < 5 {
        return Err(Error::Contract(format!(
            "need at least 5 repeats for a stable median, got {repeats}"
        )));
    }
    let win = WindowSpec::new(w)?;
    let kernel = DecayKernel::<f32>::with_gamma(0.1)?;
    let mut rows = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0x5ca1e);

    // global warm-up at the largest size so the first grid point does
    // not absorb allocator and frequency ramp-up costs
    {
        let l = *ls.iter().max().expect("non-empty grid");
        let q = Mat::from_fn(l, d, |_, _| rng.gen_range(-0.5f32..0.5));
        let k = Mat::from_fn(l, d, |_, _| rng.gen_range(-0.5f32..0.5));
        let v = Mat::from_fn(l, d, |_, _| rng.gen_range(-0.5f32..0.5));
        let pe = Mat::from_fn(win.w_eff().min(l), d, |_, _| rng.gen_range(-0.5f32..0.5));
        attend_counting(&q, &k, &v, &pe, &kernel, &win)?;
        full_attention_counting(&q, &k, &v, true, None, None)?;
    }

    for &l in ls {
        let q = Mat::from_fn(l, d, |_, _| rng.gen_range(-0.5f32..0.5));
        let k = Mat::from_fn(l, d, |_, _| rng.gen_range(-0.5f32..0.5));
        let v = Mat::from_fn(l, d, |_, _| rng.gen_range(-0.5f32..0.5));
        let pe = Mat::from_fn(win.w_eff().min(l), d, |_, _| rng.gen_range(-0.5f32..0.5));

        for mode in [AttnMode::Windowed, AttnMode::Full] {
            // each timed repeat averages a few invocations so scheduler
            // bursts cannot dominate a single short measurement
            const INNER: usize = 3;
            let mut measured_flops = 0;
            let mut run = || -> Result<f64> {
                let t0 = Instant::now();
                for _ in 0..INNER {
                    measured_flops = match mode {
                        AttnMode::Windowed => attend_counting(&q, &k, &v, &pe, &kernel, &win)?.1,
                        AttnMode::Full => {
                            full_attention_counting(&q, &k, &v, true, None, None)?.1
                        }
                    };
                }
                Ok(t0.elapsed().as_secs_f64() / INNER as f64)
            };
            run()?; // warm-up
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                times.push(run()?);
            }
            let med = median(times);
            if med < MIN_MEASURABLE_SECONDS {
                return Err(Error::Bench(format!(
                    "median {med:.2e}s at L={l} is below timer resolution; use a larger L"
                )));
            }
            let mem = memory_estimate(mode, l, w, d, std::mem::size_of::<f32>());
            rows.push(ScalingRow {
                l,
                mode: mode.to_string(),
                flops: flop_count(mode, l, w, d),
                measured_flops,
                median_seconds: med,
                scratch_bytes: mem.scratch_bytes,
                io_bytes: mem.io_bytes,
            });
        }
    }

    let fit = |mode: &str| -> (f64, f64) {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| ((r.l as f64).ln(), r.median_seconds.ln()))
            .collect();
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        slope_r2(&xs, &ys)
    };
    let (windowed_slope, windowed_r2) = fit("windowed");
    let (full_slope, full_r2) = fit("full");

    let w_eff = w / 2 + 1;
    let analytic_ratios: Vec<(usize, f64)> = ls
        .iter()
        .map(|&l| {
            (
                l,
                flop_count(AttnMode::Full, l, w, d) as f64
                    / flop_count(AttnMode::Windowed, l, w, d) as f64,
            )
        })
        .collect();
    let normalized_ratios = analytic_ratios
        .iter()
        .map(|&(l, r)| (l, r * w_eff as f64 / w as f64))
        .collect();

    Ok(ScalingReport {
        w,
        w_eff,
        d,
        repeats,
        rows,
        windowed_slope,
        windowed_r2,
        full_slope,
        full_r2,
        analytic_ratios,
        normalized_ratios,
    })
}

impl ScalingReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(
            f,
            "# ops per pair = 2d+4 (d logits + 4 softmax + d weighted sum); \
             windowed pairs = sum_t min(w_eff, t+1), full pairs = L^2; \
             scratch = score matrix only, io = q/k/v/out"
        )?;
        writeln!(
            f,
            "l,mode,flops,measured_flops,median_seconds,scratch_bytes,io_bytes"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                r.l, r.mode, r.flops, r.measured_flops, r.median_seconds, r.scratch_bytes, r.io_bytes
            )?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windowed_pairs_close_under_the_band_formula() {
        // direct sum against the closed form
        for (l, w) in [(10usize, 4usize), (100, 32), (7, 32), (64, 64), (1, 8)] {
            let w_eff = w / 2 + 1;
            let direct: u64 = (0..l).map(|t| (t + 1).min(w_eff) as u64).sum();
            assert_eq!(
                pair_count(AttnMode::Windowed, l, w),
                direct,
                "L={l} W={w}"
            );
        }
    }

    #[test]
    fn analytic_ratio_near_l_over_w_eff() {
        let l = 1024;
        let w = 32;
        let d = 64;
        let ratio = flop_count(AttnMode::Full, l, w, d) as f64
            / flop_count(AttnMode::Windowed, l, w, d) as f64;
        let nominal = l as f64 / 17.0; // w_eff = 17
        assert!(
            (ratio - nominal).abs() / nominal < 0.1,
            "ratio {ratio} vs {nominal}"
        );
        // headline reading at nominal span W: ratio * w_eff / W ≈ L / W = 32
        let normalized = ratio * 17.0 / 32.0;
        assert!(
            (normalized - 32.0).abs() / 32.0 < 0.1,
            "normalized {normalized}"
        );
    }

    #[test]
    fn doubled_window_gives_order_thirty_one_ratio() {
        // W = 64 spans w_eff = 33, so dense/windowed at L = 1024 sits
        // near 1024/33 ≈ 31, the order-32 regime at nominal W = 32
        let ratio = flop_count(AttnMode::Full, 1024, 64, 64) as f64
            / flop_count(AttnMode::Windowed, 1024, 64, 64) as f64;
        assert!((29.0..=33.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn covering_window_costs_a_causal_triangle() {
        // w_eff >= L turns the band into the full causal triangle, so
        // dense/windowed ≈ 2 (the triangular-mask saving).
        let l = 256;
        let ratio = flop_count(AttnMode::Full, l, 2 * l, 32) as f64
            / flop_count(AttnMode::Windowed, l, 2 * l, 32) as f64;
        assert!((1.9..=2.1).contains(&ratio), "ratio {ratio}");
        // at W = L the effective span is L/2 + 1, so the saving is the
        // triangle plus the clipped band: about 8/3
        let clipped = flop_count(AttnMode::Full, l, l, 32) as f64
            / flop_count(AttnMode::Windowed, l, l, 32) as f64;
        assert!((2.4..=2.9).contains(&clipped), "clipped ratio {clipped}");
    }

    #[test]
    fn doubling_length_doubles_windowed_count() {
        let w = 32;
        let d = 64;
        for l in [128usize, 512, 2048] {
            let a = flop_count(AttnMode::Windowed, l, w, d);
            let b = flop_count(AttnMode::Windowed, 2 * l, w, d);
            // exactly linear once windows saturate: extra L rows of w_eff pairs
            let expected = a + (l as u64) * (w as u64 / 2 + 1) * ops_per_pair(d);
            assert_eq!(b, expected);
        }
    }

    #[test]
    fn memory_model_matches_hand_counts() {
        // dense: 4 * 1024² bytes for the score matrix alone
        let full = memory_estimate(AttnMode::Full, 1024, 32, 1, 4);
        assert_eq!(full.scratch_bytes, 4 * 1024 * 1024);
        // banded: 4 * 1024 * 17
        let win = memory_estimate(AttnMode::Windowed, 1024, 32, 1, 4);
        assert_eq!(win.scratch_bytes, 69_632);
        let ratio = full.scratch_bytes as f64 / win.scratch_bytes as f64;
        assert!((ratio - 1024.0 / 17.0).abs() < 1e-9);
    }

    #[test]
    fn instrumented_counters_match_analytic_counts() {
        use crate::attention::{attend_counting, full_attention_counting};
        let l = 50;
        let w = 16;
        let d = 12;
        let win = WindowSpec::new(w).unwrap();
        let kernel = DecayKernel::<f64>::with_gamma(0.2).unwrap();
        let q = Mat::from_fn(l, d, |r, c| ((r * d + c) as f64 * 0.01).sin());
        let k = Mat::from_fn(l, d, |r, c| ((r + c) as f64 * 0.02).cos());
        let v = Mat::from_fn(l, d, |r, c| (r as f64 - c as f64) * 0.01);
        let pe = Mat::zeros(win.w_eff(), d);
        let (_, counted) = attend_counting(&q, &k, &v, &pe, &kernel, &win).unwrap();
        assert_eq!(counted, flop_count(AttnMode::Windowed, l, w, d));

        let (_, full_counted) = full_attention_counting(&q, &k, &v, true, None, None).unwrap();
        assert_eq!(full_counted, flop_count(AttnMode::Full, l, w, d));
    }

    #[test]
    fn repeats_below_five_are_rejected() {
        assert!(matches!(
            time_scaling(&[64], 8, 8, 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn small_scaling_run_produces_fits() {
        let report = time_scaling(&[64, 128, 256], 16, 16, 5).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.windowed_slope.is_finite());
        assert!(report.full_slope > report.windowed_slope);
        assert!(report.full_r2 > 0.5);
        // times must grow with L in both modes
        let times: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.mode == "full")
            .map(|r| r.median_seconds)
            .collect();
        assert!(times.windows(2).all(|p| p[1] > p[0]));
    }
}
