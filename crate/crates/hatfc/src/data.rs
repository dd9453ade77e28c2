//! Dataset ingest, synthetic generators, standardization, windowing.
//!
//! CSV input: header row, optional date column (any string format),
//! remaining columns numeric, comma separated, UTF-8. Splits are
//! chronological; the scaler is fitted on training rows only. A
//! standardized dataset is immutable afterwards, so window iteration is
//! read-only and concurrent-safe.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::checkpoint::ScalerState;

/// Chronological region of a split dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Train,
    Val,
    Test,
}

/// Per-channel standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Channels whose training variance was zero (std forced to 1).
    pub constant_channels: Vec<usize>,
}

impl Scaler {
    /// Fit on the given rows; constant channels get std 1 and a flag.
    pub fn fit(values: &Mat<f64>, rows: std::ops::Range<usize>) -> Self {
        let v = values.cols();
        let n = (rows.end - rows.start).max(1) as f64;
        let mut means = vec![0.0; v];
        let mut stds = vec![0.0; v];
        for r in rows.clone() {
            for c in 0..v {
                means[c] += values.get(r, c);
            }
        }
        for m in &mut means {
            *m /= n;
        }
        for r in rows {
            for c in 0..v {
                let d = values.get(r, c) - means[c];
                stds[c] += d * d;
            }
        }
        let mut constant_channels = Vec::new();
        for (c, s) in stds.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
                constant_channels.push(c);
            }
        }
        Scaler {
            means,
            stds,
            constant_channels,
        }
    }

    pub fn transform(&self, values: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(values.rows(), values.cols(), |r, c| {
            (values.get(r, c) - self.means[c]) / self.stds[c]
        })
    }

    pub fn inverse(&self, values: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(values.rows(), values.cols(), |r, c| {
            values.get(r, c) * self.stds[c] + self.means[c]
        })
    }

    pub fn to_state(&self) -> ScalerState {
        ScalerState {
            means: self.means.clone(),
            stds: self.stds.clone(),
        }
    }

    pub fn from_state(s: &ScalerState) -> Self {
        Scaler {
            means: s.means.clone(),
            stds: s.stds.clone(),
            constant_channels: Vec::new(),
        }
    }
}

/// A multivariate series with chronological split indices and an
/// optional fitted scaler.
#[derive(Debug, Clone)]
pub struct SeriesDataset {
    pub name: String,
    values: Mat<f64>,
    timestamps: Option<Vec<String>>,
    train_end: usize,
    val_end: usize,
    scaler: Option<Scaler>,
}

/// One training pair: `lookback` rows immediately followed by `target`
/// rows; the two never overlap.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub lookback: Mat<f64>,
    pub target: Mat<f64>,
    pub origin: usize,
}

impl SeriesDataset {
    /// Wrap raw values with the standard 70/10/20 chronological split.
    pub fn new(name: &str, values: Mat<f64>, timestamps: Option<Vec<String>>) -> Result<Self> {
        let mut ds = SeriesDataset {
            name: name.to_string(),
            values,
            timestamps,
            train_end: 0,
            val_end: 0,
        scaler: None,
        };
        ds.set_split(0.7, 0.1)?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn v(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Mat<f64> {
        &self.values
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn train_end(&self) -> usize {
        self.train_end
    }

    pub fn val_end(&self) -> usize {
        self.val_end
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        self.scaler.as_ref()
    }

    /// Chronological split by fractions; the remainder is the test
    /// region. Must satisfy 0 < train_end < val_end <= N.
    pub fn set_split(&mut self, train_frac: f64, val_frac: f64) -> Result<()> {
        if self.scaler.is_some() {
            return Err(Error::Contract(
                "cannot re-split after standardization".into(),
            ));
        }
        let n = self.n();
        let train_end = ((n as f64 * train_frac).floor() as usize).max(1);
        let val_end = (train_end + ((n as f64 * val_frac).floor() as usize).max(1)).min(n);
        if train_end >= val_end || val_end > n {
            return Err(Error::Config(format!(
                "split fractions ({train_frac}, {val_frac}) give invalid bounds \
                 train_end={train_end}, val_end={val_end}, n={n}"
            )));
        }
        self.train_end = train_end;
        self.val_end = val_end;
        Ok(())
    }

    pub fn region_range(&self, region: Region) -> std::ops::Range<usize> {
        match region {
            Region::Train => 0..self.train_end,
            Region::Val => self.train_end..self.val_end,
            Region::Test => self.val_end..self.n(),
        }
    }

    /// Fit the scaler on training rows only and transform every row.
    pub fn standardize(&mut self) -> Result<()> {
        if self.scaler.is_some() {
            return Err(Error::Contract("dataset already standardized".into()));
        }
        let scaler = Scaler::fit(&self.values, 0..self.train_end);
        self.values = scaler.transform(&self.values);
        self.scaler = Some(scaler);
        Ok(())
    }

    /// Transform every row with an externally fitted scaler (e.g. the
    /// one stored in a checkpoint).
    pub fn standardize_with(&mut self, scaler: Scaler) -> Result<()> {
        if self.scaler.is_some() {
            return Err(Error::Contract("dataset already standardized".into()));
        }
        if scaler.means.len() != self.v() {
            return Err(Error::Contract(format!(
                "scaler covers {} channels, dataset has {}",
                scaler.means.len(),
                self.v()
            )));
        }
        self.values = scaler.transform(&self.values);
        self.scaler = Some(scaler);
        Ok(())
    }

    /// Every valid (lookback, target) pair whose rows fall entirely in
    /// the region, advancing by `stride`.
    pub fn window_iter(
        &self,
        lookback: usize,
        t_total: usize,
        stride: usize,
        region: Region,
    ) -> Result<Vec<WindowSample>> {
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        let range = self.region_range(region);
        let len = range.end - range.start;
        let span = lookback + t_total;
        if len < span {
            return Err(Error::Contract(format!(
                "region {region:?} has {len} rows, a window needs {span}"
            )));
        }
        let mut out = Vec::with_capacity((len - span) / stride + 1);
        let mut origin = range.start;
        while origin + span <= range.end {
            out.push(WindowSample {
                lookback: self.values.slice_rows(origin, lookback)?,
                target: self.values.slice_rows(origin + lookback, t_total)?,
                origin,
            });
            origin += stride;
        }
        Ok(out)
    }

    /// Write in the same CSV format `load_csv` reads.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut header = vec!["date".to_string()];
        header.extend((0..self.v()).map(|c| format!("v{c}")));
        writeln!(w, "{}", header.join(","))?;
        for r in 0..self.n() {
            let ts = match &self.timestamps {
                Some(t) => t[r].clone(),
                None => r.to_string(),
            };
            let mut row = vec![ts];
            row.extend((0..self.v()).map(|c| format!("{}", self.values.get(r, c))));
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parse a CSV file into a dataset. `date_column` names the column to
/// treat as timestamps; a missing date column is tolerated. All other
/// columns must be fully numeric — blank or malformed cells are
/// reported with their row and column.
pub fn load_csv(path: &Path, date_column: Option<&str>) -> Result<SeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("bad header row: {e}")))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let date_name = date_column.unwrap_or("date");
    let date_idx = headers.iter().position(|h| h == date_name);

    let value_cols: Vec<usize> = (0..headers.len()).filter(|i| Some(*i) != date_idx).collect();
    if value_cols.is_empty() {
        return Err(Error::Ingest("no numeric columns in file".into()));
    }

    let mut data: Vec<f64> = Vec::new();
    let mut timestamps: Vec<String> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Ingest(format!("row {}: {e}", row_idx + 2)))?;
        if let Some(di) = date_idx {
            timestamps.push(record.get(di).unwrap_or("").to_string());
        }
        for &ci in &value_cols {
            let cell = record.get(ci).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::Ingest(format!(
                    "blank cell at row {} column {} ({})",
                    row_idx + 2,
                    ci + 1,
                    headers[ci]
                )));
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Ingest(format!(
                    "cannot parse '{cell}' at row {} column {} ({})",
                    row_idx + 2,
                    ci + 1,
                    headers[ci]
                ))
            })?;
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(Error::Ingest("file has no data rows".into()));
    }
    let v = value_cols.len();
    let values = Mat::from_vec(data.len() / v, v, data)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "dataset".into());
    SeriesDataset::new(&name, values, date_idx.map(|_| timestamps))
}

/// Synthetic series families for desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// a·sin(2πt/24) + 0.001·t plus noise.
    SineTrend,
    /// Two sinusoids at periods 24 and 168 plus a slow trend and noise;
    /// the short and long periodicities mimic sub-daily and weekly
    /// structure.
    Multiscale,
    /// Exactly constant channels (noise ignored).
    Constant,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_trend" => Ok(SynthKind::SineTrend),
            "multiscale" => Ok(SynthKind::Multiscale),
            "constant" => Ok(SynthKind::Constant),
            other => Err(Error::Config(format!(
                "unknown synthetic kind '{other}' (sine_trend, multiscale, constant)"
            ))),
        }
    }
}

/// Deterministic synthetic dataset; identical seeds give identical
/// values bit for bit.
pub fn synth_generate(
    kind: SynthKind,
    n: usize,
    v: usize,
    noise_std: f64,
    seed: u64,
) -> Result<SeriesDataset> {
    if n < 1 || v < 1 {
        return Err(Error::Config("synthetic series needs n, v >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let period = 24.0;
    let noise = if noise_std > 0.0 {
        Some(Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut values = Mat::zeros(n, v);
    for t in 0..n {
        for c in 0..v {
            let phase = c as f64 * 3.0;
            let tt = t as f64 + phase;
            let base = match kind {
                SynthKind::SineTrend => (tau * tt / period).sin() + 0.001 * t as f64,
                SynthKind::Multiscale => {
                    (tau * tt / period).sin()
                        + 0.6 * (tau * tt / (7.0 * period)).sin()
                        + 0.0005 * t as f64
                }
                SynthKind::Constant => 1.0 + 0.5 * c as f64,
            };
            let eps = match (&noise, kind) {
                (Some(dist), SynthKind::SineTrend | SynthKind::Multiscale) => {
                    dist.sample(&mut rng)
                }
                _ => 0.0,
            };
            values.set(t, c, base + eps);
        }
    }
    let name = match kind {
        SynthKind::SineTrend => "synth_sine_trend",
        SynthKind::Multiscale => "synth_multiscale",
        SynthKind::Constant => "synth_constant",
    };
    SeriesDataset::new(name, values, None)
}
