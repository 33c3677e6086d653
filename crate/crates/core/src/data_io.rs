//! Series loading, windowing, normalisation and synthetic generation.

use crate::error::{Error, Result};
use chrono::{DateTime, Datelike, Duration, NaiveDateTime, Timelike, Utc};
use ndarray::{s, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// Number of clock channels appended per history step: time-of-day scalar
/// plus a day-of-week one-hot.
pub const CLOCK_CHANNELS: usize = 8;

pub const STD_FLOOR: f64 = 1e-6;

/// A multivariate series over `N` nodes, `values` laid out `L×N×F`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub values: Array3<f64>,
    pub interval_minutes: u32,
    pub start_timestamp: DateTime<Utc>,
    pub node_ids: Vec<String>,
}

/// Sidecar manifest describing a series CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesManifest {
    pub interval_minutes: u32,
    pub start_timestamp: DateTime<Utc>,
    pub node_ids: Vec<String>,
}

impl SeriesDataset {
    pub fn new(
        values: Array3<f64>,
        interval_minutes: u32,
        start_timestamp: DateTime<Utc>,
        node_ids: Vec<String>,
    ) -> Result<Self> {
        let ds = Self {
            values,
            interval_minutes,
            start_timestamp,
            node_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (_, n, f) = self.values.dim();
        if self.interval_minutes == 0 {
            return Err(Error::InvalidData("interval_minutes must be positive".into()));
        }
        if n != self.node_ids.len() {
            return Err(Error::InvalidData(format!(
                "{} node ids for {n} nodes",
                self.node_ids.len()
            )));
        }
        if f == 0 {
            return Err(Error::InvalidData("no features".into()));
        }
        let mut seen = HashSet::new();
        for id in &self.node_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidData(format!("duplicate node id {id}")));
            }
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            let row = pos / (n * f);
            return Err(Error::InvalidData(format!("non-finite value at step {row}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.values.dim().1
    }

    pub fn num_features(&self) -> usize {
        self.values.dim().2
    }

    pub fn timestamp(&self, step: usize) -> DateTime<Utc> {
        self.start_timestamp + Duration::minutes(self.interval_minutes as i64 * step as i64)
    }

    /// Feature `f` of node `n` as a length-`L` vector.
    pub fn node_series(&self, n: usize, f: usize) -> Vec<f64> {
        self.values.slice(s![.., n, f]).to_vec()
    }

    /// Restriction to steps `[start, end)`.
    pub fn slice_steps(&self, start: usize, end: usize) -> SeriesDataset {
        SeriesDataset {
            values: self.values.slice(s![start..end, .., ..]).to_owned(),
            interval_minutes: self.interval_minutes,
            start_timestamp: self.timestamp(start),
            node_ids: self.node_ids.clone(),
        }
    }

    pub fn manifest(&self) -> SeriesManifest {
        SeriesManifest {
            interval_minutes: self.interval_minutes,
            start_timestamp: self.start_timestamp,
            node_ids: self.node_ids.clone(),
        }
    }
}

fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|n| n.and_utc())
}

/// Reads a `timestamp,node_0,...` CSV with one observed feature per node.
///
/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn load_series(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::Csv {
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    if header.get(0) != Some("timestamp") || header.len() < 2 {
        return Err(Error::Csv {
            row: 1,
            msg: "header must be timestamp,node_0,...".into(),
        });
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = node_ids.len();
    let mut times: Vec<DateTime<Utc>> = Vec::new();
    let mut flat = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Csv {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != n + 1 {
            return Err(Error::Csv {
                row,
                msg: format!("ragged row: expected {} fields, found {}", n + 1, rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| Error::Csv {
            row,
            msg: format!("unparseable timestamp '{}'", &rec[0]),
        })?;
        if let Some(prev) = times.last() {
            if ts <= *prev {
                return Err(Error::Csv {
                    row,
                    msg: "timestamps not strictly increasing".into(),
                });
            }
            if times.len() >= 2 {
                let cadence = times[1] - times[0];
                if ts - *prev != cadence {
                    return Err(Error::Csv {
                        row,
                        msg: format!(
                            "cadence gap: expected {} min, found {} min",
                            cadence.num_minutes(),
                            (ts - *prev).num_minutes()
                        ),
                    });
                }
            }
        }
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Csv {
                row,
                msg: format!("column {} is not a number: '{cell}'", node_ids[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row,
                    msg: format!("non-finite value in column {}", node_ids[j]),
                });
            }
            flat.push(v);
        }
        times.push(ts);
    }
    if times.len() < 2 {
        return Err(Error::Csv {
            row: times.len() + 1,
            msg: "need at least two rows to infer the interval".into(),
        });
    }
    let minutes = (times[1] - times[0]).num_minutes();
    if minutes <= 0 || (times[1] - times[0]) != Duration::minutes(minutes) {
        return Err(Error::Csv {
            row: 3,
            msg: "interval must be a positive whole number of minutes".into(),
        });
    }
    let values = Array3::from_shape_vec((times.len(), n, 1), flat)
        .map_err(|e| Error::InvalidData(e.to_string()))?;
    SeriesDataset::new(values, minutes as u32, times[0], node_ids)
}

/// Writes feature 0 of every node in the CSV layout read by [`load_series`].
pub fn write_series(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidData(e.to_string()))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(ds.node_ids.iter().cloned());
    let csv_err = |e: csv::Error| Error::InvalidData(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..ds.len() {
        let mut rec = vec![ds.timestamp(t).format("%Y-%m-%dT%H:%M:%SZ").to_string()];
        rec.extend((0..ds.num_nodes()).map(|n| format!("{}", ds.values[[t, n, 0]])));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_manifest(m: &SeriesManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(m)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SeriesManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One supervised forecasting instance.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `K×N×F`
    pub history: Array3<f64>,
    /// `T×N`, feature 0 of the following `T` steps.
    pub target: Array2<f64>,
    /// `K×8`: time-of-day in `[0,1)` then a Monday-first day-of-week one-hot.
    pub clock: Array2<f64>,
    pub origin_index: usize,
}

/// Clock features of a single timestamp.
pub fn clock_features(ts: DateTime<Utc>) -> [f64; CLOCK_CHANNELS] {
    let mut out = [0.0; CLOCK_CHANNELS];
    out[0] = (ts.hour() * 60 + ts.minute()) as f64 / 1440.0;
    out[1 + ts.weekday().num_days_from_monday() as usize] = 1.0;
    out
}

pub fn window_count(len: usize, k: usize, t: usize, stride: usize) -> usize {
    if len < k + t || stride == 0 {
        0
    } else {
        (len - k - t) / stride + 1
    }
}

/// Slides a `K`-step history / `T`-step target window over the series.
pub fn make_windows(
    ds: &SeriesDataset,
    k: usize,
    t: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if k == 0 || t == 0 || stride == 0 {
        return Err(Error::InvalidArgument("K, T and stride must be >= 1".into()));
    }
    if ds.len() < k + t {
        return Err(Error::InvalidArgument(format!(
            "series of length {} too short for K={k}, T={t}",
            ds.len()
        )));
    }
    let count = window_count(ds.len(), k, t, stride);
    Ok((0..count)
        .map(|i| {
            let o = i * stride;
            let history = ds.values.slice(s![o..o + k, .., ..]).to_owned();
            let target = ds.values.slice(s![o + k..o + k + t, .., 0]).to_owned();
            let mut clock = Array2::zeros((k, CLOCK_CHANNELS));
            for step in 0..k {
                let c = clock_features(ds.timestamp(o + step));
                clock.row_mut(step).assign(&ArrayView1::from(&c[..]));
            }
            WindowSample {
                history,
                target,
                clock,
                origin_index: o,
            }
        })
        .collect())
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    pub fn normalize(&self, feature: usize, v: f64) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }

    pub fn denormalize(&self, feature: usize, v: f64) -> f64 {
        v * self.std[feature] + self.mean[feature]
    }
}

/// Fits per-feature mean and population std over steps `train_range`.
pub fn zscore_fit(ds: &SeriesDataset, train_range: std::ops::Range<usize>) -> Result<NormStats> {
    if train_range.is_empty() || train_range.end > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "bad training range {train_range:?} for length {}",
            ds.len()
        )));
    }
    let part = ds.values.slice(s![train_range, .., ..]);
    let f = ds.num_features();
    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    for j in 0..f {
        let col = part.index_axis(Axis(2), j);
        let m = col.mean().expect("non-empty");
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
        mean[j] = m;
        std[j] = var.sqrt().max(STD_FLOOR);
    }
    Ok(NormStats { mean, std })
}

/// Normalises the trailing feature axis of `x`.
pub fn zscore_apply(x: &Array3<f64>, stats: &NormStats) -> Array3<f64> {
    let mut out = x.clone();
    for (j, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
        lane.mapv_inplace(|v| stats.normalize(j, v));
    }
    out
}

pub fn zscore_invert(x: &Array3<f64>, stats: &NormStats) -> Array3<f64> {
    let mut out = x.clone();
    for (j, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
        lane.mapv_inplace(|v| stats.denormalize(j, v));
    }
    out
}

/// Parameters of the synthetic periodic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub length: usize,
    pub steps_per_day: usize,
    pub interval_minutes: u32,
    pub base: f64,
    pub amplitude: f64,
    pub noise_sigma: f64,
    /// Per-node phase offsets in radians; drawn uniformly from `[0, 2π)`
    /// with the generator seed when absent.
    pub phases: Option<Vec<f64>>,
    pub start_timestamp: DateTime<Utc>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 20,
            length: 288 * 7,
            steps_per_day: 288,
            interval_minutes: 5,
            base: 20.0,
            amplitude: 10.0,
            noise_sigma: 1.0,
            phases: None,
            start_timestamp: DateTime::parse_from_rfc3339("2021-11-01T00:00:00Z")
                .expect("valid literal")
                .with_timezone(&Utc),
        }
    }
}

/// `base + amplitude·sin(2π·t/steps_per_day + phase_n) + N(0, σ²)`, clipped at 0.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SeriesDataset> {
    if cfg.length == 0 {
        return Err(Error::InvalidArgument("length must be positive".into()));
    }
    if cfg.n_nodes == 0 || cfg.steps_per_day == 0 || cfg.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument(
            "n_nodes and steps_per_day must be positive, noise_sigma nonnegative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases = match &cfg.phases {
        Some(p) if p.len() == cfg.n_nodes => p.clone(),
        Some(p) => {
            return Err(Error::InvalidArgument(format!(
                "{} phases for {} nodes",
                p.len(),
                cfg.n_nodes
            )))
        }
        None => {
            let u = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
            (0..cfg.n_nodes).map(|_| u.sample(&mut rng)).collect()
        }
    };
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut values = Array3::zeros((cfg.length, cfg.n_nodes, 1));
    for t in 0..cfg.length {
        let angle = std::f64::consts::TAU * t as f64 / cfg.steps_per_day as f64;
        for (n, phase) in phases.iter().enumerate() {
            let eps = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            values[[t, n, 0]] = (cfg.base + cfg.amplitude * (angle + phase).sin() + eps).max(0.0);
        }
    }
    let node_ids = (0..cfg.n_nodes).map(|n| format!("node_{n}")).collect();
    SeriesDataset::new(values, cfg.interval_minutes, cfg.start_timestamp, node_ids)
}

/// Dominant non-DC spectral magnitude over the mean absolute amplitude.
/// Degenerate inputs (fewer than 4 points, zero mean amplitude) score 0.
pub fn periodicity_score(series: &[f64]) -> f64 {
    let len = series.len();
    if len < 4 {
        return 0.0;
    }
    let mean_abs = series.iter().map(|v| v.abs()).sum::<f64>() / len as f64;
    if mean_abs <= 0.0 {
        return 0.0;
    }
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let peak = buf[1..].iter().map(|c| c.norm()).fold(0.0, f64::max);
    peak / mean_abs
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn csv_rows(rows: usize, nodes: usize) -> String {
        let mut s = String::from("timestamp");
        for n in 0..nodes {
            s += &format!(",node_{n}");
        }
        s.push('\n');
        let start = DateTime::parse_from_rfc3339("2021-11-26T00:00:00Z").unwrap();
        for r in 0..rows {
            let ts = start + Duration::minutes(5 * r as i64);
            s += &ts.format("%Y-%m-%dT%H:%M:%SZ").to_string();
            for n in 0..nodes {
                s += &format!(",{}", r * 10 + n);
            }
            s.push('\n');
        }
        s
    }

    #[test]
    fn loads_shape_and_interval() {
        let f = write_csv(&csv_rows(26, 3));
        let ds = load_series(f.path()).unwrap();
        assert_eq!(ds.len(), 26);
        assert_eq!(ds.num_nodes(), 3);
        assert_eq!(ds.interval_minutes, 5);
        assert_eq!(ds.values[[2, 1, 0]], 21.0);
    }

    #[test]
    fn cadence_gap_names_row() {
        let text = csv_rows(5, 2).replace("2021-11-26T00:15:00Z", "2021-11-26T00:20:00Z");
        let f = write_csv(&text);
        match load_series(f.path()) {
            Err(Error::Csv { row, msg }) => {
                assert_eq!(row, 5);
                assert!(msg.contains("cadence"), "{msg}");
            }
            other => panic!("expected cadence error, got {other:?}"),
        }
    }

    #[test]
    fn nan_cell_rejected() {
        let text = csv_rows(4, 2).replacen(",20,", ",NaN,", 1);
        let f = write_csv(&text);
        assert!(matches!(load_series(f.path()), Err(Error::Csv { row: 4, .. })));
    }

    #[test]
    fn ragged_and_missing_file() {
        let mut text = csv_rows(4, 2);
        text.push_str("2021-11-26T00:20:00Z,1\n");
        let f = write_csv(&text);
        assert!(matches!(load_series(f.path()), Err(Error::Csv { row: 6, .. })));
        assert!(matches!(load_series("/nonexistent/x.csv"), Err(Error::Io { .. })));
    }

    #[test]
    fn non_monotonic_rejected() {
        let text = csv_rows(4, 1).replace("2021-11-26T00:10:00Z", "2021-11-26T00:00:00Z");
        let f = write_csv(&text);
        assert!(matches!(load_series(f.path()), Err(Error::Csv { row: 4, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = SynthConfig {
            n_nodes: 3,
            length: 30,
            ..Default::default()
        };
        let ds = synth_generate(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_series(&ds, &p).unwrap();
        let back = load_series(&p).unwrap();
        assert_eq!(back.start_timestamp, ds.start_timestamp);
        assert_eq!(back.values, ds.values);
        let mp = dir.path().join("s.json");
        write_manifest(&ds.manifest(), &mp).unwrap();
        assert_eq!(read_manifest(&mp).unwrap(), ds.manifest());
    }

    fn ramp(len: usize) -> SeriesDataset {
        let values = Array3::from_shape_fn((len, 2, 1), |(t, n, _)| (t * 2 + n) as f64);
        SeriesDataset::new(
            values,
            5,
            SynthConfig::default().start_timestamp,
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn window_counts() {
        // enumeration oracle: count origins o with o + K + T <= L
        let enumerate = |l: usize, k: usize, t: usize, s: usize| {
            (0..l).step_by(s).filter(|o| o + k + t <= l).count()
        };
        assert_eq!(make_windows(&ramp(26), 12, 12, 1).unwrap().len(), 3);
        assert_eq!(enumerate(26, 12, 12, 1), 3);
        assert_eq!(make_windows(&ramp(24), 12, 12, 1).unwrap().len(), 1);
        for (l, k, t, s) in [(40, 5, 3, 2), (41, 12, 12, 3), (30, 1, 1, 7)] {
            assert_eq!(make_windows(&ramp(l), k, t, s).unwrap().len(), enumerate(l, k, t, s));
        }
        assert!(make_windows(&ramp(23), 12, 12, 1).is_err());
    }

    #[test]
    fn windows_are_disjoint_and_contiguous() {
        let ds = ramp(40);
        for w in make_windows(&ds, 5, 3, 2).unwrap() {
            let o = w.origin_index;
            assert_eq!(w.history[[0, 0, 0]], (o * 2) as f64);
            assert_eq!(w.history[[4, 1, 0]], ((o + 4) * 2 + 1) as f64);
            assert_eq!(w.target[[0, 0]], ((o + 5) * 2) as f64);
            assert_eq!(w.target[[2, 1]], ((o + 7) * 2 + 1) as f64);
            assert!(w.clock.column(0).iter().all(|&v| (0.0..1.0).contains(&v)));
            for r in w.clock.rows() {
                assert_eq!(r.slice(s![1..]).sum(), 1.0);
            }
        }
    }

    #[test]
    fn clock_encoding() {
        let ts = DateTime::parse_from_rfc3339("2021-11-26T06:00:00Z")
            .unwrap()
            .with_timezone(&Utc);
        let c = clock_features(ts);
        assert_eq!(c[0], 0.25);
        // Friday
        assert_eq!(c[1 + 4], 1.0);
    }

    #[test]
    fn zscore_examples() {
        let mut ds = ramp(2);
        ds.values = Array3::from_shape_vec((2, 1, 1), vec![0.0, 2.0]).unwrap();
        ds.node_ids = vec!["a".into()];
        let st = zscore_fit(&ds, 0..2).unwrap();
        assert_eq!((st.mean[0], st.std[0]), (1.0, 1.0));
        let z = zscore_apply(&ds.values, &st);
        assert_eq!(z.iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0]);

        ds.values.fill(7.0);
        let st = zscore_fit(&ds, 0..2).unwrap();
        assert_eq!(st.mean[0], 7.0);
        assert_eq!(st.std[0], STD_FLOOR);
        assert!(zscore_apply(&ds.values, &st).iter().all(|&v| v == 0.0));
        assert!(zscore_fit(&ds, 1..1).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_periodic() {
        let cfg = SynthConfig {
            n_nodes: 4,
            length: 96,
            steps_per_day: 24,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let a = synth_generate(&cfg, 9).unwrap();
        assert_eq!(a, synth_generate(&cfg, 9).unwrap());
        for t in 0..72 {
            for n in 0..4 {
                assert!((a.values[[t, n, 0]] - a.values[[t + 24, n, 0]]).abs() < 1e-9);
            }
        }
        let noisy = SynthConfig {
            noise_sigma: 1.0,
            ..cfg.clone()
        };
        let b = synth_generate(&noisy, 9).unwrap();
        let c = synth_generate(&noisy, 9).unwrap();
        let bits = |d: &SeriesDataset| d.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&b), bits(&c));
        assert!(synth_generate(&SynthConfig { length: 0, ..cfg }, 1).is_err());
    }

    /// Naive `O(L²)` DFT magnitude, independent of the FFT path.
    fn dft_score(x: &[f64]) -> f64 {
        let l = x.len();
        let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / l as f64;
        if l < 4 || mean_abs == 0.0 {
            return 0.0;
        }
        let mut best: f64 = 0.0;
        for k in 1..l {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let a = -std::f64::consts::TAU * ((k * n) % l) as f64 / l as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            best = best.max((re * re + im * im).sqrt());
        }
        best / mean_abs
    }

    #[test]
    fn periodicity_examples() {
        assert!(periodicity_score(&[5.0; 32]) < 1e-12);
        let sine: Vec<f64> = (0..64)
            .map(|n| (std::f64::consts::TAU * n as f64 / 64.0).sin())
            .collect();
        assert!((periodicity_score(&sine) - dft_score(&sine)).abs() < 1e-9);
        let tripled: Vec<f64> = sine.iter().map(|v| 3.0 * v).collect();
        assert!((periodicity_score(&sine) - periodicity_score(&tripled)).abs() < 1e-9);
        assert_eq!(periodicity_score(&[1.0, 2.0]), 0.0);
        assert_eq!(periodicity_score(&[0.0; 8]), 0.0);
    }

    #[test]
    fn periodic_beats_white_noise() {
        let cfg = SynthConfig {
            n_nodes: 3,
            length: 288,
            steps_per_day: 96,
            base: 20.0,
            amplitude: 10.0,
            noise_sigma: 1.0,
            ..Default::default()
        };
        let ds = synth_generate(&cfg, 3).unwrap();
        let flat = SynthConfig {
            amplitude: 0.0,
            ..cfg
        };
        let noise = synth_generate(&flat, 3).unwrap();
        for n in 0..3 {
            let p = periodicity_score(&ds.node_series(n, 0));
            let w = periodicity_score(&noise.node_series(n, 0));
            assert!(p > w, "node {n}: {p} <= {w}");
            assert!((p - dft_score(&ds.node_series(n, 0))).abs() < 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn zscore_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 4..40)) {
            let l = vals.len();
            let values = Array3::from_shape_vec((l, 1, 1), vals).unwrap();
            let ds = SeriesDataset::new(values, 5, SynthConfig::default().start_timestamp, vec!["x".into()]).unwrap();
            let st = zscore_fit(&ds, 0..l).unwrap();
            let back = zscore_invert(&zscore_apply(&ds.values, &st), &st);
            for (a, b) in back.iter().zip(ds.values.iter()) {
                proptest::prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn periodicity_matches_dft(vals in proptest::collection::vec(-50f64..50.0, 4..128), c in 0.1f64..10.0) {
            let s = periodicity_score(&vals);
            proptest::prop_assert!((s - dft_score(&vals)).abs() < 1e-9 * s.max(1.0));
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            proptest::prop_assert!((s - periodicity_score(&scaled)).abs() < 1e-9 * s.max(1.0));
        }
    }
}
