//! Single-step taxi repositioning over a 3×3 neighbourhood.
//!
//! Vacant taxis at the centre cell are split across the nine cells by a
//! distribution `π`. Matching is fluid: a cell with supply
//! `s_g = v0·π_g + comp_g` and demand `d_g` matches each vehicle with rate
//! `min(1, d_g / s_g)`.

use crate::data_io::{clock_features, CLOCK_CHANNELS};
use crate::error::{Error, Result};
use crate::heads::{CENTER_CELL, GRID_CELLS};
use crate::losses_metrics::{metric_dispatch, stay_put, DispatchMetrics, DistanceCosts};
use crate::tape::matching_rate_scalar;
use chrono::{DateTime, Duration, Timelike, Utc};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchObservation {
    /// Vacant taxis per cell; the centre entry is the fleet being moved.
    pub vacant: Vec<f64>,
    /// `K×9` passenger requests, oldest first.
    pub demand_hist: Vec<Vec<f64>>,
    /// `K×9` competing vehicles, oldest first.
    pub competitor_hist: Vec<Vec<f64>>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchScenario {
    pub obs: DispatchObservation,
    pub demand_next: Vec<f64>,
    pub competitors_next: Vec<f64>,
    /// Ground-truth repositioning distribution, when known.
    pub p_real: Option<Vec<f64>>,
    #[serde(default)]
    pub costs: DistanceCosts,
}

impl DispatchScenario {
    /// Vacant taxis at the centre.
    pub fn v0(&self) -> f64 {
        self.obs.vacant.get(CENTER_CELL).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let nine = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != GRID_CELLS {
                return Err(Error::InvalidData(format!("{name} has {} cells, expected 9", v.len())));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::InvalidData(format!("{name} has a negative or non-finite entry")));
            }
            Ok(())
        };
        nine("vacant", &self.obs.vacant)?;
        nine("demand_next", &self.demand_next)?;
        nine("competitors_next", &self.competitors_next)?;
        if self.obs.demand_hist.len() != self.obs.competitor_hist.len() || self.obs.demand_hist.is_empty() {
            return Err(Error::InvalidData("demand and competitor histories differ in length".into()));
        }
        for row in self.obs.demand_hist.iter().chain(&self.obs.competitor_hist) {
            nine("history row", row)?;
        }
        if let Some(p) = &self.p_real {
            nine("p_real", p)?;
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidData(format!("p_real sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn history_len(&self) -> usize {
        self.obs.demand_hist.len()
    }

    /// `K×9×2` node features (demand, competitors).
    pub fn history_tensor(&self) -> Array3<f64> {
        let k = self.history_len();
        Array3::from_shape_fn((k, GRID_CELLS, 2), |(t, g, f)| {
            if f == 0 {
                self.obs.demand_hist[t][g]
            } else {
                self.obs.competitor_hist[t][g]
            }
        })
    }

    /// Clock features of the `K` history steps ending at the observation time.
    pub fn clock(&self, interval_minutes: u32) -> Array2<f64> {
        let k = self.history_len();
        let mut c = Array2::zeros((k, CLOCK_CHANNELS));
        for t in 0..k {
            let ts = self.obs.timestamp - Duration::minutes(((k - 1 - t) as i64) * interval_minutes as i64);
            for (j, v) in clock_features(ts).iter().enumerate() {
                c[[t, j]] = *v;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchingOutcome {
    /// Per-vehicle matching rate in each cell.
    pub m: Vec<f64>,
    /// Our vehicles matched in each cell, `v0·π_g·m_g`.
    pub matched_ours: Vec<f64>,
    pub supply: Vec<f64>,
}

pub fn matching_outcome(v0: f64, pi: &[f64], demand: &[f64], competitors: &[f64]) -> Result<MatchingOutcome> {
    if !(v0 > 0.0) {
        return Err(Error::InvalidArgument(format!("v0 must be positive, got {v0}")));
    }
    if pi.len() != demand.len() || pi.len() != competitors.len() {
        return Err(Error::Shape("matching inputs differ in length".into()));
    }
    let mut out = MatchingOutcome {
        m: Vec::with_capacity(pi.len()),
        matched_ours: Vec::with_capacity(pi.len()),
        supply: Vec::with_capacity(pi.len()),
    };
    for g in 0..pi.len() {
        let supply = v0 * pi[g] + competitors[g];
        let (m, _) = matching_rate_scalar(v0, supply, demand[g]);
        out.m.push(m);
        out.matched_ours.push(v0 * pi[g] * m);
        out.supply.push(supply);
    }
    Ok(out)
}

/// Row-major 8-connectivity over the 3×3 block.
pub fn neighborhood_adjacency() -> Array2<f64> {
    Array2::from_shape_fn((GRID_CELLS, GRID_CELLS), |(a, b)| {
        let (ra, ca) = ((a / 3) as i32, (a % 3) as i32);
        let (rb, cb) = ((b / 3) as i32, (b % 3) as i32);
        if a != b && (ra - rb).abs() <= 1 && (ca - cb).abs() <= 1 {
            1.0
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concentration {
    Center,
    Cell(usize),
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub count: usize,
    pub history_len: usize,
    pub concentration: Concentration,
    pub base_demand: f64,
    pub peak_demand: f64,
    pub competitor_intensity: f64,
    pub vacant_mean: f64,
    /// Temperature of the ground-truth softmax.
    pub tau: f64,
    pub interval_minutes: u32,
    pub start: DateTime<Utc>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            history_len: 9,
            concentration: Concentration::Center,
            base_demand: 2.0,
            peak_demand: 12.0,
            competitor_intensity: 2.0,
            vacant_mean: 10.0,
            tau: 2.0,
            interval_minutes: 5,
            start: DateTime::from_timestamp(1_635_724_800, 0).expect("valid"),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.history_len == 0 {
            errs.push("scenarios.history_len must be >= 1".into());
        }
        if let Concentration::Cell(c) = self.concentration {
            if c >= GRID_CELLS {
                errs.push(format!("scenarios.concentration cell {c} outside 0..9"));
            }
        }
        for (name, v) in [
            ("base_demand", self.base_demand),
            ("peak_demand", self.peak_demand),
            ("competitor_intensity", self.competitor_intensity),
            ("vacant_mean", self.vacant_mean),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("scenarios.{name} must be finite and nonnegative"));
            }
        }
        if !(self.tau > 0.0) {
            errs.push("scenarios.tau must be positive".into());
        }
        if self.interval_minutes == 0 {
            errs.push("scenarios.interval_minutes must be positive".into());
        }
        errs
    }

    fn daily_factor(ts: DateTime<Utc>) -> f64 {
        let tod = (ts.hour() * 60 + ts.minute()) as f64 / 1440.0;
        1.0 + 0.3 * (2.0 * std::f64::consts::PI * tod).sin()
    }

    /// Expected demand per cell at `ts` for hotspot `hot`.
    pub fn expected_demand(&self, hot: usize, ts: DateTime<Utc>) -> Vec<f64> {
        let f = Self::daily_factor(ts);
        (0..GRID_CELLS)
            .map(|g| f * (self.base_demand + if g == hot { self.peak_demand } else { 0.0 }))
            .collect()
    }
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng)
}

fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Scenario `i` is observed at `start + (K + i)·interval`; ground truth is
/// `softmax((demand_next − competitors_next) / τ)`.
pub fn synth_scenarios(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<DispatchScenario>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.history_len;
    let step = Duration::minutes(cfg.interval_minutes as i64);
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let hot = match cfg.concentration {
            Concentration::Center => CENTER_CELL,
            Concentration::Cell(c) => c,
            Concentration::Random => rng.random_range(0..GRID_CELLS),
        };
        let now = cfg.start + step * (k + i) as i32;
        let mut demand_hist = Vec::with_capacity(k);
        let mut competitor_hist = Vec::with_capacity(k);
        for t in 0..k {
            let ts = now - step * (k - t) as i32;
            let lam = cfg.expected_demand(hot, ts);
            demand_hist.push(lam.iter().map(|&l| poisson(&mut rng, l)).collect());
            competitor_hist.push((0..GRID_CELLS).map(|_| poisson(&mut rng, cfg.competitor_intensity)).collect());
        }
        let lam = cfg.expected_demand(hot, now);
        let demand_next: Vec<f64> = lam.iter().map(|&l| poisson(&mut rng, l)).collect();
        let competitors_next: Vec<f64> = (0..GRID_CELLS).map(|_| poisson(&mut rng, cfg.competitor_intensity)).collect();
        let mut vacant: Vec<f64> = (0..GRID_CELLS).map(|_| poisson(&mut rng, cfg.vacant_mean)).collect();
        vacant[CENTER_CELL] = vacant[CENTER_CELL].max(1.0);
        let net: Vec<f64> = demand_next.iter().zip(&competitors_next).map(|(d, c)| d - c).collect();
        out.push(DispatchScenario {
            obs: DispatchObservation {
                vacant,
                demand_hist,
                competitor_hist,
                timestamp: now,
            },
            p_real: Some(softmax(&net, cfg.tau)),
            demand_next,
            competitors_next,
            costs: DistanceCosts::default(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    StayPut,
    Uniform,
    GreedyDemand,
}

pub fn baseline_policy(kind: BaselineKind, scenario: &DispatchScenario) -> Vec<f64> {
    match kind {
        BaselineKind::StayPut => stay_put(),
        BaselineKind::Uniform => vec![1.0 / GRID_CELLS as f64; GRID_CELLS],
        BaselineKind::GreedyDemand => {
            let mut best = 0;
            let net = |g: usize| scenario.demand_next[g] - scenario.competitors_next[g];
            for g in 1..GRID_CELLS {
                if net(g) > net(best) {
                    best = g;
                }
            }
            let mut p = vec![0.0; GRID_CELLS];
            p[best] = 1.0;
            p
        }
    }
}

pub fn evaluate_policy<F>(policy: F, scenarios: &[DispatchScenario]) -> Result<DispatchMetrics>
where
    F: Fn(&DispatchScenario) -> Vec<f64>,
{
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("no scenarios to evaluate".into()));
    }
    let policies: Vec<Vec<f64>> = scenarios.iter().map(&policy).collect();
    metric_dispatch(&policies, scenarios)
}

pub fn write_scenarios(path: impl AsRef<Path>, scenarios: &[DispatchScenario]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in scenarios {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scenarios(path: impl AsRef<Path>) -> Result<Vec<DispatchScenario>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: DispatchScenario = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidData(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        s.validate()
            .map_err(|e| Error::InvalidData(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}
