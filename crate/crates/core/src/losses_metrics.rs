//! Training losses and evaluation metrics.
//!
//! Plain-value versions take slices; the `*_var` versions build the same
//! quantity on a tape so it can be differentiated.

use crate::dispatch_sim::{matching_outcome, DispatchScenario};
use crate::error::{Error, Result};
use crate::heads::{CENTER_CELL, GRID_CELLS};
use crate::tape::{Tape, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_w: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            lambda_w: 0.01,
            lambda_e: 0.008,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("lambda_t", self.lambda_t), ("lambda_w", self.lambda_w), ("lambda_e", self.lambda_e)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("weights.{name} must be a finite nonnegative number"));
            }
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { beta: 2.0, gamma: 0.05 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("reward.{name} must be a finite nonnegative number"));
            }
        }
        errs
    }
}

/// Distance in km from the centre cell to each cell of the 3×3 block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceCosts {
    pub d_g: [f64; GRID_CELLS],
}

impl DistanceCosts {
    pub fn from_cell_size(km: f64) -> Self {
        let mut d_g = [0.0; GRID_CELLS];
        for (g, d) in d_g.iter_mut().enumerate() {
            let (dr, dc) = ((g / 3) as f64 - 1.0, (g % 3) as f64 - 1.0);
            *d = km * (dr * dr + dc * dc).sqrt();
        }
        Self { d_g }
    }
}

impl Default for DistanceCosts {
    fn default() -> Self {
        Self::from_cell_size(3.0)
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidData(format!("distribution has entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidData(format!("distribution sums to {s}")));
    }
    Ok(())
}

pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute error between two equally shaped matrices.
pub fn mae_var(tape: &mut Tape<'_>, pred: Var, target: Var) -> Var {
    let d = tape.sub(pred, target);
    let d = tape.abs(d);
    tape.mean(d)
}

pub fn metric_mae_rmse(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    let mae = mae_loss(pred, target)?;
    if pred.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok((mae, mse.sqrt()))
}

/// `−Σ π log π` with `0·log 0 = 0`.
pub fn entropy(pi: &[f64]) -> Result<f64> {
    check_simplex(pi)?;
    Ok(-pi.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// Row entropy of strictly positive rows (softmax output).
pub fn entropy_var(tape: &mut Tape<'_>, pi: Var) -> Var {
    let l = tape.log(pi);
    let pl = tape.mul(pi, l);
    let s = tape.sum(pl);
    tape.scale(s, -1.0)
}

fn cdf(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

/// `Σ_g |CDF(π)_g − CDF(p)_g|` in the fixed row-major cell order.
pub fn wasserstein_1d(pi: &[f64], p: &[f64]) -> Result<f64> {
    check_len(pi, p)?;
    check_simplex(pi)?;
    check_simplex(p)?;
    Ok(cdf(pi).iter().zip(cdf(p)).map(|(a, b)| (a - b).abs()).sum())
}

/// Upper-triangular ones: `row·U` is the running sum of `row`.
fn cumsum_matrix(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if i <= j { 1.0 } else { 0.0 })
}

/// Wasserstein term for a `1×G` row against a fixed distribution.
pub fn wasserstein_var(tape: &mut Tape<'_>, pi: Var, p: &[f64]) -> Var {
    let g = p.len();
    let u = tape.constant(cumsum_matrix(g));
    let c = tape.matmul(pi, u);
    let target = tape.constant(Array2::from_shape_vec((1, g), cdf(p)).expect("row"));
    let d = tape.sub(c, target);
    let d = tape.abs(d);
    tape.sum(d)
}

/// `R_g = β·m_g − γ·D_g`.
pub fn reward_grid(m: &[f64], costs: &DistanceCosts, rp: &RewardParams) -> Vec<f64> {
    m.iter()
        .zip(costs.d_g.iter())
        .map(|(&m, &d)| rp.beta * m - rp.gamma * d)
        .collect()
}

/// Components of the dispatch objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DispatchLoss {
    pub total: f64,
    pub l_rf: f64,
    /// `None` when the scenario has no ground-truth distribution.
    pub l_w: Option<f64>,
    pub entropy: f64,
}

/// Tape handles of the dispatch objective.
#[derive(Debug, Clone, Copy)]
pub struct DispatchLossVars {
    pub total: Var,
    pub l_rf: Var,
    pub l_w: Option<Var>,
    pub entropy: Var,
}

/// `L_d = L_rf + λ_w·L_w + λ_e·H(π)` with `L_rf = −Σ_g π_g·R_g(π)`, where
/// the matching rate inside `R_g` depends on `π` through the supply.
pub fn dispatch_loss_var(
    tape: &mut Tape<'_>,
    pi: Var,
    scenario: &DispatchScenario,
    weights: &LossWeights,
    rp: &RewardParams,
) -> Result<DispatchLossVars> {
    if tape.shape(pi) != (1, GRID_CELLS) {
        return Err(Error::Shape(format!("dispatch distribution is {:?}, expected 1x9", tape.shape(pi))));
    }
    let v0 = scenario.v0();
    if v0 <= 0.0 {
        return Err(Error::InvalidArgument(format!("no vacant taxis at the centre (v0 = {v0})")));
    }
    let m = tape.matching_rate(pi, v0, &scenario.demand_next, &scenario.competitors_next);
    let r = tape.scale(m, rp.beta);
    let cost = Array2::from_shape_vec((1, GRID_CELLS), scenario.costs.d_g.iter().map(|d| -rp.gamma * d).collect())
        .expect("row");
    let cost = tape.constant(cost);
    let r = tape.add(r, cost);
    let pr = tape.mul(pi, r);
    let s = tape.sum(pr);
    let l_rf = tape.scale(s, -1.0);
    let h = entropy_var(tape, pi);
    let mut total = l_rf;
    if weights.lambda_e != 0.0 {
        let t = tape.scale(h, weights.lambda_e);
        total = tape.add(total, t);
    }
    let l_w = match &scenario.p_real {
        Some(p) => {
            let w = wasserstein_var(tape, pi, p);
            if weights.lambda_w != 0.0 {
                let t = tape.scale(w, weights.lambda_w);
                total = tape.add(total, t);
            }
            Some(w)
        }
        None => {
            log::debug!("scenario without p_real, Wasserstein term skipped");
            None
        }
    };
    Ok(DispatchLossVars {
        total,
        l_rf,
        l_w,
        entropy: h,
    })
}

pub fn dispatch_loss(pi: &[f64], scenario: &DispatchScenario, weights: &LossWeights, rp: &RewardParams) -> Result<DispatchLoss> {
    check_simplex(pi)?;
    let mut tape = Tape::new();
    let p = tape.constant(Array2::from_shape_vec((1, pi.len()), pi.to_vec()).map_err(|e| Error::Shape(e.to_string()))?);
    let v = dispatch_loss_var(&mut tape, p, scenario, weights, rp)?;
    Ok(DispatchLoss {
        total: tape.scalar(v.total),
        l_rf: tape.scalar(v.l_rf),
        l_w: v.l_w.map(|w| tape.scalar(w)),
        entropy: tape.scalar(v.entropy),
    })
}

/// `L = L_LLM + λ_t·L_t`.
pub fn composite_loss(l_llm: f64, l_task: f64, weights: &LossWeights) -> f64 {
    l_llm + weights.lambda_t * l_task
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchMetrics {
    pub mmr: f64,
    pub mdd: f64,
    pub w_dist: f64,
    pub skipped_instances: usize,
}

/// Either metrics report, serialised untagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricsReport {
    Forecast(ForecastMetrics),
    Dispatch(DispatchMetrics),
}

/// MMR, MDD and W-Dist averaged over instances with vacant taxis at the
/// centre. Instances without a ground-truth distribution do not enter
/// W-Dist.
pub fn metric_dispatch(policies: &[Vec<f64>], scenarios: &[DispatchScenario]) -> Result<DispatchMetrics> {
    if policies.len() != scenarios.len() {
        return Err(Error::Shape(format!("{} policies for {} scenarios", policies.len(), scenarios.len())));
    }
    let (mut mmr, mut mdd, mut wd) = (0.0, 0.0, 0.0);
    let (mut used, mut with_real, mut skipped) = (0usize, 0usize, 0usize);
    for (pi, sc) in policies.iter().zip(scenarios) {
        let v0 = sc.v0();
        if v0 <= 0.0 {
            skipped += 1;
            continue;
        }
        check_simplex(pi)?;
        let out = matching_outcome(v0, pi, &sc.demand_next, &sc.competitors_next)?;
        mmr += out.matched_ours.iter().sum::<f64>() / v0;
        mdd += pi.iter().zip(sc.costs.d_g.iter()).map(|(p, c)| p * c).sum::<f64>();
        if let Some(p) = &sc.p_real {
            wd += wasserstein_1d(pi, p)?;
            with_real += 1;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidData(format!("all {skipped} instances skipped (no vacant taxis)")));
    }
    Ok(DispatchMetrics {
        mmr: mmr / used as f64,
        mdd: mdd / used as f64,
        w_dist: if with_real > 0 { wd / with_real as f64 } else { f64::NAN },
        skipped_instances: skipped,
    })
}

/// Point mass on the centre cell.
pub fn stay_put() -> Vec<f64> {
    let mut p = vec![0.0; GRID_CELLS];
    p[CENTER_CELL] = 1.0;
    p
}
