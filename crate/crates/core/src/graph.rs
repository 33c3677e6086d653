//! Spatial and DTW-based semantic adjacency construction.

use crate::data_io::SeriesDataset;
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Longest series fed to DTW; longer inputs are subsampled.
pub const DTW_MAX_POINTS: usize = 288;
pub const DEFAULT_SEMANTIC_DEGREE: usize = 10;

/// Physical and semantic `N×N` adjacency. Both symmetric with a zero
/// diagonal; self-loops are added by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyPair {
    pub a_sp: Array2<f64>,
    pub a_se: Array2<f64>,
    pub n: usize,
}

impl AdjacencyPair {
    pub fn new(a_sp: Array2<f64>, a_se: Array2<f64>) -> Result<Self> {
        let n = a_sp.nrows();
        for (name, a) in [("spatial", &a_sp), ("semantic", &a_se)] {
            if a.dim() != (n, n) {
                return Err(Error::Shape(format!("{name} adjacency is {:?}, expected {n}x{n}", a.dim())));
            }
        }
        Ok(Self { a_sp, a_se, n })
    }

    pub fn swapped(&self) -> Self {
        Self {
            a_sp: self.a_se.clone(),
            a_se: self.a_sp.clone(),
            n: self.n,
        }
    }
}

/// On-disk graph: `{"n": N, "edges": [[i, j, w], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl GraphFile {
    pub fn from_matrix(a: &Array2<f64>) -> Self {
        let n = a.nrows();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if a[[i, j]] != 0.0 {
                    edges.push((i, j, a[[i, j]]));
                }
            }
        }
        Self { n, edges }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        build_spatial_from_edges(&self.edges, self.n)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

pub fn build_spatial_from_edges(edges: &[(usize, usize, f64)], n: usize) -> Result<Array2<f64>> {
    let mut a = Array2::zeros((n, n));
    for (k, &(i, j, w)) in edges.iter().enumerate() {
        if i >= n || j >= n {
            return Err(Error::InvalidArgument(format!(
                "edge {k} ({i},{j}) out of range for {n} nodes"
            )));
        }
        if i == j {
            return Err(Error::InvalidArgument(format!("edge {k} is a self-edge on node {i}")));
        }
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!("edge {k} has non-positive weight {w}")));
        }
        let existing = a[[i, j]];
        if existing != 0.0 && existing != w {
            return Err(Error::InvalidArgument(format!(
                "edge ({i},{j}) given conflicting weights {existing} and {w}"
            )));
        }
        a[[i, j]] = w;
        a[[j, i]] = w;
    }
    Ok(a)
}

/// Unit-weight 4-connectivity over a `rows×cols` grid, node `r·cols + c`.
pub fn build_grid_adjacency(rows: usize, cols: usize) -> Array2<f64> {
    let n = rows * cols;
    let mut a = Array2::zeros((n, n));
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                a[[i, i + 1]] = 1.0;
                a[[i + 1, i]] = 1.0;
            }
            if r + 1 < rows {
                a[[i, i + cols]] = 1.0;
                a[[i + cols, i]] = 1.0;
            }
        }
    }
    a
}

/// Unconstrained DTW with local cost `|a_i - b_j|`.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("dtw on an empty sequence".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = (x - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

fn z_normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
        .sqrt()
        .max(crate::data_io::STD_FLOOR);
    x.iter().map(|v| (v - mean) / std).collect()
}

fn subsample(x: Vec<f64>, max_points: usize) -> Vec<f64> {
    if x.len() <= max_points {
        return x;
    }
    let stride = x.len().div_ceil(max_points);
    x.into_iter().step_by(stride).collect()
}

/// All-pairs DTW matrix over z-normalised feature-0 series.
pub fn dtw_matrix(ds: &SeriesDataset) -> Array2<f64> {
    let n = ds.num_nodes();
    let series: Vec<Vec<f64>> = (0..n)
        .map(|i| subsample(z_normalize(&ds.node_series(i, 0)), DTW_MAX_POINTS))
        .collect();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = dtw_distance(&series[i], &series[j]).expect("non-empty series");
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Links every node to its `k` nearest peers by DTW (ties to the lower
/// index) with unit weight, then symmetrises by max. `k` is capped at `N-1`.
pub fn build_semantic(ds: &SeriesDataset, k: usize) -> Result<Array2<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("semantic degree must be positive".into()));
    }
    Ok(semantic_from_distances(&dtw_matrix(ds), k))
}

pub fn semantic_from_distances(dist: &Array2<f64>, k: usize) -> Array2<f64> {
    let n = dist.nrows();
    let k = k.min(n.saturating_sub(1));
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        let mut peers: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        peers.sort_by(|&x, &y| dist[[i, x]].total_cmp(&dist[[i, y]]).then(x.cmp(&y)));
        for &j in peers.iter().take(k) {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
    }
    a
}
