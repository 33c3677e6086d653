//! Task heads on top of the encoder and the LM `<st_start>` state.
//!
//! Forecast: `ŷ = W3·[ReLU(W1·flat(H_f) + b1) ‖ ReLU(W2·H′ + b2)] + b3`,
//! batched over rows. Dispatch: `softmax(W_d·H′ + b_d)` over the 3×3
//! neighbourhood, row-major with the centre at index 4.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use ndarray::Array2;
use rand::Rng;

pub const DEFAULT_HEAD_HIDDEN: usize = 256;
pub const GRID_CELLS: usize = 9;
pub const CENTER_CELL: usize = 4;

#[derive(Debug, Clone)]
pub struct ForecastHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

impl ForecastHead {
    /// `flat_dim` is `T·2D`, `horizon` is `T`.
    pub fn init<R: Rng>(store: &mut ParamStore, flat_dim: usize, d_l: usize, hidden: usize, horizon: usize, rng: &mut R) -> Self {
        Self {
            w1: store.insert_uniform("head.forecast.w1", (flat_dim, hidden), flat_dim, rng),
            b1: store.insert_zeros("head.forecast.b1", (1, hidden)),
            w2: store.insert_uniform("head.forecast.w2", (d_l, hidden), d_l, rng),
            b2: store.insert_zeros("head.forecast.b2", (1, hidden)),
            w3: store.insert_uniform("head.forecast.w3", (2 * hidden, horizon), 2 * hidden, rng),
            b3: store.insert_zeros("head.forecast.b3", (1, horizon)),
        }
    }

    /// `flat` is `B×(T·2D)` (each row a node's time-major slice), `h_prime`
    /// is `B×d_L`. Returns `B×T` normalised predictions.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, flat: Var, h_prime: Var) -> Result<Var> {
        let (b, f) = tape.shape(flat);
        let (b2, d) = tape.shape(h_prime);
        if f != store.get(self.w1).nrows() || d != store.get(self.w2).nrows() || b != b2 {
            return Err(Error::Shape(format!(
                "forecast head got {b}x{f} and {b2}x{d}, expects ·x{} and ·x{}",
                store.get(self.w1).nrows(),
                store.get(self.w2).nrows()
            )));
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let z1 = tape.matmul(flat, w1);
        let z1 = tape.add_row(z1, b1);
        let z1 = tape.relu(z1);
        let w2 = tape.param(store, self.w2);
        let b2v = tape.param(store, self.b2);
        let z2 = tape.matmul(h_prime, w2);
        let z2 = tape.add_row(z2, b2v);
        let z2 = tape.relu(z2);
        let z = tape.concat_cols(&[z1, z2]);
        let w3 = tape.param(store, self.w3);
        let b3 = tape.param(store, self.b3);
        let y = tape.matmul(z, w3);
        Ok(tape.add_row(y, b3))
    }

    pub fn predict(&self, store: &ParamStore, h_node: &Array2<f64>, h_prime: &[f64]) -> Result<Vec<f64>> {
        let flat = Array2::from_shape_vec((1, h_node.len()), h_node.iter().copied().collect()).expect("row");
        let hp = Array2::from_shape_vec((1, h_prime.len()), h_prime.to_vec()).expect("row");
        let mut tape = Tape::new();
        let f = tape.constant(flat);
        let h = tape.constant(hp);
        let y = self.forward(&mut tape, store, f, h)?;
        Ok(tape.value(y).iter().copied().collect())
    }
}

#[derive(Debug, Clone)]
pub struct DispatchHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl DispatchHead {
    pub fn init<R: Rng>(store: &mut ParamStore, d_l: usize, rng: &mut R) -> Self {
        Self {
            w: store.insert_uniform("head.dispatch.w", (d_l, GRID_CELLS), d_l, rng),
            b: store.insert_zeros("head.dispatch.b", (1, GRID_CELLS)),
        }
    }

    pub fn logits<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, h_prime: Var) -> Result<Var> {
        let d = tape.shape(h_prime).1;
        if d != store.get(self.w).nrows() {
            return Err(Error::Shape(format!("dispatch head expects width {}, got {d}", store.get(self.w).nrows())));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let z = tape.matmul(h_prime, w);
        Ok(tape.add_row(z, b))
    }

    /// `B×9` rows on the simplex.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, h_prime: Var) -> Result<Var> {
        let z = self.logits(tape, store, h_prime)?;
        Ok(tape.softmax(z))
    }

    pub fn predict(&self, store: &ParamStore, h_prime: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let h = tape.constant(Array2::from_shape_vec((1, h_prime.len()), h_prime.to_vec()).expect("row"));
        let p = self.forward(&mut tape, store, h)?;
        Ok(tape.value(p).iter().copied().collect())
    }
}
