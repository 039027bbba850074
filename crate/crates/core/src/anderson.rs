//! Anderson acceleration for fixed-point iterations `u = T(u)`.

use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;

/// Mixes the last `depth` iterates to extrapolate the fixed point.
pub(crate) struct Anderson {
    depth: usize,
    prev_u: Option<Vec<f64>>,
    prev_g: Option<Vec<f64>>,
    du: VecDeque<Vec<f64>>,
    dg: VecDeque<Vec<f64>>,
}

impl Anderson {
    pub fn new(depth: usize) -> Self {
        Anderson {
            depth,
            prev_u: None,
            prev_g: None,
            du: VecDeque::new(),
            dg: VecDeque::new(),
        }
    }

    pub fn reset(&mut self) {
        self.prev_u = None;
        self.prev_g = None;
        self.du.clear();
        self.dg.clear();
    }

    /// Next iterate from the current input `u` and its image `t = T(u)`.
    pub fn step(&mut self, u: &[f64], t: &[f64]) -> Vec<f64> {
        let g: Vec<f64> = t.iter().zip(u).map(|(a, b)| a - b).collect();
        if let (Some(pu), Some(pg)) = (self.prev_u.take(), self.prev_g.take()) {
            self.du.push_back(u.iter().zip(&pu).map(|(a, b)| a - b).collect());
            self.dg.push_back(g.iter().zip(&pg).map(|(a, b)| a - b).collect());
            if self.du.len() > self.depth {
                self.du.pop_front();
                self.dg.pop_front();
            }
        }
        self.prev_u = Some(u.to_vec());
        self.prev_g = Some(g.clone());
        let m = self.dg.len();
        if m == 0 {
            return t.to_vec();
        }

        let n = u.len();
        let dg = DMatrix::from_fn(n, m, |i, j| self.dg[j][i]);
        let rhs = DVector::from_column_slice(&g);
        let gamma = match dg.svd(true, true).solve(&rhs, 1e-12) {
            Ok(v) if v.iter().all(|x| x.is_finite()) => v,
            _ => {
                self.reset();
                return t.to_vec();
            }
        };
        let mut out = t.to_vec();
        for (j, gj) in gamma.iter().enumerate() {
            for i in 0..n {
                out[i] -= gj * (self.du[j][i] + self.dg[j][i]);
            }
        }
        out
    }
}
