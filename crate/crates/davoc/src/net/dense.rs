//! Fully connected layer.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use super::Param;

/// `y = x W^T + b` over rows of `x`.
///
/// `x` is `(rows, in_dim)` — rows are frames or pooled embeddings — and the
/// output is `(rows, out_dim)`. A single vector is passed as a 1-row matrix.
#[derive(Debug, Clone)]
pub struct Dense {
    /// Weights, `(out_dim, in_dim)`.
    pub w: Param,
    /// Bias, `(out_dim,)`.
    pub b: Param,
    x_cache: Option<Array2<f64>>,
}

impl Dense {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: Param::glorot2(&format!("{name}.w"), out_dim, in_dim, rng),
            b: Param::zeros1(&format!("{name}.b"), out_dim),
            x_cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.v2().ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.v2().nrows()
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.v2().t());
        y += &self.b.v1();
        self.x_cache = Some(x.clone());
        y
    }

    /// Forward pass without caching, for scoring and finite-difference
    /// re-evaluations.
    pub fn forward_inference(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.v2().t());
        y += &self.b.v1();
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.x_cache.as_ref().expect("forward before backward");
        let dw = dy.t().dot(x);
        self.w.g2_mut().scaled_add(1.0, &dw);
        let db: Array1<f64> = dy.sum_axis(ndarray::Axis(0));
        self.b
            .grad
            .as_slice_mut()
            .unwrap()
            .iter_mut()
            .zip(db.iter())
            .for_each(|(g, d)| *g += d);
        dy.dot(&self.w.v2())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
}
