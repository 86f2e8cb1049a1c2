//! Reverse-mode differentiable building blocks.
//!
//! Everything is written directly against `f64` arrays: each layer owns its
//! parameters and gradient buffers, caches what its backward pass needs
//! during `forward`, and accumulates into `Param::grad` during `backward`.
//! There is no tape or graph; composition order is explicit in the model
//! code, which keeps the arithmetic auditable.
//!
//! The [`finite_difference_check`] harness probes any model's analytic
//! gradients against central differences and is the ground truth the rest
//! of the training stack is validated against.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewMut2, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

pub mod checkpoint;
mod dense;
mod lstm;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, ParamRecord};
pub use dense::Dense;
pub use lstm::{BiLstm, Lstm};

/// A named tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn zeros1(name: &str, n: usize) -> Self {
        let value = Array1::<f64>::zeros(n).into_dyn();
        let grad = value.clone();
        Param {
            name: name.to_string(),
            value,
            grad,
        }
    }

    /// Matrix parameter with Glorot-uniform entries: U(-l, l) with
    /// l = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot2(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform2(name, rows, cols, limit, rng)
    }

    /// Matrix parameter with entries U(-limit, limit).
    pub fn uniform2(name: &str, rows: usize, cols: usize, limit: f64, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let value =
            Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
                .into_dyn();
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.to_string(),
            value,
            grad,
        }
    }

    /// Vector parameter with entries U(-limit, limit).
    pub fn uniform1(name: &str, n: usize, limit: f64, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let value =
            Array1::from_shape_fn(n, |_| (rng.random::<f64>() * 2.0 - 1.0) * limit).into_dyn();
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.to_string(),
            value,
            grad,
        }
    }

    pub fn v2(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn v1(&self) -> ArrayView1<'_, f64> {
        self.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    pub fn g2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        self.grad.view_mut().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.len() == 0
    }
}

// ---- activations ---------------------------------------------------------

/// ReLU with a cached derivative mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Array2<f64>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let mask = self.mask.as_ref().expect("forward before backward");
        dy * mask
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---- softmax cross-entropy ----------------------------------------------

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|l| (l - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Cross-entropy loss of one logit vector against a class index.
///
/// Returns `(loss, dloss/dlogits)`; the gradient is `softmax - onehot`.
pub fn cross_entropy(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    assert!(target < logits.len(), "target class out of range");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.mapv(|l| (l - max).exp()).sum().ln() + max;
    let loss = log_sum - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}

// ---- gradient reversal ---------------------------------------------------

/// Gradient reversal layer: the forward pass is the bit-exact identity;
/// the backward pass multiplies the incoming gradient by `-lambda`.
#[derive(Debug, Clone, Copy)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Self {
        GradientReversal { lambda }
    }

    pub fn forward(&self, z: &Array1<f64>) -> Array1<f64> {
        z.clone()
    }

    pub fn backward(&self, dz: &Array1<f64>) -> Array1<f64> {
        dz.mapv(|g| -self.lambda * g)
    }
}

// ---- optimizer -----------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam first/second moments, parallel to a fixed parameter list.
///
/// The update of each coordinate depends only on its own history, so two
/// models that share a parameter subset and see identical gradients on it
/// produce bit-identical values there regardless of what the other
/// parameters do.
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam step over `params`, which must be the same list (same
    /// order) the state was built from.
    pub fn step(&mut self, params: &mut [&mut Param], cfg: &AdamConfig) {
        assert_eq!(params.len(), self.m.len(), "param list changed size");
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / b1t;
                    let v_hat = *v / b2t;
                    *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                });
        }
    }
}

/// Scale a parameter group's gradients so their joint L2 norm is at most
/// `max_norm`. Gradients already within the bound are left untouched
/// (bit-exact), so clipping is a no-op for well-scaled updates.
pub fn clip_group_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in params.iter() {
        sq += p.grad.iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
    norm
}

// ---- finite differences --------------------------------------------------

/// Outcome of a finite-difference probe.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    /// `(param name, flat coordinate)` of the worst disagreement.
    pub worst: (String, usize),
}

/// Compare analytic gradients against central differences.
///
/// `params_of` must return the probed parameters in a stable order and
/// `analytic` must hold the gradient of `objective` for each of them, in
/// the same order. For every parameter up to `coords_per_param` random
/// coordinates are perturbed by `+/-eps` and the objective re-evaluated;
/// the relative error uses a `1e-6` denominator floor so near-zero
/// gradients are compared on an absolute scale.
pub fn finite_difference_check<M>(
    model: &mut M,
    params_of: fn(&mut M) -> Vec<&mut Param>,
    objective: &mut dyn FnMut(&mut M) -> f64,
    analytic: &[ArrayD<f64>],
    coords_per_param: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> FdReport {
    use rand::Rng;
    let n_params = params_of(model).len();
    assert_eq!(
        n_params,
        analytic.len(),
        "analytic gradient list must match the probed parameter list"
    );

    let mut report = FdReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst: (String::new(), 0),
    };

    for pi in 0..n_params {
        let (name, len) = {
            let ps = params_of(model);
            (ps[pi].name.clone(), ps[pi].len())
        };
        let mut coords: Vec<usize> = (0..len).collect();
        if coords.len() > coords_per_param {
            // Fisher-Yates prefix: draw `coords_per_param` distinct coordinates
            for i in 0..coords_per_param {
                let j = i + rng.random_range(0..coords.len() - i);
                coords.swap(i, j);
            }
            coords.truncate(coords_per_param);
        }

        for &k in &coords {
            let orig = {
                let mut ps = params_of(model);
                let slice = ps[pi].value.as_slice_mut().expect("contiguous param");
                let orig = slice[k];
                slice[k] = orig + eps;
                orig
            };
            let plus = objective(model);
            {
                let mut ps = params_of(model);
                ps[pi].value.as_slice_mut().unwrap()[k] = orig - eps;
            }
            let minus = objective(model);
            {
                let mut ps = params_of(model);
                ps[pi].value.as_slice_mut().unwrap()[k] = orig;
            }
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[pi].as_slice().expect("contiguous grad")[k];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            let rel = (fd - an).abs() / denom;
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (name.clone(), k);
            }
        }
    }
    report
}
