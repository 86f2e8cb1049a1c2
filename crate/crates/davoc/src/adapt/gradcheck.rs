//! End-to-end gradient verification for the full detector stack.
//!
//! The adversarial objective is awkward to check in one scalar: the GRL
//! hands the encoder `−λ·∂L_d` while the device head keeps `+∂L_d`, so no
//! single loss has both groups' analytic gradients as its derivative.
//! Instead one backward pass is checked against **two** scalars on
//! disjoint parameter groups:
//!
//! - detector parameters (encoder + label head) against `J = L_y − λ·L_d`,
//! - device-head parameters against `L_d` alone.
//!
//! Agreement of both, with λ ≠ 0 and mixed-domain inputs, pins down the
//! whole pipeline: feature plumbing, BLSTM/MLP backprop, mean-pooling,
//! the GRL sign and scale, and the batch-weight bookkeeping.

use ndarray::ArrayD;

use crate::dsp::{Device, FeatureConfig, FeatureKind, FeatureMatrix, Label};
use crate::models::{ModelConfig, ModelGraph, ModelKind};
use crate::net::{cross_entropy, finite_difference_check, FdReport};
use crate::rng;

/// Finite-difference agreement for both halves of the adversarial
/// objective.
#[derive(Debug, Clone)]
pub struct StackCheckReport {
    /// Encoder + label head against `L_y − λ·L_d`.
    pub detector: FdReport,
    /// Device head against `L_d`.
    pub device: FdReport,
    pub lambda: f64,
}

impl StackCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.detector.max_rel_err.max(self.device.max_rel_err)
    }
}

/// A tiny mixed-domain batch: three utterances, both labels, both
/// devices, fabricated features.
fn tiny_batch(kind: ModelKind, seed: u64) -> (ModelConfig, Vec<(FeatureMatrix, Label, Device)>) {
    let mut feature = FeatureConfig::new(FeatureKind::Mfcc, 25.0, false);
    feature.n_mel_filters = 10;
    feature.n_cepstra = 4;
    feature.context = 3;
    let config = ModelConfig::new(kind, feature.clone(), 6, 5);
    let dims = config.input_dim();
    let mut r = rng::stream(seed, "gradcheck/x");
    let cases = [
        (Label::Control, Device::Source),
        (Label::Pathological, Device::Target),
        (Label::Pathological, Device::Source),
    ];
    let batch = cases
        .iter()
        .enumerate()
        .map(|(i, &(label, device))| {
            let fm = FeatureMatrix {
                data: ndarray::Array2::from_shape_fn((5, dims), |_| rng::normal(&mut r)),
                config: feature.clone(),
                utterance_id: format!("gc-{i}"),
            };
            (fm, label, device)
        })
        .collect();
    (config, batch)
}

fn label_objective(model: &mut ModelGraph, batch: &[(FeatureMatrix, Label, Device)]) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|(fm, label, _)| {
            let fwd = model.forward(fm).expect("gradcheck forward");
            ModelGraph::label_loss(&fwd, label.index(), 1.0 / n).0
        })
        .sum()
}

fn device_objective(model: &mut ModelGraph, batch: &[(FeatureMatrix, Label, Device)]) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|(fm, _, device)| {
            let fwd = model.forward(fm).expect("gradcheck forward");
            let logits = model.device_head.forward(&fwd.z);
            cross_entropy(&logits, device.index()).0 / n
        })
        .sum()
}

/// Run the two-scalar check on the full stack for one model kind,
/// sampling `coords_per_param` coordinates of every parameter tensor.
pub fn check_full_stack(kind: ModelKind, seed: u64, coords_per_param: usize) -> StackCheckReport {
    let lambda = 0.7;
    let eps = 1e-5;
    let (config, batch) = tiny_batch(kind, seed);
    let mut model = ModelGraph::new(&config, seed);
    // Zero-initialized biases are a degenerate probe point: a frame whose
    // hidden row dies entirely lands every next-layer pre-activation exactly
    // on the ReLU kink, where one-sided differences disagree with the
    // (correct) subgradient. Jitter to a generic point before checking.
    {
        use rand::Rng;
        let mut jitter = rng::stream(seed, "gradcheck/jitter");
        for p in model.all_params_mut() {
            p.value
                .mapv_inplace(|v| v + 0.1 * (jitter.random::<f64>() * 2.0 - 1.0));
        }
    }
    model.device_head.set_lambda(lambda);

    // one trainer-style backward pass fills every group's gradients
    let n = batch.len() as f64;
    model.zero_grads();
    for (fm, label, device) in &batch {
        let fwd = model.forward(fm).expect("gradcheck forward");
        let (_, dlabel) = ModelGraph::label_loss(&fwd, label.index(), 1.0 / n);
        let logits = model.device_head.forward(&fwd.z);
        let (_, mut dlogits) = cross_entropy(&logits, device.index());
        dlogits.mapv_inplace(|v| v / n);
        let dz = model.device_head.backward(&dlogits);
        model.backward(&fwd, Some(&dlabel), Some(&dz));
    }
    let analytic_detector: Vec<ArrayD<f64>> = model
        .detector_params()
        .iter()
        .map(|p| p.grad.clone())
        .collect();
    let analytic_device: Vec<ArrayD<f64>> = model
        .device_params()
        .iter()
        .map(|p| p.grad.clone())
        .collect();

    let mut fd_rng = rng::stream(seed, "gradcheck/coords");
    let detector = {
        let mut objective = |m: &mut ModelGraph| {
            label_objective(m, &batch) - lambda * device_objective(m, &batch)
        };
        finite_difference_check(
            &mut model,
            |m| m.detector_params_mut(),
            &mut objective,
            &analytic_detector,
            coords_per_param,
            eps,
            &mut fd_rng,
        )
    };
    let device = {
        let mut objective = |m: &mut ModelGraph| device_objective(m, &batch);
        finite_difference_check(
            &mut model,
            |m| m.device_params_mut(),
            &mut objective,
            &analytic_device,
            coords_per_param,
            eps,
            &mut fd_rng,
        )
    };
    StackCheckReport {
        detector,
        device,
        lambda,
    }
}
