//! Adversarial device classifier.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::net::{Dense, GradientReversal, Param, Relu};

/// Predicts the recording device from the utterance embedding `z`.
///
/// `z` enters through a gradient reversal layer, then three dense+ReLU
/// layers and a 2-class output. During backprop the head's own parameters
/// receive the ordinary device-loss gradient, while the gradient handed
/// back to the encoder is scaled by `-lambda`.
#[derive(Clone)]
pub struct DeviceClassifier {
    pub grl: GradientReversal,
    d1: Dense,
    r1: Relu,
    d2: Dense,
    r2: Relu,
    d3: Dense,
    r3: Relu,
    out: Dense,
}

impl DeviceClassifier {
    pub fn new(embed_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        DeviceClassifier {
            grl: GradientReversal::new(1.0),
            d1: Dense::new("dev.d1", embed_dim, hidden, rng),
            r1: Relu::new(),
            d2: Dense::new("dev.d2", hidden, hidden, rng),
            r2: Relu::new(),
            d3: Dense::new("dev.d3", hidden, hidden, rng),
            r3: Relu::new(),
            out: Dense::new("dev.out", hidden, 2, rng),
        }
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.grl.lambda = lambda;
    }

    /// Training forward: device logits for one embedding.
    pub fn forward(&mut self, z: &Array1<f64>) -> Array1<f64> {
        let z = self.grl.forward(z);
        let row = z.insert_axis(Axis(0));
        let h1 = self.r1.forward(&self.d1.forward(&row));
        let h2 = self.r2.forward(&self.d2.forward(&h1));
        let h3 = self.r3.forward(&self.d3.forward(&h2));
        self.out.forward(&h3).row(0).to_owned()
    }

    pub fn forward_inference(&self, z: &Array1<f64>) -> Array1<f64> {
        let row = z.view().insert_axis(Axis(0)).to_owned();
        let h1 = self.d1.forward_inference(&row).mapv(|v| v.max(0.0));
        let h2 = self.d2.forward_inference(&h1).mapv(|v| v.max(0.0));
        let h3 = self.d3.forward_inference(&h2).mapv(|v| v.max(0.0));
        self.out.forward_inference(&h3).row(0).to_owned()
    }

    /// Backward from the device logits. Head parameter gradients
    /// accumulate un-reversed; the returned embedding gradient has passed
    /// the GRL (scaled by `-lambda`).
    pub fn backward(&mut self, dlogits: &Array1<f64>) -> Array1<f64> {
        let drow: Array2<f64> = dlogits.view().insert_axis(Axis(0)).to_owned();
        let g = self.out.backward(&drow);
        let g = self.r3.backward(&g);
        let g = self.d3.backward(&g);
        let g = self.r2.backward(&g);
        let g = self.d2.backward(&g);
        let g = self.r1.backward(&g);
        let dz = self.d1.backward(&g).row(0).to_owned();
        self.grl.backward(&dz)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.d1.params_mut();
        ps.extend(self.d2.params_mut());
        ps.extend(self.d3.params_mut());
        ps.extend(self.out.params_mut());
        ps
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.d1.params();
        ps.extend(self.d2.params());
        ps.extend(self.d3.params());
        ps.extend(self.out.params());
        ps
    }
}
