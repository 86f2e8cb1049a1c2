//! The detector networks and the adversarial device classifier.
//!
//! Two encoder families share one harness:
//!
//! - **BLSTM**: input dense + ReLU on context-stacked features, two
//!   bidirectional LSTM layers, mean pooling over time into an utterance
//!   embedding `z`, and a dense 2-class label head on `z`.
//! - **MLP**: three dense+ReLU layers applied per frame (unstacked
//!   features), a per-frame 2-class label head, utterance score = mean of
//!   per-frame pathological probabilities. Its embedding `z` is the
//!   mean-pooled top hidden layer.
//!
//! The device classifier consumes `z` through a gradient reversal layer,
//! so its backward pass pushes the encoder *away* from device-predictive
//! features while the head itself still learns to predict the device.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};

use crate::dsp::{self, DspError, FeatureConfig, FeatureMatrix, Utterance};
use crate::net::{cross_entropy, softmax, BiLstm, CheckpointError, Dense, Param, Relu};
use crate::rng;

mod checkpoint;
mod device;

pub use device::DeviceClassifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ModelKind {
    Blstm,
    Mlp,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Blstm => "blstm",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blstm" => Ok(ModelKind::Blstm),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(format!("unknown model kind '{other}' (expected blstm|mlp)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("empty feature matrix")]
    EmptyInput,
    #[error("input has {got} dims but the model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding has {got} dims but the device head expects {expected}")]
    EmbedDimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Everything needed to build (or rebuild) a model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub feature: FeatureConfig,
    /// LSTM units per direction, or MLP layer width.
    pub hidden: usize,
    /// Width of the device classifier's hidden layers.
    pub device_hidden: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, feature: FeatureConfig, hidden: usize, device_hidden: usize) -> Self {
        ModelConfig {
            kind,
            feature,
            hidden,
            device_hidden,
        }
    }

    /// Input dimensionality the encoder expects: context-stacked for the
    /// BLSTM, per-frame for the MLP.
    pub fn input_dim(&self) -> usize {
        match self.kind {
            ModelKind::Blstm => self.feature.stacked_dims(),
            ModelKind::Mlp => self.feature.base_dims(),
        }
    }

    /// Dimensionality of the pooled embedding `z`.
    pub fn embed_dim(&self) -> usize {
        match self.kind {
            ModelKind::Blstm => 2 * self.hidden,
            ModelKind::Mlp => self.hidden,
        }
    }
}

/// Extract model-ready features for an utterance: the BLSTM consumes
/// context-stacked frames, the MLP raw frames.
pub fn input_features(
    utterance: &Utterance,
    config: &FeatureConfig,
    kind: ModelKind,
) -> Result<FeatureMatrix, DspError> {
    let base = dsp::extract_features(utterance, config)?;
    match kind {
        ModelKind::Blstm => dsp::stack_context(&base, config.context),
        ModelKind::Mlp => Ok(base),
    }
}

#[derive(Clone)]
enum EncoderNet {
    Blstm {
        input: Dense,
        relu: Relu,
        l1: BiLstm,
        l2: BiLstm,
    },
    Mlp {
        d1: Dense,
        r1: Relu,
        d2: Dense,
        r2: Relu,
        d3: Dense,
        r3: Relu,
    },
}

impl EncoderNet {
    fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            EncoderNet::Blstm {
                input,
                relu,
                l1,
                l2,
            } => {
                let a = relu.forward(&input.forward(x));
                l2.forward(&l1.forward(&a))
            }
            EncoderNet::Mlp {
                d1,
                r1,
                d2,
                r2,
                d3,
                r3,
            } => r3.forward(&d3.forward(&r2.forward(&d2.forward(&r1.forward(&d1.forward(x)))))),
        }
    }

    fn forward_inference(&self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            EncoderNet::Blstm {
                input, l1, l2, ..
            } => {
                let a = input.forward_inference(x).mapv(|v| v.max(0.0));
                l2.forward_inference(&l1.forward_inference(&a))
            }
            EncoderNet::Mlp {
                d1, d2, d3, ..
            } => {
                let h1 = d1.forward_inference(x).mapv(|v| v.max(0.0));
                let h2 = d2.forward_inference(&h1).mapv(|v| v.max(0.0));
                d3.forward_inference(&h2).mapv(|v| v.max(0.0))
            }
        }
    }

    fn backward(&mut self, d_hidden: &Array2<f64>) {
        match self {
            EncoderNet::Blstm {
                input,
                relu,
                l1,
                l2,
            } => {
                let dh1 = l2.backward(d_hidden);
                let da = l1.backward(&dh1);
                let dr = relu.backward(&da);
                input.backward(&dr);
            }
            EncoderNet::Mlp {
                d1,
                r1,
                d2,
                r2,
                d3,
                r3,
            } => {
                let g = r3.backward(d_hidden);
                let g = d3.backward(&g);
                let g = r2.backward(&g);
                let g = d2.backward(&g);
                let g = r1.backward(&g);
                d1.backward(&g);
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            EncoderNet::Blstm {
                input, l1, l2, ..
            } => {
                let mut ps = input.params_mut();
                ps.extend(l1.params_mut());
                ps.extend(l2.params_mut());
                ps
            }
            EncoderNet::Mlp { d1, d2, d3, .. } => {
                let mut ps = d1.params_mut();
                ps.extend(d2.params_mut());
                ps.extend(d3.params_mut());
                ps
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            EncoderNet::Blstm {
                input, l1, l2, ..
            } => {
                let mut ps = input.params();
                ps.extend(l1.params());
                ps.extend(l2.params());
                ps
            }
            EncoderNet::Mlp { d1, d2, d3, .. } => {
                let mut ps = d1.params();
                ps.extend(d2.params());
                ps.extend(d3.params());
                ps
            }
        }
    }
}

/// Caches handed from [`ModelGraph::forward`] to [`ModelGraph::backward`].
pub struct Forward {
    /// Encoder top output, `(T, embed_dim)`.
    pub hidden: Array2<f64>,
    /// Mean-pooled utterance embedding.
    pub z: Array1<f64>,
    /// Label logits: `(1, 2)` for the BLSTM (on `z`), `(T, 2)` for the MLP
    /// (per frame).
    pub label_logits: Array2<f64>,
}

/// A full detector: encoder, label head, and adversarial device head.
///
/// All three parts are always instantiated (from per-part seed streams, so
/// two models with the same seed share encoder initializations regardless
/// of what gets trained); regimes differ only in which parameter groups
/// receive updates.
#[derive(Clone)]
pub struct ModelGraph {
    pub config: ModelConfig,
    encoder: EncoderNet,
    pub label_head: Dense,
    pub device_head: DeviceClassifier,
}

impl ModelGraph {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut enc_rng = rng::stream(seed, "init/encoder");
        let mut label_rng = rng::stream(seed, "init/label");
        let mut dev_rng = rng::stream(seed, "init/device");
        let input_dim = config.input_dim();
        let h = config.hidden;
        let encoder = match config.kind {
            ModelKind::Blstm => EncoderNet::Blstm {
                input: Dense::new("enc.input", input_dim, h, &mut enc_rng),
                relu: Relu::new(),
                l1: BiLstm::new("enc.l1", h, h, &mut enc_rng),
                l2: BiLstm::new("enc.l2", 2 * h, h, &mut enc_rng),
            },
            ModelKind::Mlp => EncoderNet::Mlp {
                d1: Dense::new("enc.d1", input_dim, h, &mut enc_rng),
                r1: Relu::new(),
                d2: Dense::new("enc.d2", h, h, &mut enc_rng),
                r2: Relu::new(),
                d3: Dense::new("enc.d3", h, h, &mut enc_rng),
                r3: Relu::new(),
            },
        };
        let label_head = Dense::new("label", config.embed_dim(), 2, &mut label_rng);
        let device_head =
            DeviceClassifier::new(config.embed_dim(), config.device_hidden, &mut dev_rng);
        ModelGraph {
            config: config.clone(),
            encoder,
            label_head,
            device_head,
        }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<(), ModelError> {
        if x.nrows() == 0 {
            return Err(ModelError::EmptyInput);
        }
        if x.ncols() != self.config.input_dim() {
            return Err(ModelError::DimMismatch {
                expected: self.config.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Training forward pass; fills layer caches for [`Self::backward`].
    pub fn forward(&mut self, features: &FeatureMatrix) -> Result<Forward, ModelError> {
        let x = &features.data;
        self.check_input(x)?;
        let hidden = self.encoder.forward(x);
        let z = hidden.mean_axis(Axis(0)).expect("nonempty");
        let label_logits = match self.config.kind {
            ModelKind::Blstm => {
                let z_row = z.view().insert_axis(Axis(0)).to_owned();
                self.label_head.forward(&z_row)
            }
            ModelKind::Mlp => self.label_head.forward(&hidden),
        };
        Ok(Forward {
            hidden,
            z,
            label_logits,
        })
    }

    /// Mean cross-entropy of the label logits against a class index.
    /// Both the loss and its logit gradient are scaled by `weight`
    /// (e.g. `1/batch`), so summing either over a batch is exact.
    pub fn label_loss(fwd: &Forward, class: usize, weight: f64) -> (f64, Array2<f64>) {
        let rows = fwd.label_logits.nrows() as f64;
        let mut dlogits = Array2::zeros(fwd.label_logits.dim());
        let mut loss = 0.0;
        for (i, row) in fwd.label_logits.axis_iter(Axis(0)).enumerate() {
            let (l, g) = cross_entropy(&row.to_owned(), class);
            loss += l * weight / rows;
            dlogits
                .row_mut(i)
                .assign(&g.mapv(|v| v * weight / rows));
        }
        (loss, dlogits)
    }

    /// Backward pass. `dlabel_logits` is the gradient on the label logits
    /// (if a label loss applies) and `dz_device` a gradient on `z` arriving
    /// from the device path (already GRL-scaled). Parameter gradients
    /// accumulate; call [`Self::zero_grads`] between steps.
    pub fn backward(
        &mut self,
        fwd: &Forward,
        dlabel_logits: Option<&Array2<f64>>,
        dz_device: Option<&Array1<f64>>,
    ) {
        let t = fwd.hidden.nrows() as f64;
        let mut d_hidden = Array2::<f64>::zeros(fwd.hidden.dim());
        if let Some(dl) = dlabel_logits {
            let dh = self.label_head.backward(dl);
            match self.config.kind {
                ModelKind::Blstm => {
                    // label head saw z = mean over rows: spread dz/T to every frame
                    let dz = dh.row(0);
                    for mut row in d_hidden.axis_iter_mut(Axis(0)) {
                        row.scaled_add(1.0 / t, &dz);
                    }
                }
                ModelKind::Mlp => {
                    d_hidden += &dh;
                }
            }
        }
        if let Some(dz) = dz_device {
            for mut row in d_hidden.axis_iter_mut(Axis(0)) {
                row.scaled_add(1.0 / t, &dz.view());
            }
        }
        self.encoder.backward(&d_hidden);
    }

    // ---- inference -------------------------------------------------------

    /// Pooled embedding `z` without touching training caches.
    pub fn embed(&self, features: &FeatureMatrix) -> Result<Array1<f64>, ModelError> {
        self.check_input(&features.data)?;
        let hidden = self.encoder.forward_inference(&features.data);
        Ok(hidden.mean_axis(Axis(0)).expect("nonempty"))
    }

    /// Utterance-level pathology score in [0, 1].
    pub fn score(&self, features: &FeatureMatrix) -> Result<f64, ModelError> {
        self.check_input(&features.data)?;
        let hidden = self.encoder.forward_inference(&features.data);
        match self.config.kind {
            ModelKind::Blstm => {
                let z = hidden.mean_axis(Axis(0)).expect("nonempty");
                let z_row = z.insert_axis(Axis(0));
                let logits = self.label_head.forward_inference(&z_row);
                Ok(softmax(&logits.row(0).to_owned())[1])
            }
            ModelKind::Mlp => {
                let logits = self.label_head.forward_inference(&hidden);
                let mut acc = 0.0;
                for row in logits.axis_iter(Axis(0)) {
                    acc += softmax(&row.to_owned())[1];
                }
                Ok(acc / logits.nrows() as f64)
            }
        }
    }

    /// Device posterior `P(device | z)` as a 2-vector (Source, Target).
    pub fn device_posterior(&self, z: &Array1<f64>) -> Result<Array1<f64>, ModelError> {
        if z.len() != self.config.embed_dim() {
            return Err(ModelError::EmbedDimMismatch {
                expected: self.config.embed_dim(),
                got: z.len(),
            });
        }
        Ok(softmax(&self.device_head.forward_inference(z)))
    }

    // ---- parameter groups ------------------------------------------------

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Param> {
        self.encoder.params_mut()
    }

    pub fn encoder_params(&self) -> Vec<&Param> {
        self.encoder.params()
    }

    pub fn label_params_mut(&mut self) -> Vec<&mut Param> {
        self.label_head.params_mut()
    }

    /// Encoder plus label head — the detector branch.
    pub fn detector_params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.encoder.params_mut();
        ps.extend(self.label_head.params_mut());
        ps
    }

    pub fn detector_params(&self) -> Vec<&Param> {
        let mut ps = self.encoder.params();
        ps.extend(self.label_head.params());
        ps
    }

    pub fn device_params_mut(&mut self) -> Vec<&mut Param> {
        self.device_head.params_mut()
    }

    pub fn device_params(&self) -> Vec<&Param> {
        self.device_head.params()
    }

    /// Canonical order: encoder, label head, device head.
    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.encoder.params_mut();
        ps.extend(self.label_head.params_mut());
        ps.extend(self.device_head.params_mut());
        ps
    }

    pub fn all_params(&self) -> Vec<&Param> {
        let mut ps = self.encoder.params();
        ps.extend(self.label_head.params());
        ps.extend(self.device_head.params());
        ps
    }

    pub fn zero_grads(&mut self) {
        for p in self.all_params_mut() {
            p.zero_grad();
        }
    }

    // ---- persistence -----------------------------------------------------

    pub fn save_to(&self, w: &mut dyn Write) -> Result<(), ModelError> {
        let header = checkpoint::encode_header(&self.config);
        crate::net::write_checkpoint(w, &header, &self.all_params())?;
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(CheckpointError::Io)?);
        self.save_to(&mut f)
    }

    pub fn load_from(r: &mut dyn Read) -> Result<Self, ModelError> {
        let (header, records) = crate::net::read_checkpoint(r)?;
        let config = checkpoint::decode_header(&header)?;
        let mut model = ModelGraph::new(&config, 0);
        {
            let mut params = model.all_params_mut();
            if params.len() != records.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "checkpoint has {} tensors, model needs {}",
                    records.len(),
                    params.len()
                ))
                .into());
            }
            for (p, rec) in params.iter_mut().zip(&records) {
                rec.apply_to(p)?;
            }
        }
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(CheckpointError::Io)?);
        Self::load_from(&mut f)
    }
}
