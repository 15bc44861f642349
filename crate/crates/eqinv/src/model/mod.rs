//! The four trainable pieces and their composition.
//!
//! `encoder` maps flattened images to features, `mask` gates feature
//! coordinates elementwise, `projection` maps masked features onto the unit
//! sphere for contrastive supervision, and `classifier` produces logits.
//! Inference is always `classify(mask ∘ encode(x))`; the projection head
//! exists only to carry the invariance losses during fine-tuning.

mod checkpoint;

pub use checkpoint::{load_model, save_model};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{EqInvError, Result};
use crate::rng;

/// Layer sizes and options. The projection head (512 hidden, 128 out) and
/// the weight-normalized classifier follow the reference recipe; the encoder
/// is an MLP sized for single-core desk runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Flattened image length (3 * side * side).
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    /// Rescale each classifier weight row to unit norm with a learned gain.
    pub weight_norm: bool,
}

impl ModelConfig {
    pub fn desk_default(input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            encoder_hidden: vec![256, 256],
            feature_dim: 128,
            proj_hidden: 512,
            proj_dim: 128,
            num_classes,
            weight_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.feature_dim == 0
            || self.proj_hidden == 0
            || self.proj_dim == 0
            || self.encoder_hidden.iter().any(|h| *h == 0)
        {
            return Err(EqInvError::Config("model dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(EqInvError::Config("classifier needs at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Fully-connected layer storing the weight row-major per output unit.
pub struct Linear {
    pub weight: Tensor, // [out × in]
    pub bias: Tensor,   // [out]
}

impl Linear {
    /// Uniform init in ±1/sqrt(in_dim), zero bias.
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim).map(|_| bound * rng::symmetric_f64(rng)).collect();
        Linear {
            weight: Tensor::from_vec(data, &[out_dim, in_dim]).unwrap().requires_grad(true),
            bias: Tensor::zeros(&[out_dim]).requires_grad(true),
        }
    }

    fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let wx = tape.matmul_nt(x, &self.weight)?;
        tape.add_row_broadcast(&wx, &self.bias)
    }

    fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Feature extractor: MLP with relu after each hidden layer, linear output.
pub struct Encoder {
    layers: Vec<Linear>,
}

impl Encoder {
    fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Encoder {
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.encoder_hidden);
        dims.push(config.feature_dim);
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Encoder { layers }
    }

    pub fn forward(&self, tape: &Tape, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, &x)?;
            if i < last {
                x = tape.relu(&x)?;
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Projection head: one hidden relu layer, then rows normalized onto the
/// unit sphere.
pub struct Projection {
    hidden: Linear,
    out: Linear,
}

impl Projection {
    fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Projection {
        Projection {
            hidden: Linear::init(config.feature_dim, config.proj_hidden, rng),
            out: Linear::init(config.proj_hidden, config.proj_dim, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, features: &Tensor) -> Result<Tensor> {
        let h = tape.relu(&self.hidden.forward(tape, features)?)?;
        let z = self.out.forward(tape, &h)?;
        tape.l2_normalize_rows(&z)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}

/// Linear classifier, optionally weight-normalized: each row of the stored
/// weight is used as a direction (normalized to unit length) scaled by a
/// learned per-class gain.
pub struct Classifier {
    pub direction: Tensor, // [C × D]
    pub gain: Tensor,      // [C], used only under weight_norm
    pub bias: Tensor,      // [C]
    weight_norm: bool,
}

impl Classifier {
    fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Classifier {
        let linear = Linear::init(config.feature_dim, config.num_classes, rng);
        Classifier {
            direction: linear.weight,
            gain: Tensor::ones(&[config.num_classes]).requires_grad(true),
            bias: linear.bias,
            weight_norm: config.weight_norm,
        }
    }

    /// The weight matrix actually multiplied with features.
    pub fn effective_weight(&self, tape: &Tape) -> Result<Tensor> {
        if self.weight_norm {
            let unit = tape.l2_normalize_rows(&self.direction)?;
            tape.mul_col_broadcast(&unit, &self.gain)
        } else {
            Ok(self.direction.clone())
        }
    }

    pub fn forward(&self, tape: &Tape, masked: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight(tape)?;
        let logits = tape.matmul_nt(masked, &w)?;
        tape.add_row_broadcast(&logits, &self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        if self.weight_norm {
            vec![self.direction.clone(), self.gain.clone(), self.bias.clone()]
        } else {
            vec![self.direction.clone(), self.bias.clone()]
        }
    }
}

/// The full model: encoder φ, mask m, projection g, classifier f.
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub mask: Tensor, // [D], starts at all-ones (identity gate)
    pub projection: Projection,
    pub classifier: Classifier,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut enc_rng = rng::stream(seed, &["init", "encoder"]);
        let mut proj_rng = rng::stream(seed, &["init", "projection"]);
        let mut cls_rng = rng::stream(seed, &["init", "classifier"]);
        Ok(Model {
            encoder: Encoder::init(&config, &mut enc_rng),
            mask: Tensor::ones(&[config.feature_dim]).requires_grad(true),
            projection: Projection::init(&config, &mut proj_rng),
            classifier: Classifier::init(&config, &mut cls_rng),
            config,
        })
    }

    /// φ(x): features for a batch of flattened images.
    pub fn encode(&self, tape: &Tape, images: &Tensor) -> Result<Tensor> {
        self.encoder.forward(tape, images)
    }

    /// m ∘ features.
    pub fn masked_feature(&self, tape: &Tape, features: &Tensor) -> Result<Tensor> {
        tape.mul_row_broadcast(features, &self.mask)
    }

    /// z = g(m ∘ φ(x)) rows on the unit sphere.
    pub fn project(&self, tape: &Tape, masked: &Tensor) -> Result<Tensor> {
        self.projection.forward(tape, masked)
    }

    /// Logits from masked features.
    pub fn classify(&self, tape: &Tape, masked: &Tensor) -> Result<Tensor> {
        self.classifier.forward(tape, masked)
    }

    /// The inference path: classify(mask ∘ encode(x)).
    pub fn forward_logits(&self, tape: &Tape, images: &Tensor) -> Result<Tensor> {
        let features = self.encode(tape, images)?;
        let masked = self.masked_feature(tape, &features)?;
        self.classify(tape, &masked)
    }

    pub fn encoder_params(&self) -> Vec<Tensor> {
        self.encoder.params()
    }

    pub fn projection_params(&self) -> Vec<Tensor> {
        self.projection.params()
    }

    pub fn classifier_params(&self) -> Vec<Tensor> {
        self.classifier.params()
    }

    pub fn all_params(&self) -> Vec<Tensor> {
        let mut p = self.encoder_params();
        p.push(self.mask.clone());
        p.extend(self.projection_params());
        p.extend(self.classifier_params());
        p
    }

    pub fn zero_grads(&self) {
        for p in self.all_params() {
            p.zero_grad();
        }
    }
}

/// Batch of flattened images as a tensor, converting stored f32 to the f64
/// compute precision.
pub fn batch_tensor(images: &[&[f32]]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(EqInvError::Shape("empty image batch".into()));
    }
    let pixels = images[0].len();
    let mut data = Vec::with_capacity(images.len() * pixels);
    for img in images {
        if img.len() != pixels {
            return Err(EqInvError::Shape("ragged image batch".into()));
        }
        data.extend(img.iter().map(|v| f64::from(*v)));
    }
    Tensor::from_vec(data, &[images.len(), pixels])
}

/// Batch of already-f64 rows (augmented views).
pub fn batch_tensor_f64(rows: &[Vec<f64>]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(EqInvError::Shape("empty image batch".into()));
    }
    let pixels = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * pixels);
    for row in rows {
        if row.len() != pixels {
            return Err(EqInvError::Shape("ragged image batch".into()));
        }
        data.extend_from_slice(row);
    }
    Tensor::from_vec(data, &[rows.len(), pixels])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 12,
            encoder_hidden: vec![10, 8],
            feature_dim: 6,
            proj_hidden: 9,
            proj_dim: 5,
            num_classes: 3,
            weight_norm: true,
        }
    }

    fn tiny_model() -> Model {
        Model::init(tiny_config(), 17).unwrap()
    }

    fn tiny_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng::stream(seed, &["model-test"]);
        let data = (0..rows * cols).map(|_| rng::unit_f64(&mut rng)).collect();
        Tensor::from_vec(data, &[rows, cols]).unwrap()
    }

    #[test]
    fn zero_image_encodes_to_finite_feature() {
        let model = tiny_model();
        let tape = Tape::new();
        let x = Tensor::zeros(&[2, 12]);
        let f = model.encode(&tape, &x).unwrap();
        assert_eq!(f.shape(), vec![2, 6]);
        assert!(f.all_finite());
    }

    #[test]
    fn encoding_is_deterministic() {
        let model = tiny_model();
        let x = tiny_batch(3, 12, 4);
        let a = model.encode(&Tape::new(), &x).unwrap();
        let b = model.encode(&Tape::new(), &x).unwrap();
        assert_eq!(a.data_vec(), b.data_vec());
    }

    #[test]
    fn encoder_gradients_match_differences() {
        let model = tiny_model();
        let x = tiny_batch(2, 12, 5);
        let params = model.encoder_params();
        let refs: Vec<&Tensor> = params.iter().collect();
        let err = grad_check(
            |t| {
                let f = model.encode(t, &x)?;
                t.sum(&t.mul(&f, &t.offset(&f, 0.2)?)?)
            },
            &refs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn mask_identity_zero_and_one_hot() {
        let model = tiny_model();
        let tape = Tape::new();
        let f = tiny_batch(2, 6, 6);

        let identity = model.masked_feature(&tape, &f).unwrap();
        assert_eq!(identity.data_vec(), f.data_vec());

        model.mask.with_data_mut(|m| m.fill(0.0));
        let zeroed = model.masked_feature(&tape, &f).unwrap();
        assert!(zeroed.data_vec().iter().all(|v| *v == 0.0));

        model.mask.with_data_mut(|m| {
            m.fill(0.0);
            m[2] = 1.0;
        });
        let one_hot = model.masked_feature(&tape, &f).unwrap();
        for (row, orig) in one_hot.data_vec().chunks(6).zip(f.data_vec().chunks(6)) {
            for (k, v) in row.iter().enumerate() {
                assert_eq!(*v, if k == 2 { orig[2] } else { 0.0 });
            }
        }
    }

    #[test]
    fn projection_rows_are_unit_norm() {
        let model = tiny_model();
        let tape = Tape::new();
        let f = tiny_batch(4, 6, 7);
        let z = model.project(&tape, &f).unwrap();
        for row in z.data_vec().chunks(5) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row norm {norm}");
        }
    }

    #[test]
    fn projection_gradients_match_differences() {
        let model = tiny_model();
        let f = tiny_batch(2, 6, 8);
        let params = model.projection_params();
        let refs: Vec<&Tensor> = params.iter().collect();
        let err = grad_check(
            |t| {
                let z = model.project(t, &f)?;
                t.sum(&t.mul(&z, &t.offset(&z, 0.3)?)?)
            },
            &refs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let model = tiny_model();
        let tape = Tape::new();
        let x = Tensor::zeros(&[2, 6]);
        let logits = model.classify(&tape, &x).unwrap();
        assert!(logits.data_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn weight_normalized_rows_have_unit_norm() {
        let model = tiny_model();
        let tape = Tape::new();
        let unit = tape.l2_normalize_rows(&model.classifier.direction).unwrap();
        for row in unit.data_vec().chunks(6) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_survives_constant_logit_shift() {
        let model = tiny_model();
        let tape = Tape::new();
        let f = tiny_batch(3, 6, 9);
        let logits = model.classify(&tape, &f).unwrap();
        let shifted = tape.offset(&logits, 7.5).unwrap();
        let argmax = |t: &Tensor| -> Vec<usize> {
            t.data_vec()
                .chunks(3)
                .map(|row| {
                    (0..3).max_by(|a, b| row[*a].partial_cmp(&row[*b]).unwrap()).unwrap()
                })
                .collect()
        };
        assert_eq!(argmax(&logits), argmax(&shifted));
    }

    #[test]
    fn composed_path_equals_monolithic_forward() {
        let model = tiny_model();
        let x = tiny_batch(4, 12, 10);
        let tape = Tape::new();
        let step_by_step = {
            let f = model.encode(&tape, &x).unwrap();
            let m = model.masked_feature(&tape, &f).unwrap();
            model.classify(&tape, &m).unwrap()
        };
        let monolithic = model.forward_logits(&tape, &x).unwrap();
        assert_eq!(step_by_step.data_vec(), monolithic.data_vec());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::init(tiny_config(), 3).unwrap();
        let b = Model::init(tiny_config(), 3).unwrap();
        let c = Model::init(tiny_config(), 4).unwrap();
        for (pa, pb) in a.all_params().iter().zip(b.all_params()) {
            assert_eq!(pa.data_vec(), pb.data_vec());
        }
        let differs = a
            .all_params()
            .iter()
            .zip(c.all_params())
            .any(|(pa, pc)| pa.data_vec() != pc.data_vec());
        assert!(differs);
    }
}
