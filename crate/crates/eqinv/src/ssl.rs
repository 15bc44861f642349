//! Contrastive feature pretraining (pipeline step 1) and the
//! distinct-feature diagnostic.
//!
//! One generic in-batch contrastive method: every image contributes two
//! augmented views, each view's feature is pulled toward its sibling view
//! and pushed from every other image's views. No queue, no momentum
//! encoder, no predictor. Only the encoder trains here; mask, projection
//! and classifier stay at their initial values.

use std::io::Write as _;
use std::path::Path;

use crate::autodiff::{kernels, Tape, Tensor};
use crate::data::{BiasedDataset, Split};
use crate::error::{EqInvError, Result};
use crate::model::{batch_tensor_f64, Model, ModelConfig};
use crate::optim::Sgd;
use crate::rng;
use crate::{data, envs};

/// Two features closer than this (euclidean) count as a collision.
pub const COLLISION_TOLERANCE: f64 = 1e-6;

/// Similarity mask value: low enough that exp underflows to exactly 0 under
/// the max-shift inside log_sum_exp, so a masked slot contributes nothing to
/// either the loss or the gradient.
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl PretrainConfig {
    /// Desk-scale schedule sized so a full run stays in the tens of seconds.
    pub fn desk_default(seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: 15,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            temperature: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(EqInvError::Config("contrastive batches need at least 2 images".into()));
        }
        if self.epochs == 0 {
            return Err(EqInvError::Config("epochs must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(EqInvError::Config("temperature must be a positive finite number".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !self.momentum.is_finite() {
            return Err(EqInvError::Config("lr must be positive and momentum finite".into()));
        }
        Ok(())
    }
}

/// One anchor's contrastive loss from raw feature rows:
/// -log[ exp(s+/t) / (exp(s+/t) + sum_i exp(s-_i/t)) ], max-shifted.
///
/// Rows are expected unit-normalized so dots are cosine similarities.
/// With no negatives the ratio is 1 and the loss is exactly 0.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(EqInvError::Config("temperature must be a positive finite number".into()));
    }
    if anchor.len() != positive.len() || negatives.iter().any(|n| n.len() != anchor.len()) {
        return Err(EqInvError::Shape("contrastive rows must share one dimension".into()));
    }
    if negatives.is_empty() {
        return Ok(0.0);
    }
    let s_pos = kernels::dot(anchor, positive) / temperature;
    let s_negs: Vec<f64> = negatives.iter().map(|n| kernels::dot(anchor, n) / temperature).collect();
    let max = s_negs.iter().cloned().fold(s_pos, f64::max);
    let denom: f64 = (s_pos - max).exp() + s_negs.iter().map(|s| (s - max).exp()).sum::<f64>();
    Ok(max + denom.ln() - s_pos)
}

/// Mean anchor loss over a two-view batch, on the tape.
///
/// `z` holds 2B unit rows where rows 2i and 2i+1 are the two views of image
/// i. Every row is an anchor once: its sibling is the positive, all rows of
/// other images are negatives (self excluded via the diagonal mask).
pub fn contrastive_batch_loss(tape: &Tape, z: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(EqInvError::Config("temperature must be a positive finite number".into()));
    }
    if z.rank() != 2 {
        return Err(EqInvError::Shape("view batch must be rank 2".into()));
    }
    let n = z.rows();
    if n < 4 || n % 2 != 0 {
        return Err(EqInvError::Shape(format!("need an even row count >= 4, got {n}")));
    }

    let sims = tape.scale(&tape.matmul_nt(z, z)?, 1.0 / temperature)?;

    let mut diag = vec![0.0; n * n];
    let mut pair = vec![0.0; n * n];
    for i in 0..n {
        diag[i * n + i] = MASK_NEG;
        pair[i * n + (i ^ 1)] = 1.0;
    }
    let diag = Tensor::from_vec(diag, &[n, n])?;
    let pair = Tensor::from_vec(pair, &[n, n])?;

    let masked = tape.add(&sims, &diag)?;
    let mut denominators = Vec::with_capacity(n);
    for i in 0..n {
        denominators.push(tape.log_sum_exp(&tape.row(&masked, i)?)?);
    }
    let denom_refs: Vec<&Tensor> = denominators.iter().collect();
    let denom_sum = tape.sum(&tape.stack_scalars(&denom_refs)?)?;
    let pos_sum = tape.sum(&tape.mul(&sims, &pair)?)?;
    tape.scale(&tape.sub(&denom_sum, &pos_sum)?, 1.0 / n as f64)
}

/// One loss-curve sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Loss curve as `epoch,step,loss` CSV. Floats print in Rust's shortest
/// round-trip form, so reloading reproduces the exact bits.
pub fn write_loss_csv(points: &[LossPoint], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,step,loss")?;
    for p in points {
        writeln!(w, "{},{},{}", p.epoch, p.step, p.loss)?;
    }
    w.flush()?;
    Ok(())
}

pub struct PretrainOutput {
    pub model: Model,
    pub curve: Vec<LossPoint>,
}

/// Contrastive pretraining over the train split.
///
/// Deterministic given (dataset, config): epoch order and per-sample
/// augmentations draw from tagged streams keyed by `config.seed`, never from
/// global state. A trailing chunk with a single image is skipped (it has no
/// in-batch negatives).
pub fn pretrain(dataset: &BiasedDataset, config: &PretrainConfig) -> Result<PretrainOutput> {
    config.validate()?;
    let train = dataset.indices_of(Split::Train);
    if train.is_empty() {
        return Err(EqInvError::Data("train split is empty".into()));
    }
    let side = dataset.image_side;
    let model = Model::init(ModelConfig::desk_default(dataset.pixels(), dataset.num_classes), config.seed)?;
    let mut opt = Sgd::new(model.encoder_params(), config.lr, config.momentum);
    let mut curve = Vec::new();

    for epoch in 0..config.epochs {
        let mut order = train.clone();
        let mut erng = rng::stream(config.seed, &["ssl-order", &epoch.to_string()]);
        rng::shuffle(&mut erng, &mut order);

        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(chunk.len() * 2);
            for &idx in chunk {
                let mut arng =
                    rng::stream(config.seed, &["augment", &epoch.to_string(), &idx.to_string()]);
                views.push(data::augment(dataset.image(idx), side, &mut arng));
                views.push(data::augment(dataset.image(idx), side, &mut arng));
            }
            let x = batch_tensor_f64(&views)?;
            let tape = Tape::new();
            let f = model.encode(&tape, &x)?;
            let z = tape.l2_normalize_rows(&f)?;
            let loss = contrastive_batch_loss(&tape, &z, config.temperature)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(EqInvError::Numeric(format!(
                    "contrastive loss became non-finite at epoch {epoch} step {step}"
                )));
            }
            opt.zero_grads();
            tape.backward(&loss)?;
            opt.step();
            curve.push(LossPoint { epoch, step, loss: value });
        }
    }
    Ok(PretrainOutput { model, curve })
}

/// Distinct-feature diagnostic: exact O(N^2) scan for the minimum pairwise
/// euclidean distance and the number of pairs closer than
/// [`COLLISION_TOLERANCE`].
pub fn sample_equivariance_score(bank: &envs::FeatureBank) -> Result<(f64, usize)> {
    let n = bank.len();
    if n < 2 {
        return Err(EqInvError::Contract("need at least 2 rows to compare".into()));
    }
    let dim = bank.dim();
    let rows = bank.rows();
    let mut min_dist = f64::INFINITY;
    let mut collisions = 0usize;
    for i in 0..n {
        let a = &rows[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            let b = &rows[j * dim..(j + 1) * dim];
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            let d = d2.sqrt();
            if d < min_dist {
                min_dist = d;
            }
            if d < COLLISION_TOLERANCE {
                collisions += 1;
            }
        }
    }
    Ok((min_dist, collisions))
}
