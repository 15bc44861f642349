//! Fine-tuning losses (pipeline step 3).
//!
//! Each anchor class contributes a pair of environment risks: a supervised
//! contrastive loss over that environment's minibatch slice, where the
//! anchor-class samples are the positives and every inner product is scaled
//! by a dummy classifier w = 1. The cross-environment penalty is either the
//! squared w-gradient summed per environment (irmv1) or the population
//! variance of the risks (rex, the default). The composite objective adds
//! plain cross-entropy and routes gradients asymmetrically: cross-entropy
//! reaches the classifier, the feature mask, and the encoder, while the
//! penalty reaches only the projection head and the mask — the encoder
//! features it consumes are detached.
//!
//! The w-gradient is not produced by differentiating the tape; it is the
//! closed-form expression d/dw[lse(w c) - w c0] = dot(softmax(w c), c) - c0
//! built from tape ops, so squaring it stays differentiable with respect to
//! everything upstream without second-order machinery.

use crate::autodiff::{Tape, Tensor};
use crate::error::{EqInvError, Result};
use crate::model::Model;

/// Fixed value of the dummy classifier during training. Only its gradient
/// is read; the value is never updated.
pub const DUMMY_W: f64 = 1.0;

/// Cross-environment penalty family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyMode {
    /// Sum over environments of risk + lambda * (w-gradient)^2.
    IrmV1,
    /// Sum of risks + lambda * population variance of risks; the dummy
    /// classifier drops out entirely.
    Rex,
}

impl PenaltyMode {
    pub fn name(self) -> &'static str {
        match self {
            PenaltyMode::IrmV1 => "irmv1",
            PenaltyMode::Rex => "rex",
        }
    }

    pub fn parse(s: &str) -> Result<PenaltyMode> {
        match s {
            "irmv1" => Ok(PenaltyMode::IrmV1),
            "rex" => Ok(PenaltyMode::Rex),
            other => Err(EqInvError::Config(format!(
                "unknown penalty mode {other:?} (expected irmv1 or rex)"
            ))),
        }
    }
}

/// Penalty family and strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub mode: PenaltyMode,
    pub lambda: f64,
}

impl PenaltyConfig {
    /// Default: rex with a mid-range trade-off.
    pub fn desk_default() -> PenaltyConfig {
        PenaltyConfig { mode: PenaltyMode::Rex, lambda: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(EqInvError::Config(format!(
                "penalty lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// One environment's contrastive risk and its analytic dummy-classifier
/// gradient, both live tape expressions.
pub struct EnvRisk {
    pub loss: Tensor,
    pub w_grad: Tensor,
}

/// Supervised contrastive risk of one environment's minibatch slice.
///
/// `z` holds the slice's unit-normalized projections as rows; `positives`
/// and `negatives` must partition the rows. For every row z and every
/// positive p the term is `-log(exp(w z.p) / (exp(w z.p) + sum_neg exp(w
/// z.n)))`: the outer sum runs over the whole slice, the inner sum averages
/// over positives (divide by their count), the denominator pairs the current
/// positive with all negatives, and nothing is excluded as "self".
///
/// Returns `None` (the documented skip) when the slice has no positives or
/// no negatives: a starved slice carries no contrast, and erroring would let
/// unlucky batch composition kill a training step.
pub fn env_sup_contrastive(
    tape: &Tape,
    z: &Tensor,
    positives: &[usize],
    negatives: &[usize],
    w: f64,
) -> Result<Option<EnvRisk>> {
    if z.rank() != 2 {
        return Err(EqInvError::Shape(format!("projection slice must be rank 2, got {}", z.rank())));
    }
    if !w.is_finite() {
        return Err(EqInvError::Numeric(format!("dummy classifier value {w} is not finite")));
    }
    let n = z.rows();
    let mut seen = vec![false; n];
    for &i in positives.iter().chain(negatives) {
        if i >= n {
            return Err(EqInvError::Shape(format!("slice index {i} out of bounds for {n} rows")));
        }
        if seen[i] {
            return Err(EqInvError::Contract(format!(
                "slice index {i} listed twice; positives and negatives must partition the rows"
            )));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(EqInvError::Contract(
            "every slice row must be listed as positive or negative".into(),
        ));
    }
    if positives.is_empty() || negatives.is_empty() {
        return Ok(None);
    }

    let sims = tape.matmul_nt(z, z)?;
    let mut terms = Vec::with_capacity(n * positives.len());
    let mut w_terms = Vec::with_capacity(n * positives.len());
    for i in 0..n {
        let row = tape.row(&sims, i)?;
        let neg: Vec<Tensor> =
            negatives.iter().map(|&j| tape.vec_element(&row, j)).collect::<Result<_>>()?;
        for &p in positives {
            let pos = tape.vec_element(&row, p)?;
            let parts: Vec<&Tensor> = std::iter::once(&pos).chain(neg.iter()).collect();
            let c = tape.stack_scalars(&parts)?;
            let cw = tape.scale(&c, w)?;
            let lse = tape.log_sum_exp(&cw)?;
            terms.push(tape.sub(&lse, &tape.scale(&pos, w)?)?);
            // d/dw [lse(w c) - w c0] = dot(softmax(w c), c) - c0
            let soft = tape.exp(&tape.sub_scalar(&cw, &lse)?)?;
            let expected = tape.sum(&tape.mul(&soft, &c)?)?;
            w_terms.push(tape.sub(&expected, &pos)?);
        }
    }
    let inv_np = 1.0 / positives.len() as f64;
    let term_refs: Vec<&Tensor> = terms.iter().collect();
    let w_refs: Vec<&Tensor> = w_terms.iter().collect();
    let loss = tape.scale(&tape.sum(&tape.stack_scalars(&term_refs)?)?, inv_np)?;
    let w_grad = tape.scale(&tape.sum(&tape.stack_scalars(&w_refs)?)?, inv_np)?;
    Ok(Some(EnvRisk { loss, w_grad }))
}

/// Class-wise penalty, irmv1 form: sum over environments of risk + lambda *
/// (w-gradient)^2, the penalty applied inside the per-environment sum.
pub fn irmv1_class_loss(tape: &Tape, risks: &[EnvRisk], lambda: f64) -> Result<Tensor> {
    if risks.len() < 2 {
        return Err(EqInvError::Contract(format!(
            "class penalty needs at least 2 environments, got {}",
            risks.len()
        )));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(EqInvError::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let mut total: Option<Tensor> = None;
    for risk in risks {
        let sq = tape.mul(&risk.w_grad, &risk.w_grad)?;
        let term = tape.add(&risk.loss, &tape.scale(&sq, lambda)?)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Class-wise penalty, rex form: sum of risks + lambda * population variance
/// of the risks. Both terms stay differentiable; the dummy classifier plays
/// no role.
pub fn rex_class_loss(tape: &Tape, losses: &[&Tensor], lambda: f64) -> Result<Tensor> {
    if losses.len() < 2 {
        return Err(EqInvError::Contract(format!(
            "class penalty needs at least 2 environments, got {}",
            losses.len()
        )));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(EqInvError::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let stacked = tape.stack_scalars(losses)?;
    let spread = tape.variance(&stacked)?;
    tape.add(&tape.sum(&stacked)?, &tape.scale(&spread, lambda)?)
}

/// Dispatch on the configured penalty family.
pub fn class_penalty_loss(tape: &Tape, risks: &[EnvRisk], config: &PenaltyConfig) -> Result<Tensor> {
    config.validate()?;
    match config.mode {
        PenaltyMode::IrmV1 => irmv1_class_loss(tape, risks, config.lambda),
        PenaltyMode::Rex => {
            let losses: Vec<&Tensor> = risks.iter().map(|r| &r.loss).collect();
            rex_class_loss(tape, &losses, config.lambda)
        }
    }
}

/// One environment's share of an anchor's minibatch: input rows plus the
/// positive/negative partition (positives are the anchor-class samples).
pub struct EnvSlice {
    pub x: Tensor,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// One anchor class's environments within a minibatch.
pub struct AnchorGroup {
    pub anchor_class: usize,
    pub envs: Vec<EnvSlice>,
}

/// Composite objective with the pieces a trainer wants to log. `penalty` is
/// absent when no anchor produced a usable pair of environments; the step is
/// then plain cross-entropy and `skipped_anchors` says why.
pub struct ObjectiveParts {
    pub total: Tensor,
    pub cross_entropy: Tensor,
    pub penalty: Option<Tensor>,
    /// Anchor classes dropped this step because an environment slice had no
    /// positives or no negatives.
    pub skipped_anchors: Vec<usize>,
}

/// Cross-entropy plus the summed class-wise penalties, with the gradient
/// routing contract: cross-entropy reaches the classifier, mask, and
/// encoder; each penalty reaches the projection head and the mask only,
/// because the encoder output feeding it is detached from the graph.
pub fn total_objective(
    tape: &Tape,
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    anchors: &[AnchorGroup],
    config: &PenaltyConfig,
) -> Result<ObjectiveParts> {
    config.validate()?;
    let logits = model.forward_logits(tape, x)?;
    let cross_entropy = tape.softmax_cross_entropy(&logits, labels)?;

    let mut penalty: Option<Tensor> = None;
    let mut skipped_anchors = Vec::new();
    for group in anchors {
        let mut risks = Vec::with_capacity(group.envs.len());
        let mut starved = false;
        for slice in &group.envs {
            // Severs the penalty-to-encoder path; the encode below runs on a
            // throwaway tape so the shared tape never links them.
            let features = model.encode(&Tape::new(), &slice.x)?.detach();
            let masked = model.masked_feature(tape, &features)?;
            let z = model.project(tape, &masked)?;
            match env_sup_contrastive(tape, &z, &slice.positives, &slice.negatives, DUMMY_W)? {
                Some(risk) => risks.push(risk),
                None => {
                    starved = true;
                    break;
                }
            }
        }
        if starved || risks.len() < 2 {
            skipped_anchors.push(group.anchor_class);
            continue;
        }
        let class_loss = class_penalty_loss(tape, &risks, config)?;
        penalty = Some(match penalty {
            Some(p) => tape.add(&p, &class_loss)?,
            None => class_loss,
        });
    }

    let total = match &penalty {
        Some(p) => tape.add(&cross_entropy, p)?,
        None => cross_entropy.clone(),
    };
    Ok(ObjectiveParts { total, cross_entropy, penalty, skipped_anchors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, DEFAULT_EPS};
    use crate::model::ModelConfig;
    use crate::rng;

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, &["objective-test"]);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let mut row: Vec<f64> =
                (0..cols).map(|_| rng::symmetric_f64(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            data.extend(row);
        }
        data
    }

    fn risk_at(z_data: &[f64], rows: usize, cols: usize, pos: &[usize], neg: &[usize], w: f64) -> (f64, f64) {
        let tape = Tape::new();
        let z = Tensor::from_vec(z_data.to_vec(), &[rows, cols]).unwrap();
        let risk = env_sup_contrastive(&tape, &z, pos, neg, w).unwrap().unwrap();
        (risk.loss.item(), risk.w_grad.item())
    }

    #[test]
    fn identical_pair_gives_ln2_per_term_and_zero_w_gradient() {
        // Two identical unit rows, one positive and one negative: every
        // similarity is 1, so each of the two (row, positive) terms is
        // -log(e / (e + e)) = ln 2 and the softmax-expected similarity
        // cancels the positive exactly.
        let z = vec![1.0, 0.0, 1.0, 0.0];
        let (loss, w_grad) = risk_at(&z, 2, 2, &[0], &[1], 1.0);
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(w_grad.abs() < 1e-12);
    }

    #[test]
    fn opposed_pair_matches_the_closed_form() {
        // Rows (1,0) and (-1,0), positive then negative. The positive row's
        // term is -log(e / (e + 1/e)), the negative row's is
        // -log(1/e / (1/e + e)); their sum is 2 ln(e + 1/e).
        let z = vec![1.0, 0.0, -1.0, 0.0];
        let (loss, _) = risk_at(&z, 2, 2, &[0], &[1], 1.0);
        let e = std::f64::consts::E;
        let first = (e + 1.0 / e).ln() - 1.0;
        let second = (e + 1.0 / e).ln() + 1.0;
        assert!((first - 0.126928).abs() < 1e-6);
        assert!((loss - (first + second)).abs() < 1e-12);
    }

    #[test]
    fn six_sample_slice_matches_brute_force() {
        let (rows, cols) = (6, 4);
        let data = unit_rows(rows, cols, 41);
        let pos = [0usize, 1, 2];
        let neg = [3usize, 4, 5];
        let w = 1.0;
        let dot = |i: usize, j: usize| -> f64 {
            (0..cols).map(|k| data[i * cols + k] * data[j * cols + k]).sum()
        };
        let mut want = 0.0;
        for i in 0..rows {
            for &p in &pos {
                let a = dot(i, p);
                let denom: f64 =
                    (a * w).exp() + neg.iter().map(|&j| (dot(i, j) * w).exp()).sum::<f64>();
                want += -((a * w).exp() / denom).ln();
            }
        }
        want /= pos.len() as f64;
        let (loss, w_grad) = risk_at(&data, rows, cols, &pos, &neg, w);
        assert!((loss - want).abs() < 1e-12, "loss {loss} vs brute force {want}");

        let eps = 1e-6;
        let (up, _) = risk_at(&data, rows, cols, &pos, &neg, w + eps);
        let (down, _) = risk_at(&data, rows, cols, &pos, &neg, w - eps);
        let numeric = (up - down) / (2.0 * eps);
        assert!((w_grad - numeric).abs() < 1e-6, "dw {w_grad} vs numeric {numeric}");
    }

    #[test]
    fn starved_slices_skip_instead_of_erroring() {
        let tape = Tape::new();
        let z = Tensor::from_vec(unit_rows(3, 3, 7), &[3, 3]).unwrap();
        assert!(env_sup_contrastive(&tape, &z, &[0, 1, 2], &[], 1.0).unwrap().is_none());
        assert!(env_sup_contrastive(&tape, &z, &[], &[0, 1, 2], 1.0).unwrap().is_none());
    }

    #[test]
    fn slice_partition_is_enforced() {
        let tape = Tape::new();
        let z = Tensor::from_vec(unit_rows(3, 3, 8), &[3, 3]).unwrap();
        let dup = env_sup_contrastive(&tape, &z, &[0, 1], &[1, 2], 1.0);
        assert!(matches!(dup, Err(EqInvError::Contract(_))));
        let missing = env_sup_contrastive(&tape, &z, &[0], &[1], 1.0);
        assert!(matches!(missing, Err(EqInvError::Contract(_))));
        let oob = env_sup_contrastive(&tape, &z, &[0, 3], &[1, 2], 1.0);
        assert!(matches!(oob, Err(EqInvError::Shape(_))));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let z = Tensor::from_vec(unit_rows(5, 3, 42), &[5, 3]).unwrap().requires_grad(true);
        let worst = grad_check(
            |tape| {
                let zn = tape.l2_normalize_rows(&z)?;
                let risk = env_sup_contrastive(tape, &zn, &[0, 1], &[2, 3, 4], 1.0)?.unwrap();
                Ok(risk.loss)
            },
            &[&z],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn irmv1_reduces_to_risk_sum_without_pressure() {
        // Symmetric slices have zero w-gradient, and lambda 0 removes the
        // penalty outright; both give exactly the plain risk sum.
        let tape = Tape::new();
        let z1 = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0], &[2, 2]).unwrap();
        let z2 = Tensor::from_vec(unit_rows(4, 2, 3), &[4, 2]).unwrap();
        let r1 = env_sup_contrastive(&tape, &z1, &[0], &[1], 1.0).unwrap().unwrap();
        let r2 = env_sup_contrastive(&tape, &z2, &[0, 1], &[2, 3], 1.0).unwrap().unwrap();
        let plain = r1.loss.item() + r2.loss.item();

        let symmetric = {
            let ra = env_sup_contrastive(&tape, &z1, &[0], &[1], 1.0).unwrap().unwrap();
            let rb = env_sup_contrastive(&tape, &z1, &[0], &[1], 1.0).unwrap().unwrap();
            irmv1_class_loss(&tape, &[ra, rb], 100.0).unwrap().item()
        };
        assert!((symmetric - 2.0 * r1.loss.item()).abs() < 1e-20);

        let zero_lambda = irmv1_class_loss(&tape, &[r1, r2], 0.0).unwrap().item();
        assert!((zero_lambda - plain).abs() < 1e-20);
    }

    #[test]
    fn irmv1_matches_an_independent_composition() {
        let tape = Tape::new();
        let a = unit_rows(5, 3, 13);
        let b = unit_rows(4, 3, 14);
        let lambda = 7.5;
        let za = Tensor::from_vec(a.clone(), &[5, 3]).unwrap();
        let zb = Tensor::from_vec(b.clone(), &[4, 3]).unwrap();
        let ra = env_sup_contrastive(&tape, &za, &[0, 1], &[2, 3, 4], 1.0).unwrap().unwrap();
        let rb = env_sup_contrastive(&tape, &zb, &[0], &[1, 2, 3], 1.0).unwrap().unwrap();
        let got = irmv1_class_loss(&tape, &[ra, rb], lambda).unwrap().item();

        // Independent path: values from fresh evaluations, w-gradients from
        // scalar finite differences.
        let eps = 1e-6;
        let fd = |data: &[f64], rows: usize, pos: &[usize], neg: &[usize]| -> (f64, f64) {
            let (loss, _) = risk_at(data, rows, 3, pos, neg, 1.0);
            let (up, _) = risk_at(data, rows, 3, pos, neg, 1.0 + eps);
            let (down, _) = risk_at(data, rows, 3, pos, neg, 1.0 - eps);
            (loss, (up - down) / (2.0 * eps))
        };
        let (la, da) = fd(&a, 5, &[0, 1], &[2, 3, 4]);
        let (lb, db) = fd(&b, 4, &[0], &[1, 2, 3]);
        let want = la + lambda * da * da + lb + lambda * db * db;
        assert!((got - want).abs() < 1e-6, "irmv1 {got} vs composed {want}");
    }

    #[test]
    fn too_few_environments_is_a_contract_error() {
        let tape = Tape::new();
        let z = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let r = env_sup_contrastive(&tape, &z, &[0], &[1], 1.0).unwrap().unwrap();
        assert!(matches!(irmv1_class_loss(&tape, &[r], 1.0), Err(EqInvError::Contract(_))));
        let l = Tensor::scalar(0.5);
        assert!(matches!(rex_class_loss(&tape, &[&l], 1.0), Err(EqInvError::Contract(_))));
    }

    #[test]
    fn rex_arithmetic_oracle() {
        // Risks {0.2, 0.4} at lambda 10: population variance is 0.01, so the
        // total is 0.6 + 0.1 = 0.7.
        let tape = Tape::new();
        let a = Tensor::scalar(0.2);
        let b = Tensor::scalar(0.4);
        let got = rex_class_loss(&tape, &[&a, &b], 10.0).unwrap().item();
        assert!((got - 0.7).abs() < 1e-15);

        let equal = rex_class_loss(&tape, &[&a, &a], 123.0).unwrap().item();
        assert!((equal - 0.4).abs() < 1e-15);
    }

    #[test]
    fn identical_environments_have_zero_variance_penalty() {
        let tape = Tape::new();
        let z = Tensor::from_vec(unit_rows(4, 3, 21), &[4, 3]).unwrap();
        let ra = env_sup_contrastive(&tape, &z, &[0, 1], &[2, 3], 1.0).unwrap().unwrap();
        let rb = env_sup_contrastive(&tape, &z, &[0, 1], &[2, 3], 1.0).unwrap().unwrap();
        assert_eq!(ra.loss.item().to_bits(), rb.loss.item().to_bits());
        let config = PenaltyConfig { mode: PenaltyMode::Rex, lambda: 50.0 };
        let total = class_penalty_loss(&tape, &[ra, rb], &config).unwrap().item();
        assert_eq!(total.to_bits(), (2.0 * z_loss(&z)).to_bits());
    }

    fn z_loss(z: &Tensor) -> f64 {
        let tape = Tape::new();
        env_sup_contrastive(&tape, z, &[0, 1], &[2, 3], 1.0).unwrap().unwrap().loss.item()
    }

    #[test]
    fn rex_gradient_matches_finite_differences() {
        let za = Tensor::from_vec(unit_rows(4, 3, 31), &[4, 3]).unwrap().requires_grad(true);
        let zb = Tensor::from_vec(unit_rows(4, 3, 32), &[4, 3]).unwrap().requires_grad(true);
        let worst = grad_check(
            |tape| {
                let na = tape.l2_normalize_rows(&za)?;
                let nb = tape.l2_normalize_rows(&zb)?;
                let ra = env_sup_contrastive(tape, &na, &[0, 1], &[2, 3], 1.0)?.unwrap();
                let rb = env_sup_contrastive(tape, &nb, &[0], &[1, 2, 3], 1.0)?.unwrap();
                rex_class_loss(tape, &[&ra.loss, &rb.loss], 10.0)
            },
            &[&za, &zb],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn irmv1_gradient_matches_finite_differences() {
        let za = Tensor::from_vec(unit_rows(4, 3, 33), &[4, 3]).unwrap().requires_grad(true);
        let zb = Tensor::from_vec(unit_rows(5, 3, 34), &[5, 3]).unwrap().requires_grad(true);
        let worst = grad_check(
            |tape| {
                let na = tape.l2_normalize_rows(&za)?;
                let nb = tape.l2_normalize_rows(&zb)?;
                let ra = env_sup_contrastive(tape, &na, &[0, 1], &[2, 3], 1.0)?.unwrap();
                let rb = env_sup_contrastive(tape, &nb, &[0, 1], &[2, 3, 4], 1.0)?.unwrap();
                irmv1_class_loss(tape, &[ra, rb], 10.0)
            },
            &[&za, &zb],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    fn tiny_model(seed: u64) -> Model {
        let config = ModelConfig {
            input_dim: 6,
            encoder_hidden: vec![5],
            feature_dim: 4,
            proj_hidden: 5,
            proj_dim: 3,
            num_classes: 3,
            weight_norm: true,
        };
        Model::init(config, seed).unwrap()
    }

    fn toy_batch(seed: u64) -> (Tensor, Vec<usize>, Vec<AnchorGroup>) {
        let mut rng = rng::stream(seed, &["objective-batch"]);
        let draw = |rng: &mut _, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng::unit_f64(rng)).collect()
        };
        let x = Tensor::from_vec(draw(&mut rng, 12 * 6), &[12, 6]).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2];
        let mut groups = Vec::new();
        for anchor in 0..2usize {
            let envs = (0..2)
                .map(|_| EnvSlice {
                    x: Tensor::from_vec(draw(&mut rng, 6 * 6), &[6, 6]).unwrap(),
                    positives: vec![0, 1, 2],
                    negatives: vec![3, 4, 5],
                })
                .collect();
            groups.push(AnchorGroup { anchor_class: anchor, envs });
        }
        (x, labels, groups)
    }

    #[test]
    fn no_anchors_reduces_to_plain_cross_entropy() {
        let model = tiny_model(5);
        let (x, labels, _) = toy_batch(6);
        let tape = Tape::new();
        let parts =
            total_objective(&tape, &model, &x, &labels, &[], &PenaltyConfig::desk_default())
                .unwrap();
        assert!(parts.penalty.is_none());
        assert_eq!(parts.total.item().to_bits(), parts.cross_entropy.item().to_bits());

        let plain = {
            let tape = Tape::new();
            let logits = model.forward_logits(&tape, &x).unwrap();
            tape.softmax_cross_entropy(&logits, &labels).unwrap().item()
        };
        assert_eq!(parts.cross_entropy.item().to_bits(), plain.to_bits());
    }

    #[test]
    fn starved_anchor_is_flagged_and_skipped() {
        let model = tiny_model(7);
        let (x, labels, mut groups) = toy_batch(8);
        groups[1].envs[1].positives.clear();
        groups[1].envs[1].negatives = vec![0, 1, 2, 3, 4, 5];
        let tape = Tape::new();
        let parts =
            total_objective(&tape, &model, &x, &labels, &groups, &PenaltyConfig::desk_default())
                .unwrap();
        assert_eq!(parts.skipped_anchors, vec![1]);
        assert!(parts.penalty.is_some(), "anchor 0 still contributes");
        assert!(parts.total.item().is_finite());
    }

    #[test]
    fn encoder_gradients_come_from_cross_entropy_alone() {
        // The routing contract: with any lambda, the encoder's gradient under
        // the composite equals its gradient under plain cross-entropy,
        // bitwise, because the penalty reads detached features.
        let model = tiny_model(9);
        let (x, labels, groups) = toy_batch(10);
        for lambda in [0.0, 2.0, 10.0, 100.0] {
            let config = PenaltyConfig { mode: PenaltyMode::Rex, lambda };
            model.zero_grads();
            let tape = Tape::new();
            let parts = total_objective(&tape, &model, &x, &labels, &groups, &config).unwrap();
            assert!(parts.penalty.is_some());
            tape.backward(&parts.total).unwrap();
            let composite: Vec<Vec<f64>> = model
                .encoder_params()
                .iter()
                .map(|p| p.grad_vec().expect("encoder param missing grad"))
                .collect();

            model.zero_grads();
            let tape = Tape::new();
            let logits = model.forward_logits(&tape, &x).unwrap();
            let ce = tape.softmax_cross_entropy(&logits, &labels).unwrap();
            tape.backward(&ce).unwrap();
            for (p, want) in model.encoder_params().iter().zip(&composite) {
                let got = p.grad_vec().unwrap();
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(want) {
                    assert_eq!(g.to_bits(), w.to_bits(), "encoder grad differs at lambda {lambda}");
                }
            }
        }
        model.zero_grads();
    }

    #[test]
    fn projection_head_feels_only_the_penalty() {
        let model = tiny_model(11);
        let (x, labels, groups) = toy_batch(12);
        model.zero_grads();
        let tape = Tape::new();
        let parts = total_objective(
            &tape,
            &model,
            &x,
            &labels,
            &groups,
            &PenaltyConfig { mode: PenaltyMode::IrmV1, lambda: 10.0 },
        )
        .unwrap();
        tape.backward(&parts.cross_entropy).unwrap();
        for p in model.projection_params() {
            assert!(p.grad_vec().is_none(), "cross-entropy must not touch the projection head");
        }
        model.zero_grads();
        let tape = Tape::new();
        let parts = total_objective(
            &tape,
            &model,
            &x,
            &labels,
            &groups,
            &PenaltyConfig { mode: PenaltyMode::IrmV1, lambda: 10.0 },
        )
        .unwrap();
        tape.backward(&parts.total).unwrap();
        for p in model.projection_params() {
            let grad = p.grad_vec().expect("projection param missing grad");
            assert!(grad.iter().any(|g| *g != 0.0), "penalty should reach the projection head");
        }
        model.zero_grads();
    }

    #[test]
    fn mask_pressure_grows_with_lambda() {
        // On a fixed batch the penalty's pull on the mask must not shrink as
        // lambda grows.
        let model = tiny_model(13);
        let (x, labels, groups) = toy_batch(14);
        for mode in [PenaltyMode::Rex, PenaltyMode::IrmV1] {
            let mut last = -1.0;
            for lambda in [0.0, 2.0, 10.0, 100.0] {
                model.zero_grads();
                let tape = Tape::new();
                let parts = total_objective(
                    &tape,
                    &model,
                    &x,
                    &labels,
                    &groups,
                    &PenaltyConfig { mode, lambda },
                )
                .unwrap();
                tape.backward(parts.penalty.as_ref().unwrap()).unwrap();
                let norm = model
                    .mask
                    .grad_vec()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .unwrap_or(0.0);
                assert!(
                    norm >= last - 1e-12,
                    "{} mask pull shrank: {norm} < {last} at lambda {lambda}",
                    mode.name()
                );
                last = norm;
            }
        }
        model.zero_grads();
    }

    #[test]
    fn routed_gradients_match_finite_differences() {
        // Full composite on a toy step: check f, m, and g against finite
        // differences of the total (the penalty does not involve f, and
        // cross-entropy does not involve g, so the total is the correct
        // restricted objective for each); check the encoder against
        // cross-entropy alone, the restriction the routing contract names.
        let model = tiny_model(15);
        let (x, labels, groups) = toy_batch(16);
        let config = PenaltyConfig { mode: PenaltyMode::Rex, lambda: 10.0 };

        let mut heads = model.classifier_params();
        heads.push(model.mask.clone());
        heads.extend(model.projection_params());
        let refs: Vec<&Tensor> = heads.iter().collect();
        let worst = grad_check(
            |tape| Ok(total_objective(tape, &model, &x, &labels, &groups, &config)?.total),
            &refs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(worst < 1e-5, "head/mask/projection worst rel err {worst}");

        let encoder = model.encoder_params();
        let refs: Vec<&Tensor> = encoder.iter().collect();
        let worst = grad_check(
            |tape| {
                let logits = model.forward_logits(tape, &x)?;
                tape.softmax_cross_entropy(&logits, &labels)
            },
            &refs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(worst < 1e-5, "encoder worst rel err {worst}");
    }

    #[test]
    fn bad_penalty_config_is_a_config_error() {
        let bad = PenaltyConfig { mode: PenaltyMode::Rex, lambda: -1.0 };
        assert!(matches!(bad.validate(), Err(EqInvError::Config(_))));
        let nan = PenaltyConfig { mode: PenaltyMode::IrmV1, lambda: f64::NAN };
        assert!(matches!(nan.validate(), Err(EqInvError::Config(_))));
        assert!(matches!(PenaltyMode::parse("banana"), Err(EqInvError::Config(_))));
        assert_eq!(PenaltyMode::parse("rex").unwrap(), PenaltyMode::Rex);
        assert_eq!(PenaltyMode::parse("irmv1").unwrap(), PenaltyMode::IrmV1);
    }
}
