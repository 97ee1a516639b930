//! Losses for the embedding network and the two generator stages.
//!
//! Every loss has a recorded form built on a [`Tape`] (used for training and
//! gradient checks) and a plain evaluation wrapper. Batch conventions:
//! per-triplet sums over roles (`{a', p'}`, `{â, p̂, n̂}`, …) are kept as sums,
//! and every per-row quantity is averaged over the batch.

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::networks::{BoundMlp, Mlp, ModelBundle, FAKE_CLASS};
use crate::scalar::Scalar;
use crate::tensor::{sq_euclidean, Tensor};

/// Floor applied to the running generator loss before dividing by it.
pub const RUNNING_LOSS_FLOOR: f64 = 1e-8;

/// Label used for "real" inputs of the stage-1 discriminator.
pub const REAL: usize = 1;
/// Label used for "generated" inputs of the stage-1 discriminator.
pub const FAKE: usize = 0;

/// Balancing factors of every loss, plus the running generator loss that
/// drives the adaptive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights<S> {
    pub w_o: S,
    pub w_l: S,
    pub w_h: S,
    pub beta: S,
    pub phi: S,
    pub eta: S,
    pub mu: S,
    pub nu: S,
    pub tau: S,
    pub l_g_running: S,
}

impl<S: Scalar> LossWeights<S> {
    /// Starts with the running loss at `10·β`, so `w_o` starts near 1.
    pub fn new(beta: S, phi: S, eta: S, mu: S, nu: S, tau: S) -> Result<Self> {
        let one = S::one();
        let two = S::of(2.0);
        if !(one - two * eta > S::zero()) || !(one - two * eta - mu > S::zero()) {
            return Err(Error::Config(format!(
                "generator loss weights must be positive: 1-2eta = {}, 1-2eta-mu = {}",
                one - two * eta,
                one - two * eta - mu
            )));
        }
        if !(beta > S::zero()) || phi < S::zero() || nu < S::zero() || tau < S::zero() {
            return Err(Error::Config("beta must be positive; phi, nu, tau non-negative".into()));
        }
        let mut w =
            Self { w_o: one, w_l: phi, w_h: S::zero(), beta, phi, eta, mu, nu, tau, l_g_running: S::of(10.0) * beta };
        w.set_running(w.l_g_running);
        Ok(w)
    }

    /// Sets the running generator loss and recomputes `w_o`, `w_h`.
    pub fn set_running(&mut self, l_g: S) {
        self.l_g_running = l_g;
        let (w_o, w_l, w_h) = adaptive_weights(l_g, self.beta, self.phi);
        self.w_o = w_o;
        self.w_l = w_l;
        self.w_h = w_h;
    }

    /// Exponential moving average update: `l ← decay·l + (1 − decay)·latest`.
    pub fn update_running(&mut self, latest: S, decay: S) {
        let next = decay * self.l_g_running + (S::one() - decay) * latest;
        self.set_running(next);
    }

    /// Reverse-triplet margin for the current running loss.
    pub fn tau_r(&self) -> S {
        tau_r(self.l_g_running, self.nu, self.beta)
    }

    /// Weight of the stage-1 reconstruction term, `1 − 2η`.
    pub fn rec1_weight(&self) -> S {
        S::one() - S::of(2.0) * self.eta
    }

    /// Weight of the stage-2 reconstruction term, `1 − 2η − μ`.
    pub fn rec2_weight(&self) -> S {
        S::one() - S::of(2.0) * self.eta - self.mu
    }
}

fn floored<S: Scalar>(l: S) -> S {
    l.max(S::of(RUNNING_LOSS_FLOOR))
}

/// `(w_o, w_l, w_h) = (e^{−β/L}, φ, 1 − e^{−β/L})`.
pub fn adaptive_weights<S: Scalar>(l_g_running: S, beta: S, phi: S) -> (S, S, S) {
    let w_o = (-beta / floored(l_g_running)).exp();
    (w_o, phi, S::one() - w_o)
}

/// `τ_r = ν(1 − e^{−β/L})`: grows towards `ν` as the generator loss shrinks.
pub fn tau_r<S: Scalar>(l_g2: S, nu: S, beta: S) -> S {
    nu * (S::one() - (-beta / floored(l_g2)).exp())
}

/// `[‖a−p‖² − ‖a−n‖² + τ]₊` for one triplet.
pub fn triplet_loss<S: Scalar>(a: &[S], p: &[S], n: &[S], tau: S) -> S {
    (sq_euclidean(a, p) - sq_euclidean(a, n) + tau).max(S::zero())
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn softmax_ce<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_ce(l, labels)?;
    tape.scalar_value(loss)
}

/// Row-wise softmax probabilities.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    softmax_rows(logits).0
}

// ---------------------------------------------------------------------------
// Recorded building blocks

/// Batch mean of `[‖a−p‖² − ‖a−n‖² + margin]₊`.
pub fn record_triplet<S: Scalar>(tape: &mut Tape<S>, a: Var, p: Var, n: Var, margin: S) -> Result<Var> {
    let ap = tape.sub(a, p)?;
    let ap = tape.row_sq_norm(ap);
    let an = tape.sub(a, n)?;
    let an = tape.row_sq_norm(an);
    let diff = tape.sub(ap, an)?;
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Batch mean of the reversed hinge `[‖â−n̂‖² − ‖â−p̂‖² + τ_r]₊`.
pub fn record_reverse_triplet<S: Scalar>(
    tape: &mut Tape<S>,
    a_hat: Var,
    p_hat: Var,
    n_hat: Var,
    tau_r: S,
) -> Result<Var> {
    record_triplet(tape, a_hat, n_hat, p_hat, tau_r)
}

/// Batch mean of `‖x − y‖²`.
pub fn record_sq_distance<S: Scalar>(tape: &mut Tape<S>, x: Var, y: Var) -> Result<Var> {
    let d = tape.sub(x, y)?;
    let sq = tape.row_sq_norm(d);
    Ok(tape.mean(sq))
}

fn weighted_sum<S: Scalar>(tape: &mut Tape<S>, terms: &[(S, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let scaled = tape.scale(v, w);
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| Error::contract("empty weighted sum"))
}

fn sum_vars<S: Scalar>(tape: &mut Tape<S>, vars: &[Var]) -> Result<Var> {
    let terms: Vec<(S, Var)> = vars.iter().map(|&v| (S::one(), v)).collect();
    weighted_sum(tape, &terms)
}

/// Parameter handles for every network of a bundle on one tape.
#[derive(Debug, Clone)]
pub struct BoundBundle {
    pub feature: BoundMlp,
    pub gen1: BoundMlp,
    pub gen2: BoundMlp,
    pub disc1: BoundMlp,
    pub disc2: BoundMlp,
    pub classifier: BoundMlp,
}

impl BoundBundle {
    pub fn bind<S: Scalar>(bundle: &ModelBundle<S>, tape: &mut Tape<S>) -> Self {
        Self {
            feature: bundle.feature.bind(tape),
            gen1: bundle.gen1.bind(tape),
            gen2: bundle.gen2.bind(tape),
            disc1: bundle.disc1.bind(tape),
            disc2: bundle.disc2.bind(tape),
            classifier: bundle.classifier.bind(tape),
        }
    }
}

fn class_ce<S: Scalar>(tape: &mut Tape<S>, net: &Mlp<S>, bound: &BoundMlp, x: Var, labels: &[usize]) -> Result<Var> {
    let logits = net.forward(bound, tape, x)?;
    tape.softmax_ce(logits, labels)
}

fn shift_real(labels: &[usize]) -> Vec<usize> {
    labels.iter().map(|&l| l + 1).collect()
}

// ---------------------------------------------------------------------------
// Stage 1

/// Stage-1 inputs: the original pair and its stretched version, aligned by row.
#[derive(Debug, Clone)]
pub struct Stage1Batch<S> {
    pub anchors: Tensor<S>,
    pub positives: Tensor<S>,
    pub anchors_star: Tensor<S>,
    pub positives_star: Tensor<S>,
    /// Shared class of each anchor-positive pair.
    pub labels: Vec<usize>,
}

impl<S: Scalar> Stage1Batch<S> {
    pub fn validate(&self) -> Result<()> {
        let shape = self.anchors.shape();
        let aligned = [&self.positives, &self.anchors_star, &self.positives_star].iter().all(|t| t.shape() == shape);
        if !aligned || self.labels.len() != shape.0 {
            return Err(Error::contract("stage-1 batch is not aligned by instance"));
        }
        Ok(())
    }
}

/// Recorded stage-1 quantities.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Graph {
    pub a_prime: Var,
    pub p_prime: Var,
    /// `Σ_{x'} CE(C_F(x'), l)`
    pub class: Var,
    /// `Σ_{x'} CE(D_G1([x', x*]), real)`
    pub adv: Var,
    /// `mean(‖a*−a'‖² + ‖p*−p'‖²)`
    pub rec: Var,
    pub loss_g1: Var,
    pub loss_d1: Var,
}

/// Records `a' = G1(a*)`, `p' = G1(p*)` and both stage-1 losses.
///
/// `L_G1 = η(L_class1 + L_adv1) + (1 − 2η)·L_rec1`. The discriminator loss
/// averages cross-entropy over all real and all generated concatenations:
/// `½[CE(D([x, x*]), real) + CE(D([x', x*]), fake)]`.
#[allow(clippy::too_many_arguments)]
pub fn record_stage1<S: Scalar>(
    tape: &mut Tape<S>,
    bundle: &ModelBundle<S>,
    bound: &BoundBundle,
    a: Var,
    p: Var,
    a_star: Var,
    p_star: Var,
    labels: &[usize],
    weights: &LossWeights<S>,
) -> Result<Stage1Graph> {
    let a_prime = bundle.gen1.forward(&bound.gen1, tape, a_star)?;
    let p_prime = bundle.gen1.forward(&bound.gen1, tape, p_star)?;

    let ca = class_ce(tape, &bundle.classifier, &bound.classifier, a_prime, labels)?;
    let cp = class_ce(tape, &bundle.classifier, &bound.classifier, p_prime, labels)?;
    let class = tape.add(ca, cp)?;

    let n = labels.len();
    let real = vec![REAL; n];
    let fake = vec![FAKE; n];
    let disc = |tape: &mut Tape<S>, x: Var, cond: Var, target: &[usize]| -> Result<Var> {
        let cat = tape.concat_cols(x, cond)?;
        class_ce(tape, &bundle.disc1, &bound.disc1, cat, target)
    };
    let adv_a = disc(tape, a_prime, a_star, &real)?;
    let adv_p = disc(tape, p_prime, p_star, &real)?;
    let adv = tape.add(adv_a, adv_p)?;

    let ra = record_sq_distance(tape, a_star, a_prime)?;
    let rp = record_sq_distance(tape, p_star, p_prime)?;
    let rec = tape.add(ra, rp)?;

    let cls_adv = tape.add(class, adv)?;
    let loss_g1 = weighted_sum(tape, &[(weights.eta, cls_adv), (weights.rec1_weight(), rec)])?;

    let real_a = disc(tape, a, a_star, &real)?;
    let real_p = disc(tape, p, p_star, &real)?;
    let fake_a = disc(tape, a_prime, a_star, &fake)?;
    let fake_p = disc(tape, p_prime, p_star, &fake)?;
    let quarter = S::of(0.25);
    let loss_d1 = weighted_sum(tape, &[(quarter, real_a), (quarter, real_p), (quarter, fake_a), (quarter, fake_p)])?;

    Ok(Stage1Graph { a_prime, p_prime, class, adv, rec, loss_g1, loss_d1 })
}

fn stage1_values<S: Scalar>(
    batch: &Stage1Batch<S>,
    bundle: &ModelBundle<S>,
    weights: &LossWeights<S>,
) -> Result<(Tape<S>, Stage1Graph)> {
    batch.validate()?;
    let mut tape = Tape::new();
    let bound = BoundBundle::bind(bundle, &mut tape);
    let a = tape.constant(batch.anchors.clone());
    let p = tape.constant(batch.positives.clone());
    let a_star = tape.constant(batch.anchors_star.clone());
    let p_star = tape.constant(batch.positives_star.clone());
    let g = record_stage1(&mut tape, bundle, &bound, a, p, a_star, p_star, &batch.labels, weights)?;
    Ok((tape, g))
}

/// Stage-1 generator loss.
pub fn loss_g1<S: Scalar>(batch: &Stage1Batch<S>, bundle: &ModelBundle<S>, weights: &LossWeights<S>) -> Result<S> {
    let (tape, g) = stage1_values(batch, bundle, weights)?;
    tape.scalar_value(g.loss_g1)
}

/// Stage-1 discriminator loss.
pub fn loss_dg1<S: Scalar>(batch: &Stage1Batch<S>, bundle: &ModelBundle<S>) -> Result<S> {
    // The discriminator loss does not depend on the balancing factors.
    let weights = LossWeights::new(S::one(), S::zero(), S::of(0.25), S::zero(), S::zero(), S::zero())?;
    let (tape, g) = stage1_values(batch, bundle, &weights)?;
    tape.scalar_value(g.loss_d1)
}

// ---------------------------------------------------------------------------
// Stage 2

/// Stage-2 inputs: hard pair from stage 1 and the original negative.
#[derive(Debug, Clone)]
pub struct Stage2Batch<S> {
    pub anchors_prime: Tensor<S>,
    pub positives_prime: Tensor<S>,
    pub negatives: Tensor<S>,
    pub anchor_labels: Vec<usize>,
    pub negative_labels: Vec<usize>,
}

impl<S: Scalar> Stage2Batch<S> {
    pub fn validate(&self) -> Result<()> {
        let shape = self.anchors_prime.shape();
        let aligned = self.positives_prime.shape() == shape && self.negatives.shape() == shape;
        if !aligned || self.anchor_labels.len() != shape.0 || self.negative_labels.len() != shape.0 {
            return Err(Error::contract("stage-2 batch is not aligned by instance"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stage2Graph {
    pub a_hat: Var,
    pub p_hat: Var,
    pub n_hat: Var,
    pub art: Var,
    pub rec: Var,
    pub class: Var,
    pub adv: Var,
    pub loss_g2: Var,
    pub loss_d2: Var,
}

/// Records `x̂ = G2(x)` for the three roles and both stage-2 losses.
///
/// `L_G2 = μ·L_ART + (1 − 2η − μ)·L_rec2 + η(L_class2 + L_adv2)`, where the
/// adversarial term pushes `D_G2` towards each sample's true class, and
/// `L_DG2 = (1/(C+1))[Σ_{x'} CE(D(x'), l) + Σ_{x̂} CE(D(x̂), fake)]`.
#[allow(clippy::too_many_arguments)]
pub fn record_stage2<S: Scalar>(
    tape: &mut Tape<S>,
    bundle: &ModelBundle<S>,
    bound: &BoundBundle,
    a_prime: Var,
    p_prime: Var,
    n: Var,
    anchor_labels: &[usize],
    negative_labels: &[usize],
    weights: &LossWeights<S>,
    tau_r: S,
) -> Result<Stage2Graph> {
    let classes = bundle.classes();
    if bundle.disc2.output_dim() != classes + 1 {
        return Err(Error::contract(format!("D_G2 has width {}, expected {}", bundle.disc2.output_dim(), classes + 1)));
    }
    let a_hat = bundle.gen2.forward(&bound.gen2, tape, a_prime)?;
    let p_hat = bundle.gen2.forward(&bound.gen2, tape, p_prime)?;
    let n_hat = bundle.gen2.forward(&bound.gen2, tape, n)?;

    let art = record_reverse_triplet(tape, a_hat, p_hat, n_hat, tau_r)?;
    let ra = record_sq_distance(tape, a_prime, a_hat)?;
    let rp = record_sq_distance(tape, p_prime, p_hat)?;
    let rec = tape.add(ra, rp)?;

    let roles = [(a_hat, anchor_labels), (p_hat, anchor_labels), (n_hat, negative_labels)];
    let mut class_terms = Vec::with_capacity(3);
    let mut adv_terms = Vec::with_capacity(3);
    for &(x, labels) in &roles {
        class_terms.push(class_ce(tape, &bundle.classifier, &bound.classifier, x, labels)?);
        adv_terms.push(class_ce(tape, &bundle.disc2, &bound.disc2, x, &shift_real(labels))?);
    }
    let class = sum_vars(tape, &class_terms)?;
    let adv = sum_vars(tape, &adv_terms)?;
    let cls_adv = tape.add(class, adv)?;
    let loss_g2 = weighted_sum(tape, &[(weights.mu, art), (weights.rec2_weight(), rec), (weights.eta, cls_adv)])?;

    let mut d_terms = Vec::with_capacity(6);
    for (x, labels) in [(a_prime, anchor_labels), (p_prime, anchor_labels), (n, negative_labels)] {
        d_terms.push(class_ce(tape, &bundle.disc2, &bound.disc2, x, &shift_real(labels))?);
    }
    let fake = vec![FAKE_CLASS; anchor_labels.len()];
    for x in [a_hat, p_hat, n_hat] {
        d_terms.push(class_ce(tape, &bundle.disc2, &bound.disc2, x, &fake)?);
    }
    let k = S::one() / S::count(classes + 1);
    let terms: Vec<(S, Var)> = d_terms.into_iter().map(|v| (k, v)).collect();
    let loss_d2 = weighted_sum(tape, &terms)?;

    Ok(Stage2Graph { a_hat, p_hat, n_hat, art, rec, class, adv, loss_g2, loss_d2 })
}

fn stage2_values<S: Scalar>(
    batch: &Stage2Batch<S>,
    bundle: &ModelBundle<S>,
    weights: &LossWeights<S>,
) -> Result<(Tape<S>, Stage2Graph)> {
    batch.validate()?;
    let mut tape = Tape::new();
    let bound = BoundBundle::bind(bundle, &mut tape);
    let a = tape.constant(batch.anchors_prime.clone());
    let p = tape.constant(batch.positives_prime.clone());
    let n = tape.constant(batch.negatives.clone());
    let g = record_stage2(
        &mut tape,
        bundle,
        &bound,
        a,
        p,
        n,
        &batch.anchor_labels,
        &batch.negative_labels,
        weights,
        weights.tau_r(),
    )?;
    Ok((tape, g))
}

/// Stage-2 generator loss with `τ_r` taken from the running loss in `weights`.
pub fn loss_g2<S: Scalar>(batch: &Stage2Batch<S>, bundle: &ModelBundle<S>, weights: &LossWeights<S>) -> Result<S> {
    let (tape, g) = stage2_values(batch, bundle, weights)?;
    tape.scalar_value(g.loss_g2)
}

/// Stage-2 discriminator loss over `C + 1` classes.
pub fn loss_dg2<S: Scalar>(batch: &Stage2Batch<S>, bundle: &ModelBundle<S>, classes: usize) -> Result<S> {
    if bundle.disc2.output_dim() != classes + 1 || bundle.classes() != classes {
        return Err(Error::contract(format!(
            "D_G2 width {} does not match {classes} classes",
            bundle.disc2.output_dim()
        )));
    }
    let weights = LossWeights::new(S::one(), S::zero(), S::of(0.25), S::of(0.25), S::zero(), S::zero())?;
    let (tape, g) = stage2_values(batch, bundle, &weights)?;
    tape.scalar_value(g.loss_d2)
}

/// Reverse triplet loss of one triplet passed through `G2`.
pub fn art_loss<S: Scalar>(a_prime: &[S], p_prime: &[S], n: &[S], gen2: &Mlp<S>, tau_r: S) -> Result<S> {
    let row = |x: &[S]| Tensor::new(1, x.len(), x.to_vec());
    let a = gen2.infer(&row(a_prime)?)?;
    let p = gen2.infer(&row(p_prime)?)?;
    let n = gen2.infer(&row(n)?)?;
    Ok(triplet_loss(a.row(0), n.row(0), p.row(0), tau_r))
}

// ---------------------------------------------------------------------------
// Embedding objective

/// A triplet of recorded embeddings.
#[derive(Debug, Clone, Copy)]
pub struct TripletVars {
    pub anchor: Var,
    pub positive: Var,
    pub negative: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveGraph {
    /// `L_t(X)`, or the mined loss when one was supplied.
    pub original: Var,
    pub class: Option<Var>,
    pub hard: Option<Var>,
    pub total: Var,
}

/// `L_F = w_o·L_t(X) + φ·L_sm + w_h·L_t(X̂)`.
///
/// `class_roles` lists every embedding role entering the category loss with
/// its labels; `hard` is the generated triplet. With `mined`, the first term
/// uses the mined-triplet loss instead of `L_t(X)`.
pub fn record_objective<S: Scalar>(
    tape: &mut Tape<S>,
    bundle: &ModelBundle<S>,
    bound: &BoundBundle,
    original: TripletVars,
    class_roles: &[(Var, &[usize])],
    hard: Option<TripletVars>,
    weights: &LossWeights<S>,
    mined: Option<Var>,
) -> Result<ObjectiveGraph> {
    let original = match mined {
        Some(m) => m,
        None => record_triplet(tape, original.anchor, original.positive, original.negative, weights.tau)?,
    };
    let mut terms = vec![(weights.w_o, original)];

    let class = if class_roles.is_empty() || weights.phi == S::zero() {
        None
    } else {
        let mut ces = Vec::with_capacity(class_roles.len());
        for &(x, labels) in class_roles {
            ces.push(class_ce(tape, &bundle.classifier, &bound.classifier, x, labels)?);
        }
        let c = sum_vars(tape, &ces)?;
        terms.push((weights.phi, c));
        Some(c)
    };

    let hard = match hard {
        Some(h) if weights.w_h != S::zero() => {
            let l = record_triplet(tape, h.anchor, h.positive, h.negative, weights.tau)?;
            terms.push((weights.w_h, l));
            Some(l)
        }
        _ => None,
    };
    let total = weighted_sum(tape, &terms)?;
    Ok(ObjectiveGraph { original, class, hard, total })
}

/// Embeddings of one batch of triplets in every role, aligned by row.
#[derive(Debug, Clone)]
pub struct ObjectiveInputs<S> {
    pub original: [Tensor<S>; 3],
    pub hidden: [Tensor<S>; 2],
    pub generated: [Tensor<S>; 3],
    pub anchor_labels: Vec<usize>,
    pub negative_labels: Vec<usize>,
}

/// Value of the embedding objective on fixed embeddings.
pub fn embedding_objective<S: Scalar>(
    inputs: &ObjectiveInputs<S>,
    bundle: &ModelBundle<S>,
    weights: &LossWeights<S>,
    mined_loss: Option<S>,
) -> Result<S> {
    let rows = inputs.anchor_labels.len();
    let all = inputs.original.iter().chain(&inputs.hidden).chain(&inputs.generated);
    if inputs.negative_labels.len() != rows || all.clone().any(|t| t.rows() != rows) {
        return Err(Error::contract("objective inputs are not aligned by triplet"));
    }
    let mut tape = Tape::new();
    let bound = BoundBundle::bind(bundle, &mut tape);
    let c = |tape: &mut Tape<S>, t: &Tensor<S>| tape.constant(t.clone());
    let [a, p, n] = [0, 1, 2].map(|i| c(&mut tape, &inputs.original[i]));
    let [ah, ph] = [0, 1].map(|i| c(&mut tape, &inputs.hidden[i]));
    let [ag, pg, ng] = [0, 1, 2].map(|i| c(&mut tape, &inputs.generated[i]));
    let (al, nl) = (&inputs.anchor_labels[..], &inputs.negative_labels[..]);
    let roles = [(a, al), (p, al), (n, nl), (ah, al), (ph, al), (ag, al), (pg, al), (ng, nl)];
    let mined = mined_loss.map(|m| tape.constant(Tensor::scalar(m)));
    let g = record_objective(
        &mut tape,
        bundle,
        &bound,
        TripletVars { anchor: a, positive: p, negative: n },
        &roles,
        Some(TripletVars { anchor: ag, positive: pg, negative: ng }),
        weights,
        mined,
    )?;
    tape.scalar_value(g.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Activation, Architecture, Layer};

    const E: f64 = std::f64::consts::E;

    fn paper_weights() -> LossWeights<f64> {
        LossWeights::new(0.5, 0.5, 0.3, 0.3, 0.2, 0.2).unwrap()
    }

    fn tensor(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_f64_rows(rows).unwrap()
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.2), 0.0);
        assert!((triplet_loss::<f64>(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], 0.2) - 2.2).abs() < 1e-12);
        // ‖a−p‖² = 0.25, ‖a−n‖² = 0.5625, difference −0.3125 = −τ
        assert_eq!(triplet_loss(&[0.0], &[0.5], &[0.75], 0.3125), 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = tensor(&[&[0.7, 0.7, 0.7, 0.7]]);
        assert!((softmax_ce(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let confident = tensor(&[&[30.0, 0.0, 0.0]]);
        assert!(softmax_ce(&confident, &[0]).unwrap() < 1e-12);
        let v = softmax_ce(&tensor(&[&[1.0, 2.0, 3.0]]), &[2]).unwrap();
        let expected = (1.0 + (-1f64).exp() + (-2f64).exp()).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.407606).abs() < 1e-6);
        assert!(softmax_ce(&uniform, &[4]).is_err());
    }

    #[test]
    fn tau_r_examples() {
        assert!(tau_r(1e12, 0.2, 0.5) < 1e-12);
        assert!((tau_r::<f64>(1e-6, 0.2, 0.5) - 0.2).abs() < 1e-12);
        let v = tau_r(0.5, 0.2, 0.5);
        assert!((v - 0.2 * (1.0 - 1.0 / E)).abs() < 1e-12);
        assert!((v - 0.126424).abs() < 1e-6);
        assert_eq!(tau_r(0.0, 0.2, 0.5), tau_r(RUNNING_LOSS_FLOOR, 0.2, 0.5));
    }

    #[test]
    fn adaptive_weight_examples() {
        let (w_o, w_l, w_h) = adaptive_weights::<f64>(1e12, 0.5, 0.5);
        assert!((w_o - 1.0).abs() < 1e-9 && w_h < 1e-9 && w_l == 0.5);
        let (w_o, _, w_h) = adaptive_weights::<f64>(0.5, 0.5, 0.5);
        assert!((w_o - (-1f64).exp()).abs() < 1e-12);
        assert!((w_o - 0.367879).abs() < 1e-6 && (w_h - 0.632121).abs() < 1e-6);
        for l in [0.0, 1e-3, 0.3, 7.0] {
            let (o, _, h) = adaptive_weights::<f64>(l, 0.5, 0.25);
            assert!((o + h - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_weight_positivity() {
        let w = paper_weights();
        assert!((w.rec1_weight() - 0.4).abs() < 1e-15);
        assert!((w.rec2_weight() - 0.1).abs() < 1e-15);
        assert!(LossWeights::new(0.5, 0.5, 0.5, 0.0, 0.2, 0.2).is_err());
        assert!(LossWeights::new(0.5, 0.5, 0.3, 0.4, 0.2, 0.2).is_err());
        assert!((w.w_o - (-0.1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn reverse_triplet_examples() {
        // Single-row tensors fed straight into the recorded hinge.
        let eval = |a: &[f64], p: &[f64], n: &[f64], t: f64| {
            let mut tape = Tape::new();
            let [a, p, n] = [a, p, n].map(|x| tape.constant(tensor(&[x])));
            let l = record_reverse_triplet(&mut tape, a, p, n, t).unwrap();
            tape.scalar_value(l).unwrap()
        };
        // ‖â−n̂‖² = 0.1, ‖â−p̂‖² = 0.5
        let a = [0.0, 0.0];
        let n = [0.1f64.sqrt(), 0.0];
        let p = [0.0, 0.5f64.sqrt()];
        assert_eq!(eval(&a, &p, &n, 0.1), 0.0);
        assert!((eval(&a, &n, &p, 0.1) - 0.5).abs() < 1e-12);
        assert!((eval(&a, &a, &p, 0.1) - 0.6).abs() < 1e-12);
    }

    fn identity_layer(d: usize) -> Layer<f64> {
        let mut w = Tensor::zeros(d, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        Layer { weight: w, bias: Tensor::zeros(1, d), activation: Activation::Identity }
    }

    fn small_bundle(seed: u64) -> ModelBundle<f64> {
        let arch = Architecture { input_dim: 5, feature_hidden: 6, embedding_dim: 3, gen_hidden: (4, 5), classes: 4 };
        ModelBundle::init(arch, seed).unwrap()
    }

    fn unit_rows(rows: &[&[f64]]) -> Tensor<f64> {
        tensor(rows).l2_normalize_rows().0
    }

    #[test]
    fn identity_generator_isolates_class_term() {
        let mut b = small_bundle(4);
        b.gen1 = Mlp::from_layers(vec![identity_layer(3)], true).unwrap();
        // D_G1 says "real" with certainty: huge bias on the real logit.
        let mut last = b.disc1.layers().to_vec();
        let k = last.len() - 1;
        last[k].weight = Tensor::zeros(last[k].weight.rows(), 2);
        last[k].bias = tensor(&[&[-40.0, 40.0]]);
        b.disc1 = Mlp::from_layers(last, false).unwrap();

        let a = unit_rows(&[&[1.0, 0.2, -0.3], &[0.1, 0.9, 0.4]]);
        let p = unit_rows(&[&[0.8, 0.1, -0.5], &[-0.2, 1.0, 0.1]]);
        let batch = Stage1Batch {
            anchors: a.clone(),
            positives: p.clone(),
            anchors_star: a.clone(),
            positives_star: p.clone(),
            labels: vec![1, 3],
        };
        let w = paper_weights();
        let (tape, g) = stage1_values(&batch, &b, &w).unwrap();
        assert!(tape.scalar_value(g.rec).unwrap() < 1e-28);
        assert!(tape.scalar_value(g.adv).unwrap() < 1e-12);
        let class = softmax_ce(&b.classifier.infer(&a).unwrap(), &[1, 3]).unwrap()
            + softmax_ce(&b.classifier.infer(&p).unwrap(), &[1, 3]).unwrap();
        assert!((tape.scalar_value(g.loss_g1).unwrap() - 0.3 * class).abs() < 1e-12);
    }

    fn random_stage1() -> Stage1Batch<f64> {
        let a = unit_rows(&[&[1.0, 0.2, -0.3], &[0.1, 0.9, 0.4], &[-0.5, 0.5, 0.5]]);
        let p = unit_rows(&[&[0.8, 0.1, -0.5], &[-0.2, 1.0, 0.1], &[-0.3, 0.6, 0.2]]);
        let mut a_star = a.clone();
        let mut p_star = p.clone();
        for r in 0..3 {
            let (sa, sp) = crate::plm::stretch_pair(a.row(r), p.row(r), 0.4).unwrap();
            a_star.row_mut(r).copy_from_slice(&sa);
            p_star.row_mut(r).copy_from_slice(&sp);
        }
        Stage1Batch { anchors: a, positives: p, anchors_star: a_star, positives_star: p_star, labels: vec![0, 2, 3] }
    }

    #[test]
    fn stage1_losses_match_component_recomputation() {
        let b = small_bundle(8);
        let batch = random_stage1();
        let w = paper_weights();
        let a1 = b.gen1.infer(&batch.anchors_star).unwrap();
        let p1 = b.gen1.infer(&batch.positives_star).unwrap();
        let n = batch.labels.len() as f64;
        let class = softmax_ce(&b.classifier.infer(&a1).unwrap(), &batch.labels).unwrap()
            + softmax_ce(&b.classifier.infer(&p1).unwrap(), &batch.labels).unwrap();
        let disc = |x: &Tensor<f64>, c: &Tensor<f64>, t: usize| {
            let logits = crate::networks::discriminate_pair(&b.disc1, x, c).unwrap();
            softmax_ce(&logits, &vec![t; logits.rows()]).unwrap()
        };
        let adv = disc(&a1, &batch.anchors_star, 1) + disc(&p1, &batch.positives_star, 1);
        let rec: f64 = (0..3)
            .map(|r| {
                sq_euclidean(batch.anchors_star.row(r), a1.row(r))
                    + sq_euclidean(batch.positives_star.row(r), p1.row(r))
            })
            .sum::<f64>()
            / n;
        let expected = 0.3 * (class + adv) + 0.4 * rec;
        assert!((loss_g1(&batch, &b, &w).unwrap() - expected).abs() < 1e-12);

        let d = 0.5
            * (0.5 * (disc(&batch.anchors, &batch.anchors_star, 1) + disc(&batch.positives, &batch.positives_star, 1))
                + 0.5 * (disc(&a1, &batch.anchors_star, 0) + disc(&p1, &batch.positives_star, 0)));
        assert!((loss_dg1(&batch, &b).unwrap() - d).abs() < 1e-12);
    }

    fn constant_logits(net: &Mlp<f64>, logits: &[f64]) -> Mlp<f64> {
        let mut layers = net.layers().to_vec();
        let k = layers.len() - 1;
        layers[k].weight = Tensor::zeros(layers[k].weight.rows(), logits.len());
        layers[k].bias = tensor(&[logits]);
        Mlp::from_layers(layers, false).unwrap()
    }

    #[test]
    fn uninformative_stage1_discriminator() {
        let mut b = small_bundle(9);
        let batch = random_stage1();
        b.disc1 = constant_logits(&b.disc1, &[0.3, 0.3]);
        assert!((loss_dg1(&batch, &b).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminators_have_vanishing_loss() {
        // Stage 1: real inputs are unit vectors, generated ones are pushed to
        // a fixed far-away point by a G1 with zero weights and a large bias.
        let mut b = small_bundle(10);
        let batch = random_stage1();
        b.gen1 = Mlp::from_layers(
            vec![Layer {
                weight: Tensor::zeros(3, 3),
                bias: tensor(&[&[0.0, 0.0, 1.0]]),
                activation: Activation::Identity,
            }],
            true,
        )
        .unwrap();
        // logit_real − logit_fake = 600 − 800·x₃ on the first half of the
        // input; generated rows have x₃ = 1, real rows x₃ < 0.6.
        let mut w1 = Tensor::zeros(6, 2);
        w1.set(2, FAKE, 400.0);
        w1.set(2, REAL, -400.0);
        let bias = tensor(&[&[-300.0, 300.0]]);
        b.disc1 = Mlp::from_layers(vec![Layer { weight: w1, bias, activation: Activation::Identity }], false).unwrap();
        let max_third = (0..3).map(|r| batch.anchors.get(r, 2).max(batch.positives.get(r, 2))).fold(f64::MIN, f64::max);
        assert!(max_third < 0.6);
        assert!(loss_dg1(&batch, &b).unwrap() < 1e-12);

        // Stage 2: D_G2 keyed on the same coordinate trick.
        let mut b = small_bundle(11);
        b.gen2 = Mlp::from_layers(
            vec![Layer {
                weight: Tensor::zeros(3, 3),
                bias: tensor(&[&[0.0, 0.0, 1.0]]),
                activation: Activation::Identity,
            }],
            true,
        )
        .unwrap();
        // Real rows are one-hot on coordinate 0 or 1 (class 0 → e0, class 1 → e1).
        let e = |i: usize| {
            let mut r = vec![0.0; 3];
            r[i] = 1.0;
            r
        };
        let stage2 = Stage2Batch {
            anchors_prime: Tensor::from_rows(&[e(0)]).unwrap(),
            positives_prime: Tensor::from_rows(&[e(0)]).unwrap(),
            negatives: Tensor::from_rows(&[e(1)]).unwrap(),
            anchor_labels: vec![0],
            negative_labels: vec![1],
        };
        // output k: fake(0), class0(1), class1(2), class2(3), class3(4)
        let mut w = Tensor::zeros(3, 5);
        w.set(0, 1, 100.0);
        w.set(1, 2, 100.0);
        w.set(2, 0, 100.0);
        b.disc2 = Mlp::from_layers(
            vec![Layer { weight: w, bias: Tensor::zeros(1, 5), activation: Activation::Identity }],
            false,
        )
        .unwrap();
        assert!(loss_dg2(&stage2, &b, 4).unwrap() < 1e-12);
    }

    fn random_stage2() -> Stage2Batch<f64> {
        Stage2Batch {
            anchors_prime: unit_rows(&[&[1.0, 0.2, -0.3], &[0.1, 0.9, 0.4]]),
            positives_prime: unit_rows(&[&[0.8, 0.1, -0.5], &[-0.2, 1.0, 0.1]]),
            negatives: unit_rows(&[&[-0.4, 0.3, 0.9], &[0.6, -0.6, 0.2]]),
            anchor_labels: vec![1, 2],
            negative_labels: vec![3, 0],
        }
    }

    #[test]
    fn stage2_losses_match_component_recomputation() {
        let b = small_bundle(12);
        let batch = random_stage2();
        let mut w = paper_weights();
        w.set_running(0.8);
        let tr = w.tau_r();
        let g = |t: &Tensor<f64>| b.gen2.infer(t).unwrap();
        let (ah, ph, nh) = (g(&batch.anchors_prime), g(&batch.positives_prime), g(&batch.negatives));
        let rows = 2;
        let art: f64 = (0..rows).map(|r| triplet_loss(ah.row(r), nh.row(r), ph.row(r), tr)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            let direct =
                art_loss(batch.anchors_prime.row(r), batch.positives_prime.row(r), batch.negatives.row(r), &b.gen2, tr)
                    .unwrap();
            assert!((direct - triplet_loss(ah.row(r), nh.row(r), ph.row(r), tr)).abs() < 1e-15);
        }
        let rec: f64 = (0..rows)
            .map(|r| {
                sq_euclidean(batch.anchors_prime.row(r), ah.row(r))
                    + sq_euclidean(batch.positives_prime.row(r), ph.row(r))
            })
            .sum::<f64>()
            / rows as f64;
        let shift = |l: &[usize]| l.iter().map(|x| x + 1).collect::<Vec<_>>();
        let ce = |net: &Mlp<f64>, x: &Tensor<f64>, l: &[usize]| softmax_ce(&net.infer(x).unwrap(), l).unwrap();
        let (al, nl) = (&batch.anchor_labels, &batch.negative_labels);
        let class = ce(&b.classifier, &ah, al) + ce(&b.classifier, &ph, al) + ce(&b.classifier, &nh, nl);
        let adv = ce(&b.disc2, &ah, &shift(al)) + ce(&b.disc2, &ph, &shift(al)) + ce(&b.disc2, &nh, &shift(nl));
        let expected = 0.3 * art + 0.1 * rec + 0.3 * (class + adv);
        assert!((loss_g2(&batch, &b, &w).unwrap() - expected).abs() < 1e-12);

        let fake = vec![0; rows];
        let d = (ce(&b.disc2, &batch.anchors_prime, &shift(al))
            + ce(&b.disc2, &batch.positives_prime, &shift(al))
            + ce(&b.disc2, &batch.negatives, &shift(nl))
            + ce(&b.disc2, &ah, &fake)
            + ce(&b.disc2, &ph, &fake)
            + ce(&b.disc2, &nh, &fake))
            / 5.0;
        assert!((loss_dg2(&batch, &b, 4).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn stage2_identity_generator_has_no_reconstruction_error() {
        let mut b = small_bundle(13);
        b.gen2 = Mlp::from_layers(vec![identity_layer(3)], true).unwrap();
        let batch = random_stage2();
        let (tape, g) = stage2_values(&batch, &b, &paper_weights()).unwrap();
        assert!(tape.scalar_value(g.rec).unwrap() < 1e-28);
    }

    #[test]
    fn uniform_stage2_discriminator() {
        let mut b = small_bundle(14);
        b.disc2 = constant_logits(&b.disc2, &[0.1; 5]);
        let mut batch = random_stage2();
        for t in [&mut batch.anchors_prime, &mut batch.positives_prime, &mut batch.negatives] {
            *t = t.select_rows(&[0]).unwrap();
        }
        batch.anchor_labels.truncate(1);
        batch.negative_labels.truncate(1);
        let v = loss_dg2(&batch, &b, 4).unwrap();
        assert!((v - 1.2 * 5f64.ln()).abs() < 1e-12);
        assert!((v - 1.931).abs() < 1e-3);
        assert!(loss_dg2(&batch, &b, 5).is_err());
    }

    #[test]
    fn misaligned_batches_are_rejected() {
        let b = small_bundle(15);
        let mut s1 = random_stage1();
        s1.labels.pop();
        assert!(loss_g1(&s1, &b, &paper_weights()).is_err());
        let mut s2 = random_stage2();
        s2.negatives = s2.negatives.select_rows(&[0]).unwrap();
        assert!(loss_g2(&s2, &b, &paper_weights()).is_err());
    }

    fn objective_inputs() -> ObjectiveInputs<f64> {
        let s = random_stage2();
        ObjectiveInputs {
            original: [
                unit_rows(&[&[0.2, 0.9, -0.1], &[0.5, 0.5, 0.5]]),
                unit_rows(&[&[0.3, 0.8, 0.0], &[0.4, 0.6, 0.3]]),
                unit_rows(&[&[0.9, -0.2, 0.1], &[-0.7, 0.1, 0.6]]),
            ],
            hidden: [s.anchors_prime.clone(), s.positives_prime.clone()],
            generated: [
                unit_rows(&[&[0.1, 0.1, 0.9], &[0.9, 0.1, 0.1]]),
                unit_rows(&[&[-0.1, 0.3, 0.9], &[0.8, -0.2, 0.3]]),
                unit_rows(&[&[0.0, 0.2, 0.95], &[0.7, 0.2, 0.2]]),
            ],
            anchor_labels: vec![1, 2],
            negative_labels: vec![3, 0],
        }
    }

    #[test]
    fn objective_reduces_to_plain_triplet() {
        let b = small_bundle(16);
        let inputs = objective_inputs();
        let mut w = LossWeights::new(0.5, 0.0, 0.3, 0.3, 0.2, 0.2).unwrap();
        w.set_running(1e300);
        assert_eq!(w.w_h, 0.0);
        let [a, p, n] = &inputs.original;
        let plain = (0..2).map(|r| triplet_loss(a.row(r), p.row(r), n.row(r), 0.2)).sum::<f64>() / 2.0;
        assert!((embedding_objective(&inputs, &b, &w, None).unwrap() - plain).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_hand_sum() {
        let b = small_bundle(17);
        let inputs = objective_inputs();
        let mut w = paper_weights();
        w.set_running(0.7);
        let [a, p, n] = &inputs.original;
        let [ag, pg, ng] = &inputs.generated;
        let lt = |a: &Tensor<f64>, p: &Tensor<f64>, n: &Tensor<f64>| {
            (0..2).map(|r| triplet_loss(a.row(r), p.row(r), n.row(r), 0.2)).sum::<f64>() / 2.0
        };
        let ce = |x: &Tensor<f64>, l: &[usize]| softmax_ce(&b.classifier.infer(x).unwrap(), l).unwrap();
        let (al, nl) = (&inputs.anchor_labels[..], &inputs.negative_labels[..]);
        let sm = ce(a, al)
            + ce(p, al)
            + ce(n, nl)
            + ce(&inputs.hidden[0], al)
            + ce(&inputs.hidden[1], al)
            + ce(ag, al)
            + ce(pg, al)
            + ce(ng, nl);
        let expected = w.w_o * lt(a, p, n) + 0.5 * sm + w.w_h * lt(ag, pg, ng);
        assert!((embedding_objective(&inputs, &b, &w, None).unwrap() - expected).abs() < 1e-12);

        let mined = 0.37;
        let expected = w.w_o * mined + 0.5 * sm + w.w_h * lt(ag, pg, ng);
        assert!((embedding_objective(&inputs, &b, &w, Some(mined)).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn running_loss_ema() {
        let mut w = paper_weights();
        assert_eq!(w.l_g_running, 5.0);
        w.update_running(1.0, 0.9);
        assert!((w.l_g_running - 4.6).abs() < 1e-12);
        assert!((w.w_o + w.w_h - 1.0).abs() < 1e-15);
    }
}
