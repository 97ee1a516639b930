//! Training loop: pretraining of the feature extractor, then per batch a
//! stage-1 update, a stage-2 update and an embedding update.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::config::{TrainConfig, Variant};
use crate::dataset::{BalancedSampler, FeatureDataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::losses::{
    record_objective, record_stage1, record_stage2, record_triplet, BoundBundle, LossWeights, ObjectiveGraph,
    TripletVars,
};
use crate::mining::{Miner, MinerKind, TripletBatch};
use crate::networks::{embed, Architecture, EmbeddingBatch, Mlp, ModelBundle};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::plm::{stretch_pair, PlmState};
use crate::scalar::Scalar;
use crate::tensor::{euclidean, Tensor};

pub const LOG_HEADER: &str = "batch,L_F,L_G1,L_DG1,L_G2,L_DG2,w_o,w_h,tau_r,d_t";

/// Recall cut-offs reported after training.
pub const DEFAULT_KS: [usize; 4] = [1, 2, 4, 8];

/// One logged batch. Losses of stages that did not run are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub batch: usize,
    pub l_f: f64,
    pub l_g1: f64,
    pub l_dg1: f64,
    pub l_g2: f64,
    pub l_dg2: f64,
    pub w_o: f64,
    pub w_h: f64,
    pub tau_r: f64,
    pub d_t: f64,
    /// Anchor-positive distances seen in this batch (not written to CSV).
    pub ap_distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochLog {
    pub epoch: usize,
    pub records: Vec<BatchRecord>,
}

impl EpochLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.batch, r.l_f, r.l_g1, r.l_dg1, r.l_g2, r.l_dg2, r.w_o, r.w_h, r.tau_r, r.d_t
            );
        }
        out
    }

    /// Mean anchor-positive distance over the epoch.
    pub fn mean_ap_distance(&self) -> Option<f64> {
        let (sum, n) =
            self.records.iter().flat_map(|r| &r.ap_distances).fold((0.0, 0usize), |(s, n), &d| (s + d, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

fn check_finite(loss: &'static str, value: f64, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { loss, batch })
    }
}

/// Stretch-factor parameters as seen by the recorded objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlmParams<S> {
    pub alpha: S,
    pub gamma: S,
    pub threshold: S,
}

/// Records the embedding objective from raw inputs: `F`, the stretch, `G1`
/// and `G2` are all on the tape, so gradients reach `F` through the
/// generated samples.
#[allow(clippy::too_many_arguments)]
pub fn record_feature_objective<S: Scalar>(
    tape: &mut Tape<S>,
    bundle: &ModelBundle<S>,
    bound: &BoundBundle,
    inputs: Var,
    labels: &[usize],
    triplets: &TripletBatch,
    mined: Option<&TripletBatch>,
    plm: PlmParams<S>,
    weights: &LossWeights<S>,
    variant: Variant,
) -> Result<ObjectiveGraph> {
    let x = bundle.feature.forward(&bound.feature, tape, inputs)?;
    let a = tape.select_rows(x, &triplets.anchors())?;
    let p = tape.select_rows(x, &triplets.positives())?;
    let n = tape.select_rows(x, &triplets.negatives())?;
    let al: Vec<usize> = triplets.anchors().iter().map(|&i| labels[i]).collect();
    let nl: Vec<usize> = triplets.negatives().iter().map(|&i| labels[i]).collect();
    let original = TripletVars { anchor: a, positive: p, negative: n };

    let mined = match mined {
        Some(m) => {
            let ma = tape.select_rows(x, &m.anchors())?;
            let mp = tape.select_rows(x, &m.positives())?;
            let mn = tape.select_rows(x, &m.negatives())?;
            Some(record_triplet(tape, ma, mp, mn, weights.tau)?)
        }
        None => None,
    };

    if variant == Variant::Baseline {
        let roles = [(a, &al[..]), (p, &al[..]), (n, &nl[..])];
        return record_objective(tape, bundle, bound, original, &roles, None, weights, mined);
    }

    let diff = tape.sub(a, p)?;
    let d = tape.row_norm(diff);
    let lambda = tape.plm_lambda(d, plm.alpha, plm.gamma, plm.threshold);
    let shift = tape.mul_col(diff, lambda)?;
    let a_star = tape.add(a, shift)?;
    let p_star = tape.sub(p, shift)?;
    let a1 = bundle.gen1.forward(&bound.gen1, tape, a_star)?;
    let p1 = bundle.gen1.forward(&bound.gen1, tape, p_star)?;

    if variant == Variant::NoStage2 {
        let roles = [(a, &al[..]), (p, &al[..]), (n, &nl[..]), (a1, &al[..]), (p1, &al[..])];
        let hard = TripletVars { anchor: a1, positive: p1, negative: n };
        return record_objective(tape, bundle, bound, original, &roles, Some(hard), weights, mined);
    }

    let a2 = bundle.gen2.forward(&bound.gen2, tape, a1)?;
    let p2 = bundle.gen2.forward(&bound.gen2, tape, p1)?;
    let n2 = bundle.gen2.forward(&bound.gen2, tape, n)?;
    let roles = [
        (a, &al[..]),
        (p, &al[..]),
        (n, &nl[..]),
        (a1, &al[..]),
        (p1, &al[..]),
        (a2, &al[..]),
        (p2, &al[..]),
        (n2, &nl[..]),
    ];
    let hard = TripletVars { anchor: a2, positive: p2, negative: n2 };
    record_objective(tape, bundle, bound, original, &roles, Some(hard), weights, mined)
}

/// Value of [`record_feature_objective`] on fixed inputs.
#[allow(clippy::too_many_arguments)]
pub fn feature_objective<S: Scalar>(
    bundle: &ModelBundle<S>,
    inputs: &Tensor<S>,
    labels: &[usize],
    triplets: &TripletBatch,
    mined: Option<&TripletBatch>,
    plm: PlmParams<S>,
    weights: &LossWeights<S>,
    variant: Variant,
) -> Result<S> {
    let mut tape = Tape::new();
    let bound = BoundBundle::bind(bundle, &mut tape);
    let x = tape.constant(inputs.clone());
    let g = record_feature_objective(&mut tape, bundle, &bound, x, labels, triplets, mined, plm, weights, variant)?;
    tape.scalar_value(g.total)
}

#[derive(Debug, Clone)]
struct Optimizers {
    feature: AdamState<f64>,
    classifier: AdamState<f64>,
    gen1: AdamState<f64>,
    gen2: AdamState<f64>,
    disc1: AdamState<f64>,
    disc2: AdamState<f64>,
}

fn apply_update(net: &mut Mlp<f64>, opt: &mut AdamState<f64>, mut grads: Vec<Tensor<f64>>, clip: f64) -> Result<()> {
    if clip > 0.0 {
        clip_global_norm(&mut grads, clip);
    }
    let mut params = net.params_mut();
    opt.step(&mut params, &grads)
}

fn stretch_rows(a: &Tensor<f64>, p: &Tensor<f64>, plm: &PlmState<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut a_star = Vec::with_capacity(a.len());
    let mut p_star = Vec::with_capacity(p.len());
    for r in 0..a.rows() {
        let lambda = plm.lambda(euclidean(a.row(r), p.row(r)));
        let (x, y) = stretch_pair(a.row(r), p.row(r), lambda)?;
        a_star.extend(x);
        p_star.extend(y);
    }
    Ok((Tensor::new(a.rows(), a.cols(), a_star)?, Tensor::new(p.rows(), p.cols(), p_star)?))
}

/// Holds the networks, optimizer state and schedule state of one run.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub config: TrainConfig,
    data: &'a FeatureDataset,
    bundle: ModelBundle<f64>,
    plm: Option<PlmState<f64>>,
    weights: LossWeights<f64>,
    optimizers: Optimizers,
    sampler: BalancedSampler,
    miner: Miner,
    rng: ChaCha8Rng,
    batches_done: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a FeatureDataset) -> Result<Self> {
        config.validate()?;
        let arch = Architecture {
            input_dim: data.dim(),
            feature_hidden: config.feature_hidden,
            embedding_dim: config.embedding_dim,
            gen_hidden: (config.gen_hidden1, config.gen_hidden2),
            classes: data.class_count(),
        };
        let bundle = ModelBundle::init(arch, config.seed)?;
        Self::with_bundle(config, data, bundle)
    }

    /// Resumes from an existing bundle with fresh optimizer state.
    pub fn with_bundle(config: TrainConfig, data: &'a FeatureDataset, bundle: ModelBundle<f64>) -> Result<Self> {
        config.validate()?;
        if data.class_count() < 2 {
            return Err(Error::contract("training data needs at least 2 classes"));
        }
        if bundle.feature.input_dim() != data.dim() || bundle.classes() != data.class_count() {
            return Err(Error::Mismatch(format!(
                "model takes {} features and {} classes, data has {} and {}",
                bundle.feature.input_dim(),
                bundle.classes(),
                data.dim(),
                data.class_count()
            )));
        }
        let sampler = BalancedSampler::new(data, config.classes_per_batch, config.samples_per_class)?;
        let c = &config;
        let phi = if c.variant == Variant::Baseline { 0.0 } else { c.phi };
        let mut weights = LossWeights::new(c.beta, phi, c.eta, c.mu, c.nu, c.tau)?;
        if c.variant == Variant::Baseline {
            weights.w_o = 1.0;
            weights.w_h = 0.0;
        }
        let adam = |lr| AdamState::new(AdamConfig::new(lr, c.weight_decay));
        let optimizers = Optimizers {
            feature: adam(c.lr_f),
            classifier: adam(c.lr_classifier),
            gen1: adam(c.lr_gen),
            gen2: adam(c.lr_gen),
            disc1: adam(c.lr_disc),
            disc2: adam(c.lr_disc),
        };
        let miner = Miner { kind: c.miner, margin: c.tau, weighting: c.distance_weighting() };
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(7);
        Ok(Self { config, data, bundle, plm: None, weights, optimizers, sampler, miner, rng, batches_done: 0 })
    }

    pub fn bundle(&self) -> &ModelBundle<f64> {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle<f64> {
        self.bundle
    }

    pub fn weights(&self) -> &LossWeights<f64> {
        &self.weights
    }

    pub fn plm(&self) -> Option<&PlmState<f64>> {
        self.plm.as_ref()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.sampler.batch_size())
    }

    /// Draws a balanced batch of inputs and labels.
    pub fn sample_batch(&mut self) -> Result<(Tensor<f64>, Vec<usize>)> {
        let idx = self.sampler.sample(&mut self.rng);
        self.data.select(&idx)
    }

    /// Sets the first threshold to the mean anchor-positive distance of the
    /// first batch seen, in pretraining if there is any.
    fn bootstrap_plm(&mut self, ap_distances: &[f64]) -> Result<()> {
        let mean = ap_distances.iter().sum::<f64>() / ap_distances.len() as f64;
        let start = if mean > 0.0 && mean.is_finite() { mean } else { 1.0 };
        self.plm = Some(PlmState::new(self.config.alpha, self.config.gamma, start)?);
        Ok(())
    }

    /// One update of `F` and `C_F` on the plain triplet and category losses.
    pub fn pretrain_batch(&mut self, inputs: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
        let emb = embed(&self.bundle.feature, inputs, labels)?;
        let triplets = Miner { kind: MinerKind::Random, ..self.miner }.mine(&emb, &mut self.rng)?;
        if self.plm.is_none() {
            let d: Vec<f64> = triplets
                .triples
                .iter()
                .map(|&(a, p, _)| euclidean(emb.embeddings.row(a), emb.embeddings.row(p)))
                .collect();
            self.bootstrap_plm(&d)?;
        }
        let mut weights = self.weights.clone();
        weights.w_o = 1.0;
        weights.w_h = 0.0;
        let plm = PlmParams { alpha: self.config.alpha, gamma: self.config.gamma, threshold: 1.0 };
        let mut tape = Tape::new();
        let bound = BoundBundle::bind(&self.bundle, &mut tape);
        let x = tape.constant(inputs.clone());
        let g = record_feature_objective(
            &mut tape,
            &self.bundle,
            &bound,
            x,
            labels,
            &triplets,
            None,
            plm,
            &weights,
            Variant::Baseline,
        )?;
        let loss = check_finite("L_pretrain", tape.scalar_value(g.total)?, self.batches_done)?;
        let grads = tape.backward(g.total)?;
        let clip = self.config.grad_clip;
        let gf = self.bundle.feature.grads(&bound.feature, &grads);
        apply_update(&mut self.bundle.feature, &mut self.optimizers.feature, gf, clip)?;
        if g.class.is_some() {
            let gc = self.bundle.classifier.grads(&bound.classifier, &grads);
            apply_update(&mut self.bundle.classifier, &mut self.optimizers.classifier, gc, clip)?;
        }
        Ok(loss)
    }

    /// Runs `pretrain_epochs` epochs of [`Trainer::pretrain_batch`].
    pub fn pretrain(&mut self) -> Result<Vec<f64>> {
        let total = self.config.pretrain_epochs * self.batches_per_epoch();
        let mut losses = Vec::with_capacity(total);
        for _ in 0..total {
            let (x, y) = self.sample_batch()?;
            losses.push(self.pretrain_batch(&x, &y)?);
        }
        Ok(losses)
    }

    /// One pass of the generation pipeline and the embedding update.
    pub fn train_batch(&mut self, inputs: &Tensor<f64>, labels: &[usize]) -> Result<BatchRecord> {
        let batch = self.batches_done;
        let clip = self.config.grad_clip;
        let variant = self.config.variant;

        let emb = embed(&self.bundle.feature, inputs, labels)?;
        let triplets = Miner { kind: MinerKind::Random, ..self.miner }.mine(&emb, &mut self.rng)?;
        let mined = match self.miner.kind {
            MinerKind::Random => None,
            _ => Some(self.miner.mine(&emb, &mut self.rng)?),
        };
        let x = &emb.embeddings;
        let a = x.select_rows(&triplets.anchors())?;
        let p = x.select_rows(&triplets.positives())?;
        let n = x.select_rows(&triplets.negatives())?;
        let al: Vec<usize> = triplets.anchors().iter().map(|&i| labels[i]).collect();
        let nl: Vec<usize> = triplets.negatives().iter().map(|&i| labels[i]).collect();
        let ap_distances: Vec<f64> = (0..a.rows()).map(|r| euclidean(a.row(r), p.row(r))).collect();

        if self.plm.is_none() {
            self.bootstrap_plm(&ap_distances)?;
        }
        let plm = self.plm.as_mut().expect("threshold initialized");
        plm.observe(&ap_distances);
        let d_t = plm.threshold();
        let plm_params = PlmParams { alpha: plm.alpha, gamma: plm.gamma, threshold: d_t };

        let mut record = BatchRecord {
            batch,
            l_f: 0.0,
            l_g1: 0.0,
            l_dg1: 0.0,
            l_g2: 0.0,
            l_dg2: 0.0,
            w_o: 0.0,
            w_h: 0.0,
            tau_r: 0.0,
            d_t,
            ap_distances: ap_distances.clone(),
        };

        if variant != Variant::Baseline {
            let (a_star, p_star) = stretch_rows(&a, &p, self.plm.as_ref().expect("initialized above"))?;

            // Stage 1: both updates from one forward state.
            let mut tape = Tape::new();
            let bound = BoundBundle::bind(&self.bundle, &mut tape);
            let [av, pv, asv, psv] = [&a, &p, &a_star, &p_star].map(|t| tape.constant(t.clone()));
            let g1 = record_stage1(&mut tape, &self.bundle, &bound, av, pv, asv, psv, &al, &self.weights)?;
            record.l_g1 = check_finite("L_G1", tape.scalar_value(g1.loss_g1)?, batch)?;
            record.l_dg1 = check_finite("L_DG1", tape.scalar_value(g1.loss_d1)?, batch)?;
            let gg = self.bundle.gen1.grads(&bound.gen1, &tape.backward(g1.loss_g1)?);
            let gd = self.bundle.disc1.grads(&bound.disc1, &tape.backward(g1.loss_d1)?);
            apply_update(&mut self.bundle.gen1, &mut self.optimizers.gen1, gg, clip)?;
            apply_update(&mut self.bundle.disc1, &mut self.optimizers.disc1, gd, clip)?;

            let a_prime = self.bundle.gen1.infer(&a_star)?;
            let p_prime = self.bundle.gen1.infer(&p_star)?;

            if variant == Variant::Full {
                let tau_r = self.weights.tau_r();
                record.tau_r = tau_r;
                let mut tape = Tape::new();
                let bound = BoundBundle::bind(&self.bundle, &mut tape);
                let [apv, ppv, nv] = [&a_prime, &p_prime, &n].map(|t| tape.constant(t.clone()));
                let g2 = record_stage2(&mut tape, &self.bundle, &bound, apv, ppv, nv, &al, &nl, &self.weights, tau_r)?;
                record.l_g2 = check_finite("L_G2", tape.scalar_value(g2.loss_g2)?, batch)?;
                record.l_dg2 = check_finite("L_DG2", tape.scalar_value(g2.loss_d2)?, batch)?;
                let gg = self.bundle.gen2.grads(&bound.gen2, &tape.backward(g2.loss_g2)?);
                let gd = self.bundle.disc2.grads(&bound.disc2, &tape.backward(g2.loss_d2)?);
                apply_update(&mut self.bundle.gen2, &mut self.optimizers.gen2, gg, clip)?;
                apply_update(&mut self.bundle.disc2, &mut self.optimizers.disc2, gd, clip)?;
                self.weights.update_running(record.l_g2, self.config.ema_decay);
            } else {
                self.weights.update_running(record.l_g1, self.config.ema_decay);
            }
        }
        record.w_o = self.weights.w_o;
        record.w_h = self.weights.w_h;

        // Embedding update. X' and X̂ are recomputed on the tape with the
        // updated generators.
        let mut tape = Tape::new();
        let bound = BoundBundle::bind(&self.bundle, &mut tape);
        let xv = tape.constant(inputs.clone());
        let g = record_feature_objective(
            &mut tape,
            &self.bundle,
            &bound,
            xv,
            labels,
            &triplets,
            mined.as_ref(),
            plm_params,
            &self.weights,
            variant,
        )?;
        record.l_f = check_finite("L_F", tape.scalar_value(g.total)?, batch)?;
        let grads = tape.backward(g.total)?;
        let gf = self.bundle.feature.grads(&bound.feature, &grads);
        apply_update(&mut self.bundle.feature, &mut self.optimizers.feature, gf, clip)?;
        if g.class.is_some() {
            let gc = self.bundle.classifier.grads(&bound.classifier, &grads);
            apply_update(&mut self.bundle.classifier, &mut self.optimizers.classifier, gc, clip)?;
        }

        self.batches_done += 1;
        Ok(record)
    }

    /// Runs one epoch of batches and moves the distance threshold to the
    /// epoch's mean anchor-positive distance.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochLog> {
        let mut log = EpochLog { epoch, records: Vec::with_capacity(self.batches_per_epoch()) };
        for _ in 0..self.batches_per_epoch() {
            let (x, y) = self.sample_batch()?;
            log.records.push(self.train_batch(&x, &y)?);
        }
        if let Some(plm) = &mut self.plm {
            plm.update_threshold();
        }
        Ok(log)
    }
}

/// Embeddings of a whole dataset.
pub fn embed_dataset(bundle: &ModelBundle<f64>, data: &FeatureDataset) -> Result<EmbeddingBatch<f64>> {
    if bundle.feature.input_dim() != data.dim() {
        return Err(Error::Mismatch(format!(
            "model takes {} features, data has {}",
            bundle.feature.input_dim(),
            data.dim()
        )));
    }
    embed(&bundle.feature, data.features(), data.labels())
}

/// Recall cut-offs from [`DEFAULT_KS`] that fit a gallery of `n − 1`.
pub fn usable_ks(n: usize) -> Vec<usize> {
    DEFAULT_KS.iter().copied().filter(|&k| k + 1 < n).collect()
}

pub fn evaluate_bundle(
    bundle: &ModelBundle<f64>,
    data: &FeatureDataset,
    ks: &[usize],
    seed: u64,
) -> Result<MetricsReport> {
    evaluate(&embed_dataset(bundle, data)?, ks, seed)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle<f64>,
    pub pretrain_losses: Vec<f64>,
    pub logs: Vec<EpochLog>,
    /// `(epoch, report)` on the evaluation data.
    pub reports: Vec<(usize, MetricsReport)>,
}

fn write_epoch(dir: &Path, epoch: usize, bundle: &ModelBundle<f64>, log: &EpochLog) -> Result<()> {
    let d = dir.join(format!("epoch_{epoch}"));
    fs::create_dir_all(&d)?;
    checkpoint::save(bundle, &d.join("model.thsg"))?;
    fs::write(d.join("log.csv"), log.to_csv())?;
    Ok(())
}

/// Pretrains, then trains for `config.epochs` epochs. With `out_dir`, the
/// pretrained bundle is written as `epoch_0` and each epoch as `epoch_<N>`.
/// With `eval_data`, a report is produced every `eval_every` epochs and
/// after the last one.
pub fn train(
    data: &FeatureDataset,
    eval_data: Option<&FeatureDataset>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    if let Some(eval) = eval_data {
        if eval.dim() != data.dim() {
            return Err(Error::Mismatch(format!(
                "eval data has {} features, training data {}",
                eval.dim(),
                data.dim()
            )));
        }
    }
    let pretrain_losses = trainer.pretrain()?;
    if let Some(dir) = out_dir {
        write_epoch(dir, 0, trainer.bundle(), &EpochLog::default())?;
    }
    let mut logs = Vec::with_capacity(config.epochs);
    let mut reports = Vec::new();
    let report = |bundle: &ModelBundle<f64>, eval: &FeatureDataset| {
        evaluate_bundle(bundle, eval, &usable_ks(eval.len()), config.seed)
    };
    for epoch in 1..=config.epochs {
        let log = trainer.train_epoch(epoch)?;
        if let Some(dir) = out_dir {
            write_epoch(dir, epoch, trainer.bundle(), &log)?;
        }
        logs.push(log);
        if let Some(eval) = eval_data {
            if config.eval_every > 0 && epoch % config.eval_every == 0 && epoch != config.epochs {
                reports.push((epoch, report(trainer.bundle(), eval)?));
            }
        }
    }
    if let Some(eval) = eval_data {
        reports.push((config.epochs, report(trainer.bundle(), eval)?));
    }
    Ok(TrainOutcome { bundle: trainer.into_bundle(), pretrain_losses, logs, reports })
}
