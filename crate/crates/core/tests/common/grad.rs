use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thsg::config::Variant;
use thsg::losses::{
    loss_dg1, loss_dg2, loss_g1, loss_g2, record_stage1, record_stage2, BoundBundle, Stage1Batch, Stage2Batch,
};
use thsg::mining::TripletBatch;
use thsg::networks::Architecture;
use thsg::trainer::{feature_objective, record_feature_objective, PlmParams};
use thsg::{LossWeights, Mlp, ModelBundle, Tape, Tensor};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const CLASSES: usize = 4;
const DIM: usize = 8;

fn arch() -> Architecture {
    Architecture { input_dim: 6, feature_hidden: 12, embedding_dim: DIM, gen_hidden: (16, 12), classes: CLASSES }
}

fn bundle(seed: u64) -> ModelBundle {
    ModelBundle::init(arch(), seed).unwrap()
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Tensor::new(n, d, data).unwrap()
}

fn weights() -> LossWeights {
    let mut w = LossWeights::new(0.5, 0.5, 0.3, 0.3, 0.2, 0.2).unwrap();
    w.set_running(0.8);
    w
}

/// Entries compared and the worst relative error among them.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stats {
    pub entries: usize,
    pub worst: f64,
}

impl Stats {
    fn merge(self, other: Stats) -> Stats {
        Stats { entries: self.entries + other.entries, worst: self.worst.max(other.worst) }
    }
}

/// Compares `analytic` with central differences of `eval` over every
/// parameter of the network picked by `net`.
fn check(
    name: &str,
    base: &ModelBundle,
    net: fn(&mut ModelBundle) -> &mut Mlp,
    analytic: &[Tensor],
    eval: impl Fn(&ModelBundle) -> f64,
) -> Stats {
    let mut probe = base.clone();
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let original = net(&mut probe).params_mut()[t].data()[i];
            let mut at = |delta: f64| {
                net(&mut probe).params_mut()[t].data_mut()[i] = original + delta;
                eval(&probe)
            };
            let numeric = (at(H) - at(-H)) / (2.0 * H);
            net(&mut probe).params_mut()[t].data_mut()[i] = original;
            let a = grad.data()[i];
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-7 {
                assert!((a - numeric).abs() < 1e-8, "{name} param {t}[{i}]: analytic {a} numeric {numeric}");
                continue;
            }
            nonzero += 1;
            let rel = (a - numeric).abs() / scale;
            worst = worst.max(rel);
            assert!(rel <= REL_TOL, "{name} param {t}[{i}]: analytic {a} numeric {numeric} rel {rel}");
        }
    }
    assert!(nonzero > 0, "{name}: every gradient entry vanished");
    Stats { entries: nonzero, worst }
}

fn stage1_batch(rng: &mut ChaCha8Rng) -> Stage1Batch<f64> {
    let n = 6;
    Stage1Batch {
        anchors: unit_rows(n, DIM, rng),
        positives: unit_rows(n, DIM, rng),
        anchors_star: unit_rows(n, DIM, rng).scale(1.3),
        positives_star: unit_rows(n, DIM, rng).scale(1.3),
        labels: (0..n).map(|i| i % CLASSES).collect(),
    }
}

fn stage1_grads(b: &ModelBundle, batch: &Stage1Batch<f64>, w: &LossWeights, disc: bool) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundBundle::bind(b, &mut tape);
    let [a, p, a_star, p_star] = [&batch.anchors, &batch.positives, &batch.anchors_star, &batch.positives_star]
        .map(|t| tape.constant(t.clone()));
    let g = record_stage1(&mut tape, b, &bound, a, p, a_star, p_star, &batch.labels, w).unwrap();
    if disc {
        let grads = tape.backward(g.loss_d1).unwrap();
        b.disc1.grads(&bound.disc1, &grads)
    } else {
        let grads = tape.backward(g.loss_g1).unwrap();
        b.gen1.grads(&bound.gen1, &grads)
    }
}

pub fn stage1_generator() -> Stats {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, batch, w) = (bundle(1), stage1_batch(&mut rng), weights());
    let analytic = stage1_grads(&b, &batch, &w, false);
    check("L_G1", &b, |m| &mut m.gen1, &analytic, |m| loss_g1(&batch, m, &w).unwrap())
}

pub fn stage1_discriminator() -> Stats {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, batch, w) = (bundle(2), stage1_batch(&mut rng), weights());
    let analytic = stage1_grads(&b, &batch, &w, true);
    check("L_DG1", &b, |m| &mut m.disc1, &analytic, |m| loss_dg1(&batch, m).unwrap())
}

fn stage2_batch(rng: &mut ChaCha8Rng) -> Stage2Batch<f64> {
    let n = 6;
    Stage2Batch {
        anchors_prime: unit_rows(n, DIM, rng),
        positives_prime: unit_rows(n, DIM, rng),
        negatives: unit_rows(n, DIM, rng),
        anchor_labels: (0..n).map(|i| i % CLASSES).collect(),
        negative_labels: (0..n).map(|i| (i + 1) % CLASSES).collect(),
    }
}

fn stage2_grads(b: &ModelBundle, batch: &Stage2Batch<f64>, w: &LossWeights, disc: bool) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundBundle::bind(b, &mut tape);
    let [a, p, n] = [&batch.anchors_prime, &batch.positives_prime, &batch.negatives].map(|t| tape.constant(t.clone()));
    let g = record_stage2(&mut tape, b, &bound, a, p, n, &batch.anchor_labels, &batch.negative_labels, w, w.tau_r())
        .unwrap();
    if disc {
        let grads = tape.backward(g.loss_d2).unwrap();
        b.disc2.grads(&bound.disc2, &grads)
    } else {
        let grads = tape.backward(g.loss_g2).unwrap();
        b.gen2.grads(&bound.gen2, &grads)
    }
}

pub fn stage2_generator() -> Stats {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, batch, w) = (bundle(3), stage2_batch(&mut rng), weights());
    let analytic = stage2_grads(&b, &batch, &w, false);
    check("L_G2", &b, |m| &mut m.gen2, &analytic, |m| loss_g2(&batch, m, &w).unwrap())
}

pub fn stage2_discriminator() -> Stats {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, batch, w) = (bundle(4), stage2_batch(&mut rng), weights());
    let analytic = stage2_grads(&b, &batch, &w, true);
    check("L_DG2", &b, |m| &mut m.disc2, &analytic, |m| loss_dg2(&batch, m, CLASSES).unwrap())
}

struct FeatureCase {
    inputs: Tensor,
    labels: Vec<usize>,
    triplets: TripletBatch,
    plm: PlmParams<f64>,
}

fn feature_case(seed: u64) -> FeatureCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let inputs = Tensor::new(n, 6, (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
    let triplets = TripletBatch::new(vec![(0, 4, 1), (1, 5, 6), (2, 6, 3), (3, 7, 0), (4, 0, 5)], &labels).unwrap();
    FeatureCase { inputs, labels, triplets, plm: PlmParams { alpha: 0.2, gamma: 0.8, threshold: 0.9 } }
}

fn feature_grads(b: &ModelBundle, c: &FeatureCase, w: &LossWeights, variant: Variant) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut tape = Tape::new();
    let bound = BoundBundle::bind(b, &mut tape);
    let x = tape.constant(c.inputs.clone());
    let g = record_feature_objective(&mut tape, b, &bound, x, &c.labels, &c.triplets, None, c.plm, w, variant).unwrap();
    let grads = tape.backward(g.total).unwrap();
    (b.feature.grads(&bound.feature, &grads), b.classifier.grads(&bound.classifier, &grads))
}

pub fn embedding_objective(variant: Variant, seed: u64) -> Stats {
    let (b, c) = (bundle(seed), feature_case(seed));
    let mut w = weights();
    // Large margin keeps every hinge active.
    w.tau = 2.5;
    let (feature, classifier) = feature_grads(&b, &c, &w, variant);
    let eval =
        |m: &ModelBundle| feature_objective(m, &c.inputs, &c.labels, &c.triplets, None, c.plm, &w, variant).unwrap();
    let f = check(&format!("L_F {variant} (F)"), &b, |m| &mut m.feature, &feature, eval);
    f.merge(check(&format!("L_F {variant} (C_F)"), &b, |m| &mut m.classifier, &classifier, eval))
}
