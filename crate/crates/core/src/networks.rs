//! Fully connected networks and the six-network bundle used in training:
//! feature extractor, two generators, two discriminators, and the shared
//! classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    /// `fan_in x fan_out`
    pub weight: Tensor<S>,
    /// `1 x fan_out`
    pub bias: Tensor<S>,
    pub activation: Activation,
}

/// Stack of affine layers. Hidden layers use ReLU, the last layer is linear,
/// and the output rows are optionally L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    layers: Vec<Layer<S>>,
    output_normalize: bool,
}

/// Parameter handles of an [`Mlp`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    params: Vec<(Var, Var)>,
}

impl<S: Scalar> Mlp<S> {
    /// He-initialized network with layer widths `dims[0] → … → dims[last]`.
    pub fn new(dims: &[usize], output_normalize: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| S::of(normal.sample(rng))).collect();
                Layer {
                    weight: Tensor::new(fan_in, fan_out, data).expect("weight shape"),
                    bias: Tensor::zeros(1, fan_out),
                    activation: if i == last { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        Ok(Self { layers, output_normalize })
    }

    /// Builds a network from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Layer<S>>, output_normalize: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network without layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::dim(
                    "Mlp::from_layers",
                    format!("layer {i}: bias {:?} for weight {:?}", l.bias.shape(), l.weight.shape()),
                ));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].weight.cols() != w[1].weight.rows() {
                return Err(Error::dim(
                    "Mlp::from_layers",
                    format!(
                        "layer {i} outputs {} but layer {} takes {}",
                        w[0].weight.cols(),
                        i + 1,
                        w[1].weight.rows()
                    ),
                ));
            }
        }
        Ok(Self { layers, output_normalize })
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn output_normalize(&self) -> bool {
        self.output_normalize
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in `[W0, b0, W1, b1, …]` order.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Forward pass without recording.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(
                "Mlp::infer",
                format!("input width {} for network taking {}", x.cols(), self.input_dim()),
            ));
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = h.affine(&l.weight, &l.bias)?;
            if l.activation == Activation::Relu {
                h = h.relu();
            }
        }
        if self.output_normalize {
            h = h.l2_normalize_rows().0;
        }
        Ok(h)
    }

    /// Records the parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundMlp {
        let params = self.layers.iter().map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))).collect();
        BoundMlp { params }
    }

    /// Recorded forward pass using parameters bound with [`Mlp::bind`].
    pub fn forward(&self, bound: &BoundMlp, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::dim(
                "Mlp::forward",
                format!("input width {} for network taking {}", tape.value(x).cols(), self.input_dim()),
            ));
        }
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().zip(&bound.params) {
            h = tape.affine(h, w, b)?;
            if l.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        if self.output_normalize {
            h = tape.l2_normalize(h);
        }
        Ok(h)
    }

    /// Gradients of the bound parameters, in [`Mlp::params`] order.
    pub fn grads(&self, bound: &BoundMlp, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.layers
            .iter()
            .zip(&bound.params)
            .flat_map(|(l, &(w, b))| [grads.get_or_zeros(w, l.weight.shape()), grads.get_or_zeros(b, l.bias.shape())])
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> Mlp<T> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer { weight: l.weight.cast(), bias: l.bias.cast(), activation: l.activation })
                .collect(),
            output_normalize: self.output_normalize,
        }
    }
}

/// Unit-norm embeddings with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<S> {
    pub embeddings: Tensor<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> EmbeddingBatch<S> {
    pub fn new(embeddings: Tensor<S>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::dim(
                "EmbeddingBatch::new",
                format!("{} rows vs {} labels", embeddings.rows(), labels.len()),
            ));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Maps raw inputs to embeddings with the feature extractor.
pub fn embed<S: Scalar>(feature: &Mlp<S>, inputs: &Tensor<S>, labels: &[usize]) -> Result<EmbeddingBatch<S>> {
    EmbeddingBatch::new(feature.infer(inputs)?, labels.to_vec())
}

/// Stage-1 discriminator logits on the row-wise concatenation `[x, x*]`.
pub fn discriminate_pair<S: Scalar>(disc: &Mlp<S>, x: &Tensor<S>, x_star: &Tensor<S>) -> Result<Tensor<S>> {
    if x.shape() != x_star.shape() {
        return Err(Error::dim("discriminate_pair", format!("{:?} vs {:?}", x.shape(), x_star.shape())));
    }
    disc.infer(&x.concat_cols(x_star)?)
}

/// Layer widths for a [`ModelBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub feature_hidden: usize,
    pub embedding_dim: usize,
    /// Generator hidden widths; discriminators reuse the first.
    pub gen_hidden: (usize, usize),
    pub classes: usize,
}

/// Names used for the networks in checkpoints and diagnostics.
pub const NETWORK_NAMES: [&str; 6] = ["F", "G1", "G2", "D_G1", "D_G2", "C_F"];

/// Index of the "generated" class in the stage-2 discriminator; real class
/// `c` maps to output `c + 1`.
pub const FAKE_CLASS: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<S> {
    /// Feature extractor, normalized output.
    pub feature: Mlp<S>,
    /// Stage-1 generator `d → h1 → h2 → d`, normalized output.
    pub gen1: Mlp<S>,
    /// Stage-2 generator, applied per embedding, normalized output.
    pub gen2: Mlp<S>,
    /// Conditional discriminator `2d → h1 → 2`; output 1 is "real".
    pub disc1: Mlp<S>,
    /// `d → h1 → C+1`, output [`FAKE_CLASS`] is "generated".
    pub disc2: Mlp<S>,
    /// Shared classifier `d → C`.
    pub classifier: Mlp<S>,
}

impl<S: Scalar> ModelBundle<S> {
    /// Deterministic initialization; each network draws from its own stream.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let Architecture { input_dim, feature_hidden, embedding_dim: d, gen_hidden: (h1, h2), classes } = arch;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let stream = |k: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k));
        Ok(Self {
            feature: Mlp::new(&[input_dim, feature_hidden, d], true, &mut stream(0))?,
            gen1: Mlp::new(&[d, h1, h2, d], true, &mut stream(1))?,
            gen2: Mlp::new(&[d, h1, h2, d], true, &mut stream(2))?,
            disc1: Mlp::new(&[2 * d, h1, 2], false, &mut stream(3))?,
            disc2: Mlp::new(&[d, h1, classes + 1], false, &mut stream(4))?,
            classifier: Mlp::new(&[d, classes], false, &mut stream(5))?,
        })
    }

    /// Assembles a bundle from loaded networks, checking the shape contract.
    pub fn from_networks(nets: [Mlp<S>; 6]) -> Result<Self> {
        let [feature, gen1, gen2, disc1, disc2, classifier] = nets;
        let bundle = Self { feature, gen1, gen2, disc1, disc2, classifier };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embedding_dim();
        let c = self.classes();
        let checks = [
            ("G1", self.gen1.input_dim() == d && self.gen1.output_dim() == d),
            ("G2", self.gen2.input_dim() == d && self.gen2.output_dim() == d),
            ("D_G1", self.disc1.input_dim() == 2 * d && self.disc1.output_dim() == 2),
            ("D_G2", self.disc2.input_dim() == d && self.disc2.output_dim() == c + 1),
            ("C_F", self.classifier.input_dim() == d && c >= 2),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::contract(format!("network {name} violates the bundle shape contract")));
            }
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.feature.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn networks(&self) -> [&Mlp<S>; 6] {
        [&self.feature, &self.gen1, &self.gen2, &self.disc1, &self.disc2, &self.classifier]
    }

    pub fn cast<T: Scalar>(&self) -> ModelBundle<T> {
        ModelBundle {
            feature: self.feature.cast(),
            gen1: self.gen1.cast(),
            gen2: self.gen2.cast(),
            disc1: self.disc1.cast(),
            disc2: self.disc2.cast(),
            classifier: self.classifier.cast(),
        }
    }
}
