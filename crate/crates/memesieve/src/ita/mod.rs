//! Trainable image-text alignment stack.
//!
//! An image projection maps frozen image sequence embeddings into the text
//! embedding space; the fused sequence runs through `L` self-attention
//! blocks whose head-averaged attention maps can be captured; the final
//! sequence is split and pooled per side, combined with the frozen pooled
//! embeddings through a residual connection, and reduced by a two-layer
//! decoder. An optional logistic head sits on top for classification.
//!
//! Everything is f64 with hand-written forward and backward passes; the
//! analytic gradients are verified against central finite differences in
//! the test suites.

mod backward;
mod checkpoint;
mod forward;

pub use backward::{backward, ItaGrads};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointKind, CHECKPOINT_EXTENSION};
pub use forward::{AttentionStack, ForwardCache};

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backends::{EmbeddingBundle, EncoderShapes};
use crate::error::{Error, Result};
use crate::seeding::Seeder;

/// Architecture hyperparameters. `embed_dim`/`image_dim` come from the
/// encoder backend; the rest are free choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItaConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub image_dim: usize,
    pub key_dim: usize,
    pub num_heads: usize,
    pub decoder_hidden: usize,
    pub output_dim: usize,
    pub dropout: f64,
}

impl ItaConfig {
    /// Defaults for a given encoder: 6 layers, 8 heads, key/decoder/output
    /// dims equal to the embedding dim, no dropout.
    pub fn for_shapes(shapes: &EncoderShapes) -> Self {
        ItaConfig {
            num_layers: 6,
            embed_dim: shapes.embed_dim,
            image_dim: shapes.image_dim,
            key_dim: shapes.embed_dim,
            num_heads: 8,
            decoder_hidden: shapes.embed_dim,
            output_dim: shapes.embed_dim,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("image_dim", self.image_dim),
            ("key_dim", self.key_dim),
            ("num_heads", self.num_heads),
            ("decoder_hidden", self.decoder_hidden),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.key_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "key_dim {} not divisible by num_heads {}",
                self.key_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// `[train.model]` config keys; dims are filled from the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ItaSection {
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dim: Option<usize>,
    pub dropout: f64,
}

impl Default for ItaSection {
    fn default() -> Self {
        ItaSection {
            num_layers: 6,
            num_heads: 8,
            key_dim: None,
            decoder_hidden: None,
            output_dim: None,
            dropout: 0.0,
        }
    }
}

impl ItaSection {
    pub fn to_config(&self, shapes: &EncoderShapes) -> ItaConfig {
        ItaConfig {
            num_layers: self.num_layers,
            embed_dim: shapes.embed_dim,
            image_dim: shapes.image_dim,
            key_dim: self.key_dim.unwrap_or(shapes.embed_dim),
            num_heads: self.num_heads,
            decoder_hidden: self.decoder_hidden.unwrap_or(shapes.embed_dim),
            output_dim: self.output_dim.unwrap_or(shapes.embed_dim),
            dropout: self.dropout,
        }
    }
}

/// One self-attention block: multi-head attention with an output
/// projection, then a position-wise feed-forward, post-norm style with
/// residual connections around both.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Logistic classification head over the joint representation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Array1<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItaParameters {
    pub image_projection: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub decoder: DecoderParams,
    pub head: Option<HeadParams>,
}

/// Which parameters a training phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Projection + blocks + decoder + head (if attached).
    Full,
    /// Everything except the head (contrastive pre-training).
    StackOnly,
    /// Only the head.
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItaModel {
    pub config: ItaConfig,
    pub params: ItaParameters,
}

fn xavier(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> impl FnMut() -> f64 + '_ {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    move || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    }
}

fn init_matrix(seeder: &Seeder, name: &str, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = seeder.rng(&format!("ita-init/{name}"));
    let mut draw = xavier(&mut rng, rows, cols);
    Array2::from_shape_fn((rows, cols), |_| draw())
}

impl ItaModel {
    /// Fresh model without a classification head. Weights are zero-mean
    /// normal with variance 2/(fan_in+fan_out); biases zero; norm gains 1.
    pub fn new(config: ItaConfig, seeder: &Seeder) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let dk = config.key_dim;
        let image_projection = init_matrix(seeder, "image_projection", config.image_dim, d);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            layers.push(LayerParams {
                w_q: init_matrix(seeder, &format!("layer{l}/w_q"), d, dk),
                w_k: init_matrix(seeder, &format!("layer{l}/w_k"), d, dk),
                w_v: init_matrix(seeder, &format!("layer{l}/w_v"), d, d),
                w_o: init_matrix(seeder, &format!("layer{l}/w_o"), d, d),
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                ffn_w1: init_matrix(seeder, &format!("layer{l}/ffn_w1"), d, d),
                ffn_b1: Array1::zeros(d),
                ffn_w2: init_matrix(seeder, &format!("layer{l}/ffn_w2"), d, d),
                ffn_b2: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
            });
        }
        let decoder = DecoderParams {
            w1: init_matrix(seeder, "decoder/w1", 2 * d, config.decoder_hidden),
            b1: Array1::zeros(config.decoder_hidden),
            w2: init_matrix(seeder, "decoder/w2", config.decoder_hidden, config.output_dim),
            b2: Array1::zeros(config.output_dim),
        };
        Ok(ItaModel {
            config,
            params: ItaParameters {
                image_projection,
                layers,
                decoder,
                head: None,
            },
        })
    }

    pub fn has_head(&self) -> bool {
        self.params.head.is_some()
    }

    /// Attaches a freshly initialized logistic head; no-op when present.
    pub fn attach_head(&mut self, seeder: &Seeder) {
        if self.params.head.is_none() {
            let w = init_matrix(seeder, "head/w", self.config.output_dim, 1)
                .column(0)
                .to_owned();
            self.params.head = Some(HeadParams { w, b: 0.0 });
        }
    }

    /// Exact count of trainable scalars in the scope; the frozen encoder
    /// never counts.
    pub fn parameter_count(&self, scope: TrainScope) -> usize {
        let d = self.config.embed_dim;
        let dk = self.config.key_dim;
        let per_layer = 2 * d * dk   // w_q, w_k
            + 2 * d * d              // w_v, w_o
            + 4 * d                  // both layer norms
            + 2 * d * d + 2 * d; // feed-forward
        let stack = self.config.image_dim * d
            + self.config.num_layers * per_layer
            + 2 * d * self.config.decoder_hidden
            + self.config.decoder_hidden
            + self.config.decoder_hidden * self.config.output_dim
            + self.config.output_dim;
        let head = if self.params.head.is_some() {
            self.config.output_dim + 1
        } else {
            0
        };
        match scope {
            TrainScope::Full => stack + head,
            TrainScope::StackOnly => stack,
            TrainScope::HeadOnly => head,
        }
    }

    /// P(y=1 | H) through the logistic head.
    pub fn classify(&self, bundle: &EmbeddingBundle) -> Result<f64> {
        let (h, _) = self.forward(bundle, false)?;
        self.head_probability(&h)
    }

    pub fn head_probability(&self, joint: &Array1<f64>) -> Result<f64> {
        let z = self.head_logit(joint)?;
        Ok(sigmoid(z))
    }

    pub fn head_logit(&self, joint: &Array1<f64>) -> Result<f64> {
        let head = self.params.head.as_ref().ok_or(Error::MissingHead)?;
        if head.w.len() != joint.len() {
            return Err(Error::ShapeMismatch(format!(
                "head expects dim {}, joint representation has {}",
                head.w.len(),
                joint.len()
            )));
        }
        Ok(head.w.dot(joint) + head.b)
    }

    /// Canonical flattening over the scope; order is fixed by the struct
    /// layout and used by the optimizer and the finite-difference checks.
    pub fn flatten(&self, scope: TrainScope) -> Vec<f64> {
        self.params.flatten(scope)
    }

    pub fn assign_from_flat(&mut self, scope: TrainScope, flat: &[f64]) {
        self.params.assign_from_flat(scope, flat);
    }
}

impl ItaParameters {
    /// Same shapes, all zeros; gradients use this container.
    pub fn zeros_like(&self) -> ItaParameters {
        ItaParameters {
            image_projection: Array2::zeros(self.image_projection.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_q: Array2::zeros(l.w_q.raw_dim()),
                    w_k: Array2::zeros(l.w_k.raw_dim()),
                    w_v: Array2::zeros(l.w_v.raw_dim()),
                    w_o: Array2::zeros(l.w_o.raw_dim()),
                    ln1_gain: Array1::zeros(l.ln1_gain.len()),
                    ln1_bias: Array1::zeros(l.ln1_bias.len()),
                    ffn_w1: Array2::zeros(l.ffn_w1.raw_dim()),
                    ffn_b1: Array1::zeros(l.ffn_b1.len()),
                    ffn_w2: Array2::zeros(l.ffn_w2.raw_dim()),
                    ffn_b2: Array1::zeros(l.ffn_b2.len()),
                    ln2_gain: Array1::zeros(l.ln2_gain.len()),
                    ln2_bias: Array1::zeros(l.ln2_bias.len()),
                })
                .collect(),
            decoder: DecoderParams {
                w1: Array2::zeros(self.decoder.w1.raw_dim()),
                b1: Array1::zeros(self.decoder.b1.len()),
                w2: Array2::zeros(self.decoder.w2.raw_dim()),
                b2: Array1::zeros(self.decoder.b2.len()),
            },
            head: self.head.as_ref().map(|h| HeadParams {
                w: Array1::zeros(h.w.len()),
                b: 0.0,
            }),
        }
    }

    /// `self += alpha * other` over the scope.
    pub fn scaled_add(&mut self, scope: TrainScope, alpha: f64, other: &ItaParameters) {
        let flat = other.flatten(scope);
        let mut it = flat.into_iter();
        self.for_each_mut(scope, |v| *v += alpha * it.next().expect("scope shapes match"));
    }

    /// Canonical flattening; iterates every tensor in declaration order,
    /// row-major, regardless of memory layout.
    pub fn flatten(&self, scope: TrainScope) -> Vec<f64> {
        let mut out = Vec::new();
        if scope != TrainScope::HeadOnly {
            out.extend(self.image_projection.iter());
            for layer in &self.layers {
                out.extend(layer.w_q.iter());
                out.extend(layer.w_k.iter());
                out.extend(layer.w_v.iter());
                out.extend(layer.w_o.iter());
                out.extend(layer.ln1_gain.iter());
                out.extend(layer.ln1_bias.iter());
                out.extend(layer.ffn_w1.iter());
                out.extend(layer.ffn_b1.iter());
                out.extend(layer.ffn_w2.iter());
                out.extend(layer.ffn_b2.iter());
                out.extend(layer.ln2_gain.iter());
                out.extend(layer.ln2_bias.iter());
            }
            out.extend(self.decoder.w1.iter());
            out.extend(self.decoder.b1.iter());
            out.extend(self.decoder.w2.iter());
            out.extend(self.decoder.b2.iter());
        }
        if scope != TrainScope::StackOnly {
            if let Some(head) = &self.head {
                out.extend(head.w.iter());
                out.push(head.b);
            }
        }
        out
    }

    pub fn assign_from_flat(&mut self, scope: TrainScope, flat: &[f64]) {
        let mut it = flat.iter().copied();
        self.for_each_mut(scope, |v| *v = it.next().expect("flat parameter length mismatch"));
        assert!(it.next().is_none(), "flat parameter length mismatch");
    }

    fn for_each_mut(&mut self, scope: TrainScope, mut f: impl FnMut(&mut f64)) {
        if scope != TrainScope::HeadOnly {
            self.image_projection.iter_mut().for_each(&mut f);
            for layer in &mut self.layers {
                layer.w_q.iter_mut().for_each(&mut f);
                layer.w_k.iter_mut().for_each(&mut f);
                layer.w_v.iter_mut().for_each(&mut f);
                layer.w_o.iter_mut().for_each(&mut f);
                layer.ln1_gain.iter_mut().for_each(&mut f);
                layer.ln1_bias.iter_mut().for_each(&mut f);
                layer.ffn_w1.iter_mut().for_each(&mut f);
                layer.ffn_b1.iter_mut().for_each(&mut f);
                layer.ffn_w2.iter_mut().for_each(&mut f);
                layer.ffn_b2.iter_mut().for_each(&mut f);
                layer.ln2_gain.iter_mut().for_each(&mut f);
                layer.ln2_bias.iter_mut().for_each(&mut f);
            }
            self.decoder.w1.iter_mut().for_each(&mut f);
            self.decoder.b1.iter_mut().for_each(&mut f);
            self.decoder.w2.iter_mut().for_each(&mut f);
            self.decoder.b2.iter_mut().for_each(&mut f);
        }
        if scope != TrainScope::StackOnly {
            if let Some(head) = &mut self.head {
                head.w.iter_mut().for_each(&mut f);
                f(&mut head.b);
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// tanh-approximation GELU; smooth, so finite-difference gradient checks
/// stay well-conditioned.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::backends::EmbeddingBundle;
    use ndarray::{Array1, Array2};
    use rand_chacha::rand_core::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    pub fn tiny_config() -> ItaConfig {
        ItaConfig {
            num_layers: 2,
            embed_dim: 8,
            image_dim: 6,
            key_dim: 8,
            num_heads: 1,
            decoder_hidden: 8,
            output_dim: 8,
            dropout: 0.0,
        }
    }

    pub fn random_bundle(cfg: &ItaConfig, o: usize, l: usize, seed: u64) -> EmbeddingBundle {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Array1<f64> {
            Array1::from_iter((0..n).map(|_| StandardNormal.sample(&mut rng)))
        };
        EmbeddingBundle {
            image_pooled: draw(cfg.embed_dim),
            text_pooled: draw(cfg.embed_dim),
            image_seq: Array2::from_shape_vec(
                (o, cfg.image_dim),
                draw(o * cfg.image_dim).to_vec(),
            )
            .unwrap(),
            text_seq: Array2::from_shape_vec((l, cfg.embed_dim), draw(l * cfg.embed_dim).to_vec())
                .unwrap(),
        }
    }
}
