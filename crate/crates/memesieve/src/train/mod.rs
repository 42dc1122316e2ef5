//! Two-phase training: contrastive pre-training on triplets (stack only)
//! and classification fine-tuning (full stack or head-only), with the loss
//! functions, role assignment, Adam, and resumable run state.

mod adam;
mod loops;

pub use adam::Adam;
pub use loops::{
    encode_corpus, finetune_on_items, holdout_split, labeled_items, pretrain_on_items, EpochEval,
    FinetuneOutcome, LabeledItem, LossRow, PretrainOutcome, TripletItem,
};

use ndarray::Array1;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::backends::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::ita::{backward, sigmoid, ItaGrads, ItaModel};

/// `train` config section. The seed is not a config key: every command
/// runs off the single root seed (`seed` at the top of the config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Triplet margin epsilon.
    pub margin: f64,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    /// Epochs per phase.
    pub epochs: usize,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    /// Squared-Euclidean triplet distance (ablation flag); default is the
    /// plain Euclidean distance.
    pub squared_distance: bool,
    /// Fine-tune only the classification head.
    pub head_only: bool,
    /// Fraction of the fine-tuning set held out for per-epoch metrics.
    pub holdout_fraction: f64,
    /// Architecture knobs (`[train.model]`); dims come from the encoder.
    pub model: crate::ita::ItaSection,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 1.0,
            pretrain_lr: 1e-4,
            finetune_lr: 1e-5,
            epochs: 4,
            adam_betas: (0.9, 0.999),
            batch_size: 32,
            squared_distance: false,
            head_only: false,
            holdout_fraction: 0.2,
            model: crate::ita::ItaSection::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "train.margin must be positive, got {}",
                self.margin
            )));
        }
        if self.pretrain_lr < 0.0 || self.finetune_lr < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "adam betas must be in [0,1), got ({b1}, {b2})"
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "train.holdout_fraction must be in [0,1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// Resumable run state: counters, optimizer moments, running loss stats.
/// RNG streams are derived statelessly from (seed, epoch, step), so no
/// generator state needs to be stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub adam_t: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub loss_sum: f64,
    pub loss_count: usize,
}

impl TrainState {
    pub fn fresh(param_count: usize) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            adam_t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            loss_sum: 0.0,
            loss_count: 0,
        }
    }
}

/// Contrastive role assignment: a hateful anchor pulls toward its hateful
/// counterpart (positive) and away from the non-hateful one; the reverse
/// for non-hateful anchors.
pub fn assign_roles<T>(anchor_is_hateful: bool, nonhate: T, hate: T) -> (T, T) {
    if anchor_is_hateful {
        (hate, nonhate)
    } else {
        (nonhate, hate)
    }
}

pub fn euclidean(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Hinge `max(0, d(H,H+) - d(H,H-) + margin)` with unsquared Euclidean d.
pub fn triplet_loss(
    h: &Array1<f64>,
    h_pos: &Array1<f64>,
    h_neg: &Array1<f64>,
    margin: f64,
) -> Result<f64> {
    if h.len() != h_pos.len() || h.len() != h_neg.len() {
        return Err(Error::ShapeMismatch(format!(
            "triplet dims ({}, {}, {}) differ",
            h.len(),
            h_pos.len(),
            h_neg.len()
        )));
    }
    Ok((euclidean(h, h_pos) - euclidean(h, h_neg) + margin).max(0.0))
}

/// Triplet hinge with gradients for all three representations. The
/// squared variant replaces d with d^2.
pub fn triplet_loss_grads(
    h: &Array1<f64>,
    h_pos: &Array1<f64>,
    h_neg: &Array1<f64>,
    margin: f64,
    squared: bool,
) -> Result<(f64, Array1<f64>, Array1<f64>, Array1<f64>)> {
    if h.len() != h_pos.len() || h.len() != h_neg.len() {
        return Err(Error::ShapeMismatch(format!(
            "triplet dims ({}, {}, {}) differ",
            h.len(),
            h_pos.len(),
            h_neg.len()
        )));
    }
    let diff_pos = h - h_pos;
    let diff_neg = h - h_neg;
    let d_pos = diff_pos.dot(&diff_pos).sqrt();
    let d_neg = diff_neg.dot(&diff_neg).sqrt();
    let (loss_arg, g_pos_dir, g_neg_dir) = if squared {
        (
            d_pos * d_pos - d_neg * d_neg + margin,
            &diff_pos * 2.0,
            &diff_neg * 2.0,
        )
    } else {
        // unit direction; zero distance gets the zero subgradient
        let unit = |diff: &Array1<f64>, d: f64| {
            if d > 0.0 {
                diff / d
            } else {
                Array1::zeros(diff.len())
            }
        };
        (
            d_pos - d_neg + margin,
            unit(&diff_pos, d_pos),
            unit(&diff_neg, d_neg),
        )
    };
    if loss_arg <= 0.0 {
        let z = Array1::zeros(h.len());
        return Ok((0.0, z.clone(), z.clone(), z));
    }
    let d_h = &g_pos_dir - &g_neg_dir;
    let d_h_pos = -&g_pos_dir;
    let d_h_neg = g_neg_dir;
    Ok((loss_arg, d_h, d_h_pos, d_h_neg))
}

/// Negative log-likelihood of the true label; probability clamped at
/// 1e-12 from both ends.
pub fn classification_loss(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(1e-12, 1.0 - 1e-12);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// One triplet through the model and back. Returns the hinge value, the
/// accumulated stack gradients, and the two distances for diagnostics.
pub fn triplet_forward_backward(
    model: &ItaModel,
    anchor: &EmbeddingBundle,
    nonhate: &EmbeddingBundle,
    hate: &EmbeddingBundle,
    anchor_is_hateful: bool,
    margin: f64,
    squared: bool,
    dropout_rng: &mut Option<&mut ChaCha12Rng>,
) -> Result<(f64, ItaGrads, f64, f64)> {
    let cache_a = model.forward_cached(anchor, dropout_rng)?;
    let cache_nh = model.forward_cached(nonhate, dropout_rng)?;
    let cache_h = model.forward_cached(hate, dropout_rng)?;
    let (cache_pos, cache_neg) = assign_roles(anchor_is_hateful, &cache_nh, &cache_h);

    let (loss, d_h, d_pos, d_neg) = triplet_loss_grads(
        &cache_a.joint,
        &cache_pos.joint,
        &cache_neg.joint,
        margin,
        squared,
    )?;
    let dist_pos = euclidean(&cache_a.joint, &cache_pos.joint);
    let dist_neg = euclidean(&cache_a.joint, &cache_neg.joint);

    let mut grads = model.params.zeros_like();
    if loss > 0.0 {
        for (cache, upstream) in [(&cache_a, &d_h), (cache_pos, &d_pos), (cache_neg, &d_neg)] {
            let g = backward(model, cache, upstream);
            accumulate(&mut grads, &g);
        }
    }
    Ok((loss, grads, dist_pos, dist_neg))
}

/// One labeled bundle through the model, head, and loss, and back.
/// Returns (loss, gradients incl. head, probability).
pub fn classification_forward_backward(
    model: &ItaModel,
    bundle: &EmbeddingBundle,
    label: u8,
    dropout_rng: &mut Option<&mut ChaCha12Rng>,
) -> Result<(f64, ItaGrads, f64)> {
    let head = model.params.head.as_ref().ok_or(Error::MissingHead)?;
    let cache = model.forward_cached(bundle, dropout_rng)?;
    let z = head.w.dot(&cache.joint) + head.b;
    let p = sigmoid(z);
    let loss = classification_loss(p, label);
    let dz = p - f64::from(label);

    let mut grads = model.params.zeros_like();
    {
        let g_head = grads.head.as_mut().expect("zeros_like keeps the head");
        g_head.w = &cache.joint * dz;
        g_head.b = dz;
    }
    let d_joint = &head.w * dz;
    let g_stack = backward(model, &cache, &d_joint);
    accumulate(&mut grads, &g_stack);
    Ok((loss, grads, p))
}

fn accumulate(into: &mut ItaGrads, from: &ItaGrads) {
    into.image_projection += &from.image_projection;
    for (a, b) in into.layers.iter_mut().zip(from.layers.iter()) {
        a.w_q += &b.w_q;
        a.w_k += &b.w_k;
        a.w_v += &b.w_v;
        a.w_o += &b.w_o;
        a.ln1_gain += &b.ln1_gain;
        a.ln1_bias += &b.ln1_bias;
        a.ffn_w1 += &b.ffn_w1;
        a.ffn_b1 += &b.ffn_b1;
        a.ffn_w2 += &b.ffn_w2;
        a.ffn_b2 += &b.ffn_b2;
        a.ln2_gain += &b.ln2_gain;
        a.ln2_bias += &b.ln2_bias;
    }
    into.decoder.w1 += &from.decoder.w1;
    into.decoder.b1 += &from.decoder.b1;
    into.decoder.w2 += &from.decoder.w2;
    into.decoder.b2 += &from.decoder.b2;
    if let (Some(a), Some(b)) = (into.head.as_mut(), from.head.as_ref()) {
        a.w += &b.w;
        a.b += b.b;
    }
}
