//! Forward pass: fuse, attend, pool, decode. Keeps every intermediate
//! needed by the backward pass in a cache.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::backends::EmbeddingBundle;
use crate::error::{Error, Result};

use super::{gelu, ItaModel};

/// Per-layer head-averaged attention matrices, each `(o+l) x (o+l)` and
/// row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<Array2<f64>>,
    pub image_positions: usize,
    pub text_len: usize,
}

impl AttentionStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax matrix per head.
    pub attn: Vec<Array2<f64>>,
    /// Concatenated head outputs, before the output projection.
    pub attn_concat: Array2<f64>,
    /// Scaled dropout mask on the attention branch (entries 0 or 1/(1-p)).
    pub drop1: Option<Array2<f64>>,
    pub ln1: LnCache,
    pub x_mid: Array2<f64>,
    pub ffn_pre: Array2<f64>,
    pub ffn_act: Array2<f64>,
    pub drop2: Option<Array2<f64>>,
    pub ln2: LnCache,
    /// Block output; kept for white-box tests of the split/pool contract.
    #[allow(dead_code)]
    pub x_out: Array2<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) image_seq: Array2<f64>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) image_positions: usize,
    pub(crate) text_len: usize,
    pub(crate) decoder_in: Array1<f64>,
    pub(crate) dec_pre: Array1<f64>,
    pub(crate) dec_act: Array1<f64>,
    pub joint: Array1<f64>,
}

pub(crate) const LN_EPS: f64 = 1e-5;

fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut y = Array2::<f64>::zeros((n, d));
    let mut xhat = Array2::<f64>::zeros((n, d));
    let mut inv_std = Array1::<f64>::zeros(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (x[[r, c]] - mean) * is;
            xhat[[r, c]] = h;
            y[[r, c]] = gain[c] * h + bias[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn dropout_mask(rng: &mut ChaCha12Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let scale = 1.0 / (1.0 - p);
    Array2::from_shape_fn(shape, |_| {
        if rng.random_range(0.0..1.0) < p {
            0.0
        } else {
            scale
        }
    })
}

fn check_finite(x: &Array2<f64>, context: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "non-finite values after {context}"
        )))
    }
}

impl ItaModel {
    /// `[W_I * image_seq ; text_seq]` — image rows first, then text rows.
    pub fn project_and_fuse(&self, bundle: &EmbeddingBundle) -> Result<Array2<f64>> {
        self.check_bundle(bundle)?;
        let projected = bundle.image_seq.dot(&self.params.image_projection);
        Ok(concatenate![Axis(0), projected, bundle.text_seq])
    }

    fn check_bundle(&self, bundle: &EmbeddingBundle) -> Result<()> {
        let d = self.config.embed_dim;
        let (o, di) = bundle.image_seq.dim();
        let (l, dt) = bundle.text_seq.dim();
        if di != self.config.image_dim {
            return Err(Error::ShapeMismatch(format!(
                "image_seq width {di} does not match configured image_dim {}",
                self.config.image_dim
            )));
        }
        if dt != d || bundle.image_pooled.len() != d || bundle.text_pooled.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "embedding dims (text_seq {dt}, pooled {}/{}) do not match embed_dim {d}",
                bundle.image_pooled.len(),
                bundle.text_pooled.len()
            )));
        }
        if o < 2 {
            return Err(Error::ShapeMismatch(
                "image sequence needs class position plus at least one patch".into(),
            ));
        }
        if l == 0 {
            return Err(Error::ShapeMismatch("empty text sequence".into()));
        }
        Ok(())
    }

    /// Inference entry point. `capture` additionally returns the
    /// head-averaged attention stack; it never changes the output.
    pub fn forward(
        &self,
        bundle: &EmbeddingBundle,
        capture: bool,
    ) -> Result<(Array1<f64>, Option<AttentionStack>)> {
        let (cache, stack) = self.run(bundle, &mut None, capture)?;
        Ok((cache.joint, stack))
    }

    /// Training entry point: keeps the cache; applies dropout when a
    /// generator is supplied and `config.dropout > 0`.
    pub(crate) fn forward_cached(
        &self,
        bundle: &EmbeddingBundle,
        dropout_rng: &mut Option<&mut ChaCha12Rng>,
    ) -> Result<ForwardCache> {
        let (cache, _) = self.run(bundle, dropout_rng, false)?;
        Ok(cache)
    }

    fn run(
        &self,
        bundle: &EmbeddingBundle,
        dropout_rng: &mut Option<&mut ChaCha12Rng>,
        capture: bool,
    ) -> Result<(ForwardCache, Option<AttentionStack>)> {
        let mut x = self.project_and_fuse(bundle)?;
        check_finite(&x, "image projection")?;
        let o = bundle.image_positions();
        let l = bundle.text_len();
        let n = o + l;
        let heads = self.config.num_heads;
        let hk = self.config.key_dim / heads;
        let hv = self.config.embed_dim / heads;
        let scale = 1.0 / (hk as f64).sqrt();
        let p = self.config.dropout;

        let mut layer_caches = Vec::with_capacity(self.config.num_layers);
        let mut captured = capture.then(Vec::new);

        for (li, layer) in self.params.layers.iter().enumerate() {
            let x_in = x.clone();
            let q = x.dot(&layer.w_q);
            let k = x.dot(&layer.w_k);
            let v = x.dot(&layer.w_v);

            let mut attn = Vec::with_capacity(heads);
            let mut attn_concat = Array2::<f64>::zeros((n, self.config.embed_dim));
            for h in 0..heads {
                let qh = q.slice(s![.., h * hk..(h + 1) * hk]);
                let kh = k.slice(s![.., h * hk..(h + 1) * hk]);
                let vh = v.slice(s![.., h * hv..(h + 1) * hv]);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                softmax_rows(&mut scores);
                let out = scores.dot(&vh);
                attn_concat
                    .slice_mut(s![.., h * hv..(h + 1) * hv])
                    .assign(&out);
                attn.push(scores);
            }

            if let Some(stack) = captured.as_mut() {
                let mut mean = Array2::<f64>::zeros((n, n));
                for a in &attn {
                    mean += a;
                }
                mean /= heads as f64;
                stack.push(mean);
            }

            let mut branch = attn_concat.dot(&layer.w_o);
            let drop1 = match dropout_rng {
                Some(rng) if p > 0.0 => {
                    let mask = dropout_mask(rng, (n, self.config.embed_dim), p);
                    branch *= &mask;
                    Some(mask)
                }
                _ => None,
            };
            let res1 = &x_in + &branch;
            let (x_mid, ln1) = layer_norm(&res1, &layer.ln1_gain, &layer.ln1_bias);

            let ffn_pre = x_mid.dot(&layer.ffn_w1) + &layer.ffn_b1;
            let ffn_act = ffn_pre.mapv(gelu);
            let mut ffn_out = ffn_act.dot(&layer.ffn_w2) + &layer.ffn_b2;
            let drop2 = match dropout_rng {
                Some(rng) if p > 0.0 => {
                    let mask = dropout_mask(rng, (n, self.config.embed_dim), p);
                    ffn_out *= &mask;
                    Some(mask)
                }
                _ => None,
            };
            let res2 = &x_mid + &ffn_out;
            let (x_out, ln2) = layer_norm(&res2, &layer.ln2_gain, &layer.ln2_bias);
            check_finite(&x_out, &format!("attention block {li}"))?;

            layer_caches.push(LayerCache {
                x_in,
                q,
                k,
                v,
                attn,
                attn_concat,
                drop1,
                ln1,
                x_mid,
                ffn_pre,
                ffn_act,
                drop2,
                ln2,
                x_out: x_out.clone(),
            });
            x = x_out;
        }

        // Split at position o and pool with the encoder's convention:
        // class position for the image side, end-of-sequence for text.
        let image_aligned = x.row(0).to_owned();
        let text_aligned = x.row(n - 1).to_owned();
        let aligned = concatenate![Axis(0), image_aligned, text_aligned];
        let pooled = concatenate![
            Axis(0),
            bundle.image_pooled.view(),
            bundle.text_pooled.view()
        ];
        // Residual connection: element-wise addition of the frozen pooled
        // pair onto the aligned pooled pair.
        let decoder_in = &aligned + &pooled;

        let dec_pre = decoder_in.dot(&self.params.decoder.w1) + &self.params.decoder.b1;
        let dec_act = dec_pre.mapv(gelu);
        let joint = dec_act.dot(&self.params.decoder.w2) + &self.params.decoder.b2;
        if !joint.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence("non-finite joint representation".into()));
        }

        let stack = captured.map(|layers| AttentionStack {
            layers,
            image_positions: o,
            text_len: l,
        });
        Ok((
            ForwardCache {
                image_seq: bundle.image_seq.clone(),
                layers: layer_caches,
                image_positions: o,
                text_len: l,
                decoder_in,
                dec_pre,
                dec_act,
                joint,
            },
            stack,
        ))
    }
}
