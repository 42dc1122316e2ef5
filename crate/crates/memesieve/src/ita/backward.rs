//! Analytic backward pass through the alignment stack.
//!
//! Mirrors `forward.rs` block by block in reverse. The gradient container
//! reuses [`ItaParameters`] (identical shapes); head gradients are owned by
//! the loss layer in `train`, so this pass leaves them zero.

use ndarray::{s, Array1, Array2, Axis};

use super::forward::{ForwardCache, LnCache};
use super::{gelu_grad, ItaModel, ItaParameters};

/// Gradients, shaped exactly like the parameters.
pub type ItaGrads = ItaParameters;

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// d_bias, d_gain accumulate into the provided arrays; returns d_x.
fn layer_norm_backward(
    d_y: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = d_y.dim();
    let mut d_x = Array2::<f64>::zeros((n, d));
    for r in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            let dy = d_y[[r, c]];
            let xh = cache.xhat[[r, c]];
            d_bias[c] += dy;
            d_gain[c] += dy * xh;
            let g = dy * gain[c];
            m1 += g;
            m2 += g * xh;
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            let g = d_y[[r, c]] * gain[c];
            d_x[[r, c]] = is * (g - m1 - cache.xhat[[r, c]] * m2);
        }
    }
    d_x
}

/// Row-wise softmax backward: `d_s = a .* (d_a - rowdot(d_a, a))`.
fn softmax_backward(a: &Array2<f64>, d_a: &Array2<f64>) -> Array2<f64> {
    let (n, m) = a.dim();
    let mut d_s = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let mut dot = 0.0;
        for j in 0..m {
            dot += d_a[[i, j]] * a[[i, j]];
        }
        for j in 0..m {
            d_s[[i, j]] = a[[i, j]] * (d_a[[i, j]] - dot);
        }
    }
    d_s
}

/// Gradients of a scalar loss w.r.t. all stack parameters, given the
/// upstream gradient at the joint representation. The frozen encoder
/// inputs receive no gradients by construction.
pub fn backward(model: &ItaModel, cache: &ForwardCache, d_joint: &Array1<f64>) -> ItaGrads {
    let mut g = model.params.zeros_like();
    let cfg = &model.config;
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let hk = cfg.key_dim / heads;
    let hv = d / heads;
    let scale = 1.0 / (hk as f64).sqrt();
    let n = cache.image_positions + cache.text_len;

    // decoder: joint = gelu(u*W1 + b1)*W2 + b2
    g.decoder.w2 = outer(&cache.dec_act, d_joint);
    g.decoder.b2 = d_joint.clone();
    let d_dec_act = model.params.decoder.w2.dot(d_joint);
    let d_dec_pre =
        Array1::from_iter(d_dec_act.iter().zip(cache.dec_pre.iter()).map(|(g, z)| g * gelu_grad(*z)));
    g.decoder.w1 = outer(&cache.decoder_in, &d_dec_pre);
    g.decoder.b1 = d_dec_pre.clone();
    let d_u = model.params.decoder.w1.dot(&d_dec_pre);

    // the residual [I_pool, T_pool] is frozen encoder output — no grads
    let mut d_x = Array2::<f64>::zeros((n, d));
    for c in 0..d {
        d_x[[0, c]] += d_u[c];
        d_x[[n - 1, c]] += d_u[d + c];
    }

    for li in (0..model.params.layers.len()).rev() {
        let layer = &model.params.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut g.layers[li];

        // x_out = LN2(x_mid + ffn_out)
        let d_res2 =
            layer_norm_backward(&d_x, &lc.ln2, &layer.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);
        let mut d_x_mid = d_res2.clone();
        let mut d_ffn_out = d_res2;
        if let Some(mask) = &lc.drop2 {
            d_ffn_out *= mask;
        }

        // ffn_out = gelu(x_mid*W1 + b1)*W2 + b2
        gl.ffn_w2 = lc.ffn_act.t().dot(&d_ffn_out);
        gl.ffn_b2 = d_ffn_out.sum_axis(Axis(0));
        let d_ffn_act = d_ffn_out.dot(&layer.ffn_w2.t());
        let mut d_ffn_pre = d_ffn_act;
        for (dv, z) in d_ffn_pre.iter_mut().zip(lc.ffn_pre.iter()) {
            *dv *= gelu_grad(*z);
        }
        gl.ffn_w1 = lc.x_mid.t().dot(&d_ffn_pre);
        gl.ffn_b1 = d_ffn_pre.sum_axis(Axis(0));
        d_x_mid += &d_ffn_pre.dot(&layer.ffn_w1.t());

        // x_mid = LN1(x_in + attention branch)
        let d_res1 = layer_norm_backward(
            &d_x_mid,
            &lc.ln1,
            &layer.ln1_gain,
            &mut gl.ln1_gain,
            &mut gl.ln1_bias,
        );
        let mut d_x_in = d_res1.clone();
        let mut d_branch = d_res1;
        if let Some(mask) = &lc.drop1 {
            d_branch *= mask;
        }

        // branch = attn_concat * W_o
        gl.w_o = lc.attn_concat.t().dot(&d_branch);
        let d_attn_concat = d_branch.dot(&layer.w_o.t());

        let mut d_q = Array2::<f64>::zeros((n, cfg.key_dim));
        let mut d_k = Array2::<f64>::zeros((n, cfg.key_dim));
        let mut d_v = Array2::<f64>::zeros((n, d));
        for h in 0..heads {
            let d_oh = d_attn_concat.slice(s![.., h * hv..(h + 1) * hv]);
            let ah = &lc.attn[h];
            let vh = lc.v.slice(s![.., h * hv..(h + 1) * hv]);
            let qh = lc.q.slice(s![.., h * hk..(h + 1) * hk]);
            let kh = lc.k.slice(s![.., h * hk..(h + 1) * hk]);

            // head output Oh = Ah * Vh
            let d_ah = d_oh.dot(&vh.t());
            d_v.slice_mut(s![.., h * hv..(h + 1) * hv])
                .assign(&ah.t().dot(&d_oh));
            let d_s = softmax_backward(ah, &d_ah);
            // scores = scale * Qh * Kh^T
            let mut d_qh = d_s.dot(&kh);
            d_qh *= scale;
            d_q.slice_mut(s![.., h * hk..(h + 1) * hk]).assign(&d_qh);
            let mut d_kh = d_s.t().dot(&qh);
            d_kh *= scale;
            d_k.slice_mut(s![.., h * hk..(h + 1) * hk]).assign(&d_kh);
        }

        // q/k/v all read x_in
        gl.w_q = lc.x_in.t().dot(&d_q);
        gl.w_k = lc.x_in.t().dot(&d_k);
        gl.w_v = lc.x_in.t().dot(&d_v);
        d_x_in += &d_q.dot(&layer.w_q.t());
        d_x_in += &d_k.dot(&layer.w_k.t());
        d_x_in += &d_v.dot(&layer.w_v.t());
        d_x = d_x_in;
    }

    // x0 = [image_seq * W_I ; text_seq]; only the projection is trainable
    let d_img_rows = d_x.slice(s![..cache.image_positions, ..]);
    g.image_projection = cache.image_seq.t().dot(&d_img_rows);
    g
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{ItaModel, TrainScope};
    use super::*;
    use crate::seeding::Seeder;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Scalar probe loss: L = sum(c .* H); dL/dH = c.
    fn probe_loss(model: &ItaModel, bundle: &crate::backends::EmbeddingBundle, c: &Array1<f64>) -> f64 {
        let (h, _) = model.forward(bundle, false).unwrap();
        h.dot(c)
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let cfg = tiny_config();
        let seeder = Seeder::new(12);
        let model = ItaModel::new(cfg, &seeder).unwrap();
        let bundle = random_bundle(&cfg, 4, 3, 13);
        let c = Array1::from_iter((0..cfg.output_dim).map(|i| 0.3 + 0.1 * i as f64));

        let cache = model.forward_cached(&bundle, &mut None).unwrap();
        let grads = backward(&model, &cache, &c);
        let analytic = grads.flatten(TrainScope::StackOnly);

        let base = model.flatten(TrainScope::StackOnly);
        let step = 1e-5;
        let mut max_rel = 0.0f64;
        for idx in 0..base.len() {
            let mut plus = model.clone();
            let mut theta = base.clone();
            theta[idx] += step;
            plus.assign_from_flat(TrainScope::StackOnly, &theta);
            let lp = probe_loss(&plus, &bundle, &c);

            let mut minus = model.clone();
            theta[idx] = base[idx] - step;
            minus.assign_from_flat(TrainScope::StackOnly, &theta);
            let lm = probe_loss(&minus, &bundle, &c);

            let fd = (lp - lm) / (2.0 * step);
            let a = analytic[idx];
            if a.abs() < 1e-10 && fd.abs() < 1e-10 {
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn dropout_gradient_matches_with_frozen_masks() {
        let mut cfg = tiny_config();
        cfg.dropout = 0.3;
        let seeder = Seeder::new(21);
        let model = ItaModel::new(cfg, &seeder).unwrap();
        let bundle = random_bundle(&cfg, 4, 3, 22);
        let c = Array1::from_iter((0..cfg.output_dim).map(|i| 0.2 - 0.05 * i as f64));

        // fixed rng seed per evaluation freezes the masks, making the
        // dropped network a fixed differentiable function
        let eval = |m: &ItaModel| -> f64 {
            let mut rng = ChaCha12Rng::seed_from_u64(7);
            let cache = m.forward_cached(&bundle, &mut Some(&mut rng)).unwrap();
            cache.joint.dot(&c)
        };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let cache = model.forward_cached(&bundle, &mut Some(&mut rng)).unwrap();
        let grads = backward(&model, &cache, &c);
        let analytic = grads.flatten(TrainScope::StackOnly);

        let base = model.flatten(TrainScope::StackOnly);
        let step = 1e-5;
        // spot-check a spread of parameters
        for idx in (0..base.len()).step_by(37) {
            let mut plus = model.clone();
            let mut theta = base.clone();
            theta[idx] += step;
            plus.assign_from_flat(TrainScope::StackOnly, &theta);
            let lp = eval(&plus);
            let mut minus = model.clone();
            theta[idx] = base[idx] - step;
            minus.assign_from_flat(TrainScope::StackOnly, &theta);
            let lm = eval(&minus);
            let fd = (lp - lm) / (2.0 * step);
            let a = analytic[idx];
            if a.abs() < 1e-10 && fd.abs() < 1e-10 {
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {idx}: analytic {a}, fd {fd}");
        }
    }
}
