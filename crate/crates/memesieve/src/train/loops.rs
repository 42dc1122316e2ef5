//! Mini-batch training loops for both phases. Loops are resumable: all
//! randomness is derived from (seed, epoch, step), so a run restarted from
//! a saved `TrainState` reproduces the uninterrupted run bit-identically.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::backends::{DualEncoder, EmbeddingBundle};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{macro_f1, PredictionSet};
use crate::ita::{ItaModel, TrainScope};
use crate::seeding::Seeder;

use super::{
    classification_forward_backward, triplet_forward_backward, Adam, TrainConfig, TrainState,
};

/// One pre-encoded triplet: anchor plus its two counterparts.
#[derive(Debug, Clone)]
pub struct TripletItem {
    pub id: String,
    pub anchor: EmbeddingBundle,
    pub nonhate: EmbeddingBundle,
    pub hate: EmbeddingBundle,
    /// Anchor hatefulness label; decides contrastive roles.
    pub label: u8,
}

/// One pre-encoded labeled meme for fine-tuning/evaluation.
#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub id: String,
    pub bundle: EmbeddingBundle,
    pub label: u8,
}

/// One `epoch,step,loss,metric` line of the loss curve CSV. Losses are
/// summed over the batch for the update but reported as the batch mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub metric: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub rows: Vec<LossRow>,
    pub state: TrainState,
    pub epoch_mean_losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEval {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
    pub holdout_f1: Option<f64>,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub rows: Vec<LossRow>,
    pub epoch_evals: Vec<EpochEval>,
    pub state: TrainState,
    pub holdout_ids: Vec<String>,
}

fn divergence_with_batch(err: Error, ids: &[&str], step: usize) -> Error {
    match err {
        Error::Divergence(msg) => Error::Divergence(format!(
            "{msg} at step {step} (batch: {})",
            ids.join(", ")
        )),
        other => other,
    }
}

fn dropout_rng(model: &ItaModel, seeder: &Seeder, phase: &str, epoch: usize, step: usize) -> Option<ChaCha12Rng> {
    (model.config.dropout > 0.0)
        .then(|| seeder.rng(&format!("{phase}-dropout/e{epoch}/s{step}")))
}

/// Phase 1: contrastive pre-training on triplets. Updates the stack only
/// (the head, if any, is excluded by scope).
pub fn pretrain_on_items(
    model: &mut ItaModel,
    items: &[TripletItem],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidInput("empty triplet set".into()));
    }
    let scope = TrainScope::StackOnly;
    let n_params = model.parameter_count(scope);
    let mut state = resume.unwrap_or_else(|| TrainState::fresh(n_params));
    if state.m.len() != n_params || state.v.len() != n_params {
        return Err(Error::InvalidInput(format!(
            "resume state holds {} moments, model has {n_params} trainable scalars",
            state.m.len()
        )));
    }
    let seeder = Seeder::new(cfg.seed);
    let adam = Adam::new(cfg.pretrain_lr, cfg.adam_betas);
    let mut rows = Vec::new();
    let mut epoch_mean_losses = Vec::new();

    for epoch in state.epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut seeder.rng(&format!("pretrain-shuffle/epoch{epoch}")));
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut acc = vec![0.0f64; n_params];
            let mut batch_loss = 0.0;
            let mut margin_ok = 0usize;
            let ids: Vec<&str> = batch.iter().map(|&i| items[i].id.as_str()).collect();
            let mut rng = dropout_rng(model, &seeder, "pretrain", epoch, state.step);
            let mut rng_opt = rng.as_mut();

            for &i in batch {
                let item = &items[i];
                let (loss, grads, d_pos, d_neg) = triplet_forward_backward(
                    model,
                    &item.anchor,
                    &item.nonhate,
                    &item.hate,
                    item.label == 1,
                    cfg.margin,
                    cfg.squared_distance,
                    &mut rng_opt,
                )
                .map_err(|e| divergence_with_batch(e, &ids, state.step))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite triplet loss at step {} (batch: {})",
                        state.step,
                        ids.join(", ")
                    )));
                }
                batch_loss += loss;
                if d_pos < d_neg {
                    margin_ok += 1;
                }
                for (a, g) in acc.iter_mut().zip(grads.flatten(scope)) {
                    *a += g;
                }
            }

            let mut params = model.flatten(scope);
            state.adam_t += 1;
            adam.step(&mut params, &acc, &mut state.m, &mut state.v, state.adam_t);
            model.assign_from_flat(scope, &params);
            state.step += 1;
            state.loss_sum += batch_loss;
            state.loss_count += batch.len();
            epoch_loss += batch_loss;
            epoch_count += batch.len();
            rows.push(LossRow {
                epoch,
                step: state.step,
                loss: batch_loss / batch.len() as f64,
                metric: margin_ok as f64 / batch.len() as f64,
            });
        }
        state.epoch = epoch + 1;
        epoch_mean_losses.push(epoch_loss / epoch_count.max(1) as f64);
    }

    Ok(PretrainOutcome {
        rows,
        state,
        epoch_mean_losses,
    })
}

/// Deterministic holdout split: indices shuffled once from the seed.
pub fn holdout_split(n: usize, fraction: f64, seeder: &Seeder) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeder.rng("finetune-holdout"));
    let k = (fraction * n as f64).floor() as usize;
    let holdout = order[..k].to_vec();
    let train = order[k..].to_vec();
    (train, holdout)
}

fn eval_items(model: &ItaModel, items: &[LabeledItem], idx: &[usize]) -> Result<PredictionSet> {
    let mut preds = PredictionSet::new("train-eval", 0);
    for &i in idx {
        let p = model.classify(&items[i].bundle)?;
        preds.push(u8::from(p > 0.5), items[i].label, p);
    }
    Ok(preds)
}

/// Phase 2: classification fine-tuning. Trains the full stack by default
/// or just the head with `cfg.head_only`. `epochs == 0` is an
/// evaluation-only pass that leaves parameters untouched.
pub fn finetune_on_items(
    model: &mut ItaModel,
    items: &[LabeledItem],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidInput("empty fine-tuning set".into()));
    }
    if !model.has_head() {
        return Err(Error::MissingHead);
    }
    let scope = if cfg.head_only {
        TrainScope::HeadOnly
    } else {
        TrainScope::Full
    };
    let n_params = model.parameter_count(scope);
    let seeder = Seeder::new(cfg.seed);
    let (train_idx, holdout_idx) = holdout_split(items.len(), cfg.holdout_fraction, &seeder);
    if train_idx.is_empty() {
        return Err(Error::InvalidInput(
            "holdout fraction leaves no training items".into(),
        ));
    }

    let mut state = resume.unwrap_or_else(|| TrainState::fresh(n_params));
    if state.m.len() != n_params || state.v.len() != n_params {
        return Err(Error::InvalidInput(format!(
            "resume state holds {} moments, scope has {n_params} trainable scalars",
            state.m.len()
        )));
    }
    let adam = Adam::new(cfg.finetune_lr, cfg.adam_betas);
    let mut rows = Vec::new();
    let mut epoch_evals = Vec::new();

    if cfg.epochs == 0 {
        let train_eval = eval_items(model, items, &train_idx)?;
        let holdout_eval = if holdout_idx.is_empty() {
            None
        } else {
            Some(eval_items(model, items, &holdout_idx)?)
        };
        epoch_evals.push(EpochEval {
            epoch: 0,
            train_accuracy: train_eval.accuracy()?,
            holdout_accuracy: holdout_eval.as_ref().map(|e| e.accuracy()).transpose()?,
            holdout_f1: holdout_eval.as_ref().map(macro_f1).transpose()?,
        });
    }

    for epoch in state.epoch..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut seeder.rng(&format!("finetune-shuffle/epoch{epoch}")));

        for batch in order.chunks(cfg.batch_size) {
            let mut acc = vec![0.0f64; n_params];
            let mut batch_loss = 0.0;
            let mut correct = 0usize;
            let ids: Vec<&str> = batch.iter().map(|&i| items[i].id.as_str()).collect();
            let mut rng = dropout_rng(model, &seeder, "finetune", epoch, state.step);
            let mut rng_opt = rng.as_mut();

            for &i in batch {
                let item = &items[i];
                let (loss, grads, prob) =
                    classification_forward_backward(model, &item.bundle, item.label, &mut rng_opt)
                        .map_err(|e| divergence_with_batch(e, &ids, state.step))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite classification loss at step {} (batch: {})",
                        state.step,
                        ids.join(", ")
                    )));
                }
                batch_loss += loss;
                if (prob > 0.5) == (item.label == 1) {
                    correct += 1;
                }
                for (a, g) in acc.iter_mut().zip(grads.flatten(scope)) {
                    *a += g;
                }
            }

            let mut params = model.flatten(scope);
            state.adam_t += 1;
            adam.step(&mut params, &acc, &mut state.m, &mut state.v, state.adam_t);
            model.assign_from_flat(scope, &params);
            state.step += 1;
            state.loss_sum += batch_loss;
            state.loss_count += batch.len();
            rows.push(LossRow {
                epoch,
                step: state.step,
                loss: batch_loss / batch.len() as f64,
                metric: correct as f64 / batch.len() as f64,
            });
        }
        state.epoch = epoch + 1;

        let train_eval = eval_items(model, items, &train_idx)?;
        let holdout_eval = if holdout_idx.is_empty() {
            None
        } else {
            Some(eval_items(model, items, &holdout_idx)?)
        };
        epoch_evals.push(EpochEval {
            epoch,
            train_accuracy: train_eval.accuracy()?,
            holdout_accuracy: holdout_eval.as_ref().map(|e| e.accuracy()).transpose()?,
            holdout_f1: holdout_eval.as_ref().map(macro_f1).transpose()?,
        });
    }

    Ok(FinetuneOutcome {
        rows,
        epoch_evals,
        state,
        holdout_ids: holdout_idx
            .iter()
            .map(|&i| items[i].id.clone())
            .collect(),
    })
}

/// Encodes a corpus row-by-row in manifest order. Embedding work is
/// deterministic, so precomputing once up front keeps batches cheap.
pub fn encode_corpus(
    corpus: &Corpus,
    encoder: &dyn DualEncoder,
) -> Result<Vec<(String, EmbeddingBundle, Option<u8>)>> {
    let mut out = Vec::with_capacity(corpus.rows.len());
    for row in &corpus.rows {
        let (image, _mask) = corpus.load_pixels(row)?;
        let text = encoder.tokenize(&row.text)?;
        let bundle = encoder.encode(&image, &text)?;
        out.push((row.id.clone(), bundle, row.label));
    }
    Ok(out)
}

/// Corpus rows as labeled items; rows without a label are an error.
pub fn labeled_items(
    encoded: Vec<(String, EmbeddingBundle, Option<u8>)>,
) -> Result<Vec<LabeledItem>> {
    encoded
        .into_iter()
        .map(|(id, bundle, label)| {
            let label = label.ok_or_else(|| {
                Error::InvalidInput(format!("meme {id} has no label; fine-tuning needs labels"))
            })?;
            Ok(LabeledItem { id, bundle, label })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ita::testutil::{random_bundle, tiny_config};
    use crate::ita::ItaModel;
    use ndarray::Array1;

    fn synthetic_triplets(n: usize, separation: f64) -> Vec<TripletItem> {
        let cfg = tiny_config();
        (0..n)
            .map(|i| {
                let anchor = random_bundle(&cfg, 4, 3, i as u64);
                let mut nonhate = random_bundle(&cfg, 4, 3, 1000 + i as u64);
                let mut hate = random_bundle(&cfg, 4, 3, 2000 + i as u64);
                // pull the positive toward the anchor in pooled space
                let label = (i % 2) as u8;
                let (pos, neg) = if label == 1 {
                    (&mut hate, &mut nonhate)
                } else {
                    (&mut nonhate, &mut hate)
                };
                pos.image_pooled = &anchor.image_pooled * 1.0
                    + &Array1::from_elem(anchor.image_pooled.len(), 0.01);
                pos.text_pooled = anchor.text_pooled.clone();
                neg.image_pooled = &anchor.image_pooled + separation;
                TripletItem {
                    id: format!("t{i}"),
                    anchor,
                    nonhate,
                    hate,
                    label,
                }
            })
            .collect()
    }

    fn labeled_set(n: usize) -> Vec<LabeledItem> {
        let cfg = tiny_config();
        let base0 = random_bundle(&cfg, 4, 3, 77);
        let base1 = random_bundle(&cfg, 4, 3, 78);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let mut bundle = if label == 0 {
                    base0.clone()
                } else {
                    base1.clone()
                };
                let jitter = random_bundle(&cfg, 4, 3, 300 + i as u64);
                bundle.image_pooled = &bundle.image_pooled + &(&jitter.image_pooled * 0.01);
                bundle.text_seq = &bundle.text_seq + &(&jitter.text_seq * 0.01);
                LabeledItem {
                    id: format!("m{i}"),
                    bundle,
                    label,
                }
            })
            .collect()
    }

    fn make_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let seeder = crate::seeding::Seeder::new(0);
        let mut model = ItaModel::new(tiny_config(), &seeder).unwrap();
        let before = model.flatten(TrainScope::StackOnly);
        let cfg = TrainConfig {
            pretrain_lr: 0.0,
            epochs: 2,
            batch_size: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        pretrain_on_items(&mut model, &synthetic_triplets(8, 2.0), &cfg, None).unwrap();
        assert_eq!(model.flatten(TrainScope::StackOnly), before);
    }

    #[test]
    fn same_seed_reproduces_identical_parameters() {
        let cfg = make_cfg(9);
        let items = synthetic_triplets(12, 2.0);
        let run = || {
            let seeder = crate::seeding::Seeder::new(3);
            let mut model = ItaModel::new(tiny_config(), &seeder).unwrap();
            pretrain_on_items(&mut model, &items, &cfg, None).unwrap();
            model.flatten(TrainScope::StackOnly)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let items = synthetic_triplets(12, 2.0);
        let full_cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let seeder = crate::seeding::Seeder::new(4);

        let mut straight = ItaModel::new(tiny_config(), &seeder).unwrap();
        let straight_out = pretrain_on_items(&mut straight, &items, &full_cfg, None).unwrap();

        let mut resumed = ItaModel::new(tiny_config(), &seeder).unwrap();
        let half_cfg = TrainConfig {
            epochs: 2,
            ..full_cfg.clone()
        };
        let half = pretrain_on_items(&mut resumed, &items, &half_cfg, None).unwrap();
        let rest =
            pretrain_on_items(&mut resumed, &items, &full_cfg, Some(half.state)).unwrap();

        assert_eq!(
            straight.flatten(TrainScope::StackOnly),
            resumed.flatten(TrainScope::StackOnly)
        );
        let mut rows = half.rows;
        rows.extend(rest.rows);
        assert_eq!(straight_out.rows, rows);
    }

    #[test]
    fn separable_triplets_drive_loss_down() {
        let items = synthetic_triplets(40, 3.0);
        let seeder = crate::seeding::Seeder::new(6);
        let mut model = ItaModel::new(tiny_config(), &seeder).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            pretrain_lr: 1e-3,
            seed: 6,
            ..TrainConfig::default()
        };
        let out = pretrain_on_items(&mut model, &items, &cfg, None).unwrap();
        let losses = &out.epoch_mean_losses;
        assert!(
            losses.windows(2).all(|w| w[1] < w[0]),
            "epoch means not strictly decreasing: {losses:?}"
        );
    }

    #[test]
    fn head_only_scope_touches_only_head() {
        let seeder = crate::seeding::Seeder::new(7);
        let mut model = ItaModel::new(tiny_config(), &seeder).unwrap();
        model.attach_head(&seeder);
        let stack_before = model.flatten(TrainScope::StackOnly);
        let head_before = model.flatten(TrainScope::HeadOnly);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            finetune_lr: 1e-2,
            head_only: true,
            holdout_fraction: 0.0,
            seed: 8,
            ..TrainConfig::default()
        };
        finetune_on_items(&mut model, &labeled_set(8), &cfg, None).unwrap();
        assert_eq!(model.flatten(TrainScope::StackOnly), stack_before);
        assert_ne!(model.flatten(TrainScope::HeadOnly), head_before);
    }

    #[test]
    fn zero_epochs_is_evaluation_only() {
        let seeder = crate::seeding::Seeder::new(8);
        let mut model = ItaModel::new(tiny_config(), &seeder).unwrap();
        model.attach_head(&seeder);
        let before = model.flatten(TrainScope::Full);
        let cfg = TrainConfig {
            epochs: 0,
            holdout_fraction: 0.25,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = finetune_on_items(&mut model, &labeled_set(8), &cfg, None).unwrap();
        assert_eq!(model.flatten(TrainScope::Full), before);
        assert!(out.rows.is_empty());
        assert_eq!(out.epoch_evals.len(), 1);
        assert!(out.epoch_evals[0].holdout_accuracy.is_some());
    }

    #[test]
    fn overfits_small_labeled_set() {
        let seeder = crate::seeding::Seeder::new(9);
        let mut model = ItaModel::new(tiny_config(), &seeder).unwrap();
        model.attach_head(&seeder);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 8,
            finetune_lr: 5e-3,
            holdout_fraction: 0.0,
            seed: 10,
            ..TrainConfig::default()
        };
        let out = finetune_on_items(&mut model, &labeled_set(16), &cfg, None).unwrap();
        let reached = out
            .epoch_evals
            .iter()
            .any(|e| (e.train_accuracy - 1.0).abs() < 1e-12);
        assert!(reached, "never reached 100% train accuracy");
    }
}
