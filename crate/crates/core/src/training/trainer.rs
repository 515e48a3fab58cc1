use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageRecord, SyntheticPool};
use crate::encoder::{global_feature, AdapterGrads, AdapterSpec, Encoder, EncoderTape, Mode, ToyVit};
use crate::error::{Error, Result};
use crate::seed;

use super::losses::{alt_loss_grad, Head};
use super::optim::Adam;
use super::sampling::{sample_pairs, TrainingPair};
use super::{augment, LossKind, TrainConfig};

/// Optimizer steps for `config`: every epoch walks all pairs once and the
/// epochs are chunked into batches as one stream.
pub fn step_count(config: &TrainConfig) -> usize {
    (config.epochs * config.n_pairs).div_ceil(config.batch_size)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: ToyVit,
    pub head: Option<Head>,
    /// Mean batch loss per optimizer step.
    pub loss_trace: Vec<f64>,
}

impl TrainOutcome {
    pub fn steps(&self) -> usize {
        self.loss_trace.len()
    }
}

/// Record of one training run, written next to the adapter checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub instance_id: String,
    pub encoder: String,
    pub adapter: AdapterSpec,
    pub config: TrainConfig,
    pub pool_digest: String,
    pub n_positives: usize,
    pub n_negatives: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub loss_trace_path: String,
    pub adapter_path: String,
}

pub fn write_loss_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["step", "loss"]).map_err(|e| Error::io(path, e.into()))?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.17e}")])
            .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One forward pass kept for backpropagation.
struct Item {
    feature: Vec<f64>,
    tape: EncoderTape,
}

fn forward_record(model: &ToyVit, rec: &ImageRecord, augment_seed: Option<u64>, dropout_seed: u64) -> Result<Item> {
    let mode = Mode::Training { seed: dropout_seed };
    let (bundle, tape) = match augment_seed {
        Some(s) => model.forward(&augment(rec, s).pixels, mode)?,
        None => model.forward(&rec.pixels, mode)?,
    };
    Ok(Item {
        feature: global_feature(&bundle),
        tape,
    })
}

/// Fine-tune the adapters of `encoder` on pairs drawn from `d_r` and `pool`.
pub fn train_personalized(
    encoder: &ToyVit,
    d_r: &[ImageRecord],
    pool: &SyntheticPool,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if encoder.adapters().is_empty() {
        return Err(Error::InvalidConfig("no adapter attached to the encoder".into()));
    }
    let pairs = sample_pairs(d_r, pool, config, config.seed)?;
    let mut order = Vec::with_capacity(config.epochs * pairs.len());
    for epoch in 0..config.epochs {
        let mut perm: Vec<usize> = (0..pairs.len()).collect();
        perm.shuffle(&mut seed::stream(config.seed, "epoch_order", epoch as u64));
        order.extend(perm);
    }

    let mut model = encoder.clone();
    // Frozen trunk outputs of negatives are reused across steps when only the
    // pooling head is adapted.
    let neg_cache: Option<Vec<Array2<f64>>> = if model.trunk_is_adapted() {
        None
    } else {
        Some(
            pool.negatives
                .par_iter()
                .map(|s| model.trunk_features(&s.record.pixels))
                .collect::<Result<_>>()?,
        )
    };

    let dim = 2 * model.descriptor().dim;
    let mut head = (config.loss_kind == LossKind::CrossEntropy).then(|| Head::zeros(dim));
    let n_adapter = model.adapters().num_params();
    let mut params = model.adapters().flatten();
    if let Some(h) = &head {
        params.extend(&h.w);
        params.push(h.b);
    }
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let mut trace = Vec::with_capacity(step_count(config));

    for (step, batch) in order.chunks(config.batch_size).enumerate() {
        let batch: Vec<&TrainingPair<'_>> = batch.iter().map(|&i| &pairs[i]).collect();
        let (loss, grads, head_grad) = batch_gradients(&model, head.as_ref(), &batch, pool, neg_cache.as_deref(), config, step)?;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, trace });
        }
        let mut flat = grads.flatten();
        if let Some((dw, db)) = head_grad {
            flat.extend(dw);
            flat.push(db);
        }
        opt.step(&mut params, &flat);
        model.adapters_mut().set_flat(&params[..n_adapter]);
        if let Some(h) = head.as_mut() {
            h.w.copy_from_slice(&params[n_adapter..n_adapter + dim]);
            h.b = params[n_adapter + dim];
        }
        log::debug!("step {step}: loss {loss:.5}");
    }
    Ok(TrainOutcome {
        encoder: model,
        head,
        loss_trace: trace,
    })
}

type BatchResult = (f64, AdapterGrads, Option<(Vec<f64>, f64)>);

fn batch_gradients(
    model: &ToyVit,
    head: Option<&Head>,
    batch: &[&TrainingPair<'_>],
    pool: &SyntheticPool,
    neg_cache: Option<&[Array2<f64>]>,
    config: &TrainConfig,
    step: usize,
) -> Result<BatchResult> {
    let b = batch.len();
    let item_seed = |role: &str, k: usize| seed::derive(config.seed, role, (step as u64) << 20 | k as u64);
    let aug = |role: &str, k: usize| config.augment.then(|| item_seed(role, k));

    let anchors: Vec<Item> = batch
        .par_iter()
        .enumerate()
        .map(|(k, p)| forward_record(model, p.anchor, aug("augment_anchor", k), item_seed("dropout_anchor", k)))
        .collect::<Result<_>>()?;
    let positives: Vec<Item> = batch
        .par_iter()
        .enumerate()
        .map(|(k, p)| forward_record(model, p.positive, aug("augment_positive", k), item_seed("dropout_positive", k)))
        .collect::<Result<_>>()?;
    // Each distinct negative is embedded once per step.
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    for p in batch {
        for &j in &p.negative_idx {
            let next = slot.len();
            slot.entry(j).or_insert(next);
        }
    }
    let mut unique: Vec<usize> = vec![0; slot.len()];
    for (&j, &s) in &slot {
        unique[s] = j;
    }
    let negatives: Vec<Item> = unique
        .par_iter()
        .map(|&j| {
            let mode_seed = item_seed("dropout_negative", j);
            match neg_cache {
                Some(cache) => {
                    let rec = &pool.negatives[j].record;
                    let (bundle, tape) =
                        model.forward_from_trunk(cache[j].clone(), Mode::Training { seed: mode_seed }, rec.pixels.dims())?;
                    Ok(Item {
                        feature: global_feature(&bundle),
                        tape,
                    })
                }
                None => forward_record(model, &pool.negatives[j].record, None, mode_seed),
            }
        })
        .collect::<Result<_>>()?;

    let dim = anchors[0].feature.len();
    let mut d_anchor = vec![vec![0.0; dim]; b];
    let mut d_pos = vec![vec![0.0; dim]; b];
    let mut d_neg = vec![vec![0.0; dim]; unique.len()];
    let mut d_head: Option<(Vec<f64>, f64)> = head.map(|h| (vec![0.0; h.w.len()], 0.0));
    let mut total = 0.0;
    let all_pos: Vec<&[f64]> = positives.iter().map(|i| i.feature.as_slice()).collect();
    for (k, pair) in batch.iter().enumerate() {
        let negs: Vec<&[f64]> = pair.negative_idx.iter().map(|j| negatives[slot[j]].feature.as_slice()).collect();
        let (pos, pos_slots): (Vec<&[f64]>, Vec<usize>) = match config.loss_kind {
            LossKind::InfoNceMultipos => (all_pos.clone(), (0..b).collect()),
            _ => (vec![all_pos[k]], vec![k]),
        };
        let g = alt_loss_grad(config.loss_kind, &anchors[k].feature, &pos, &negs, config, head)?;
        total += g.value;
        let scale = 1.0 / b as f64;
        add_scaled(&mut d_anchor[k], &g.d_anchor, scale);
        for (s, d) in pos_slots.iter().zip(&g.d_pos) {
            add_scaled(&mut d_pos[*s], d, scale);
        }
        for (j, d) in pair.negative_idx.iter().zip(&g.d_neg) {
            add_scaled(&mut d_neg[slot[j]], d, scale);
        }
        if let (Some((aw, ab)), Some((gw, gb))) = (d_head.as_mut(), g.d_head) {
            add_scaled(aw, &gw, scale);
            *ab += gb * scale;
        }
    }

    let jobs: Vec<(&Item, &Vec<f64>)> = anchors
        .iter()
        .zip(&d_anchor)
        .chain(positives.iter().zip(&d_pos))
        .chain(negatives.iter().zip(&d_neg))
        .filter(|(_, d)| d.iter().any(|&v| v != 0.0))
        .collect();
    let parts: Vec<AdapterGrads> = jobs
        .par_iter()
        .map(|(item, d)| {
            let mut g = AdapterGrads::zeros_like(model.adapters());
            let half = d.len() / 2;
            model.backward(&item.tape, &d[..half], &d[half..], &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grads = AdapterGrads::zeros_like(model.adapters());
    for g in &parts {
        grads.add_assign(g);
    }
    Ok((total / b as f64, grads, d_head))
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
}
