//! Training loop: adaptive-moment updates over the trainable parameter
//! groups, frozen-tower activation caching, deterministic batching, metrics
//! CSV, and best-validation checkpointing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::model::{batch_loss, model_forward, ClipMgModel};
use crate::numeric::Tape;
use crate::params::ParamId;
use crate::pose::RawPoseClip;
use crate::synth::{ClipSource, Split};
use crate::visual::{prefix_tokens, sample_rgb_frames};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Adam over the store's trainable parameters.
pub struct Adam {
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &ClipMgModel, lr: f64, beta1: f64, beta2: f64) -> Self {
        let ids = model.store.trainable_ids();
        let m = ids
            .iter()
            .map(|&id| vec![0.0; model.store.get(id).numel()])
            .collect();
        let v = ids
            .iter()
            .map(|&id| vec![0.0; model.store.get(id).numel()])
            .collect();
        Adam {
            ids,
            m,
            v,
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    /// One update from accumulated (already averaged) gradients, indexed by
    /// parameter id. Also writes the gradient back into each tensor's grad
    /// slot for inspection.
    pub fn apply(&mut self, model: &mut ClipMgModel, grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, &id) in self.ids.iter().enumerate() {
            let tensor = model.store.get_mut(id);
            let zero_grad;
            let g: &[f64] = match &grads[id.0] {
                Some(g) => g,
                None => {
                    zero_grad = vec![0.0; tensor.numel()];
                    &zero_grad
                }
            };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..tensor.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            tensor.grad = Some(g.to_vec());
        }
    }
}

/// Everything a training step needs per clip, with the frozen ViT prefix
/// precomputed once.
pub struct CachedClip {
    pub prefix: Vec<Vec<f64>>,
    pub pose: RawPoseClip,
    pub label: usize,
}

/// Build the per-clip frozen-prefix cache for a split (parallel, ordered).
pub fn build_cache(
    model: &ClipMgModel,
    source: &ClipSource,
    split: Split,
    indices: &[usize],
) -> Result<Vec<CachedClip>> {
    indices
        .par_iter()
        .map(|&i| {
            let clip = source.clip(split, i)?;
            let scfg = source.config();
            let input = clip.to_input(scfg.canvas, scfg.channels);
            let sampled = sample_rgb_frames(&input.frames)?;
            let prefix = sampled
                .iter()
                .map(|f| prefix_tokens(&model.store, &model.vit, &model.cfg.vit, f))
                .collect::<Result<Vec<_>>>()?;
            Ok(CachedClip {
                prefix,
                pose: input.pose,
                label: clip.label as usize,
            })
        })
        .collect()
}

fn forward_cached<'t>(
    tape: &'t Tape,
    model: &ClipMgModel,
    bound: &crate::params::Bound<'t>,
    clip: &CachedClip,
) -> Result<crate::model::ClipOutput<'t>> {
    let input = crate::model::ClipInput {
        frames: Vec::new(),
        pose: clip.pose.clone(),
    };
    model_forward(tape, model, bound, &input, Some(&clip.prefix))
}

/// Lowest-index argmax.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

struct SampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Vec<f64>>>,
}

fn sample_step(model: &ClipMgModel, clip: &CachedClip) -> Result<SampleGrad> {
    let tape = Tape::new();
    let bound = model.store.bind(&tape)?;
    let out = forward_cached(&tape, model, &bound, clip)?;
    let probs = out.probs;
    let loss = batch_loss(&[probs], &[clip.label])?;
    let loss_value = loss.scalar();
    let mut grad_store = tape.backward(loss)?;
    let mut grads = vec![None; model.store.len()];
    for &id in &model.store.trainable_ids() {
        grads[id.0] = grad_store.take(bound.var(id));
    }
    let correct = argmax(&probs.data()) == clip.label;
    Ok(SampleGrad {
        loss: loss_value,
        correct,
        grads,
    })
}

fn predict(model: &ClipMgModel, clip: &CachedClip) -> Result<(f64, bool)> {
    let tape = Tape::no_grad();
    let bound = model.store.bind(&tape)?;
    let out = forward_cached(&tape, model, &bound, clip)?;
    let probs = out.probs.data();
    let p = probs[clip.label].max(crate::numeric::ops::LOG_CLAMP);
    Ok((-p.ln(), argmax(&probs) == clip.label))
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub best_val_top1: f64,
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

/// Train one model on the source's train split (20% held out for
/// validation), writing metrics.csv and the best-validation checkpoint into
/// `run_dir`. Returns the model with its best-validation parameters
/// restored.
pub fn train(
    cfg: &ExperimentConfig,
    source: &ClipSource,
    run_dir: &Path,
) -> Result<(ClipMgModel, TrainResult)> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(run_dir)?;
    let scfg = source.config();
    let mut model = ClipMgModel::new(cfg.model_config(scfg.classes), cfg.seed)?;
    let mut optimizer = Adam::new(&model, cfg.learning_rate, cfg.beta1, cfg.beta2);

    let n_train = source.len(Split::Train);
    if n_train == 0 {
        return Err(Error::contract("training split is empty"));
    }
    // Deterministic 80/20 split; tiny sets validate on the train clips.
    let mut train_idx: Vec<usize> = Vec::new();
    let mut val_idx: Vec<usize> = Vec::new();
    for i in 0..n_train {
        if i % 5 == 4 {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }

    let train_cache = build_cache(&model, source, Split::Train, &train_idx)?;
    let val_cache = build_cache(&model, source, Split::Train, &val_idx)?;

    // Snapshot of the frozen parameters; training must never move them.
    let frozen_snapshot: Vec<(ParamId, Vec<f64>)> = model
        .store
        .iter()
        .filter(|(_, _, t)| !t.requires_grad)
        .map(|(id, _, t)| (id, t.data.clone()))
        .collect();

    let mut csv = String::from("epoch,split,loss,top1\n");
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Vec<Vec<f64>> = Vec::new();

    let mut order: Vec<usize> = (0..train_cache.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ (epoch as u64) << 32));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<SampleGrad>> = batch
                .par_iter()
                .map(|&i| sample_step(&model, &train_cache[i]))
                .collect();
            let mut accum: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
            let scale = 1.0 / batch.len() as f64;
            for (pos, result) in results.into_iter().enumerate() {
                let sample = result.map_err(|e| {
                    let diag = serde_json::json!({
                        "epoch": epoch,
                        "batch": batch_no,
                        "clip_train_index": train_idx[batch[pos]],
                        "error": e.to_string(),
                    });
                    let _ = std::fs::write(
                        run_dir.join("diagnostic.json"),
                        serde_json::to_string_pretty(&diag).unwrap_or_default(),
                    );
                    Error::Numeric(format!(
                        "epoch {epoch} batch {batch_no}: {e} (diagnostic.json written)"
                    ))
                })?;
                epoch_loss += sample.loss;
                epoch_correct += sample.correct as usize;
                for (slot, g) in sample.grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        let target = accum[slot].get_or_insert_with(|| vec![0.0; g.len()]);
                        for (t, gi) in target.iter_mut().zip(&g) {
                            *t += gi * scale;
                        }
                    }
                }
            }
            optimizer.apply(&mut model, &accum);
        }
        let train_loss = epoch_loss / train_cache.len() as f64;
        let train_top1 = 100.0 * epoch_correct as f64 / train_cache.len() as f64;

        let val: Vec<(f64, bool)> = val_cache
            .par_iter()
            .map(|clip| predict(&model, clip))
            .collect::<Result<_>>()?;
        let val_loss = val.iter().map(|(l, _)| l).sum::<f64>() / val.len() as f64;
        let val_top1 = 100.0 * val.iter().filter(|(_, c)| *c).count() as f64 / val.len() as f64;

        csv.push_str(&format!("{epoch},train,{train_loss:.6},{train_top1:.6}\n"));
        csv.push_str(&format!("{epoch},val,{val_loss:.6},{val_top1:.6}\n"));

        if val_top1 > best_val {
            best_val = val_top1;
            best_epoch = epoch;
            best_params = model.store.iter().map(|(_, _, t)| t.data.clone()).collect();
        }
    }

    for (id, snapshot) in &frozen_snapshot {
        debug_assert_eq!(
            &model.store.get(*id).data,
            snapshot,
            "frozen parameter {} moved during training",
            model.store.name(*id)
        );
    }

    // Restore the best-validation parameters before checkpointing.
    for (i, data) in best_params.into_iter().enumerate() {
        model.store.get_mut(ParamId(i)).data = data;
    }
    let metrics_path = run_dir.join("metrics.csv");
    std::fs::write(&metrics_path, &csv)?;
    let checkpoint_path = run_dir.join("checkpoint_best.ckpt");
    model.save(&checkpoint_path)?;

    Ok((
        model,
        TrainResult {
            metrics_path,
            checkpoint_path,
            best_val_top1: best_val,
            best_epoch,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Top-1 accuracy (%) of the model on a split. Ties break to the lowest
/// class index.
pub fn evaluate(model: &ClipMgModel, source: &ClipSource, split: Split) -> Result<f64> {
    if source.is_empty(split) {
        return Err(Error::contract("evaluation split is empty"));
    }
    if model.cfg.classes != source.config().classes {
        return Err(Error::contract(format!(
            "checkpoint has {} classes, dataset has {}",
            model.cfg.classes,
            source.config().classes
        )));
    }
    let n = source.len(split);
    let correct: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<bool> {
            let clip = source.clip(split, i)?;
            let scfg = source.config();
            let input = clip.to_input(scfg.canvas, scfg.channels);
            let (probs, _) = crate::model::infer(model, &input)?;
            Ok(argmax(&probs) == clip.label as usize)
        })
        .collect::<Result<_>>()?;
    Ok(100.0 * correct.iter().filter(|c| **c).count() as f64 / n as f64)
}
