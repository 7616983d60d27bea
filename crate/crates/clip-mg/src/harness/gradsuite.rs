//! Gradient-check battery across all modules: primitive ops at 1e-6,
//! composite encoder/fusion/model paths at 1e-4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{fusion_forward, FusionFlags, FusionInputs, FusionLayout};
use crate::model::{batch_loss, classify, model_forward, ClipMgModel, HeadLayout, Variant};
use crate::numeric::gradcheck::corrupted_sigmoid;
use crate::numeric::{conv3d, grad_check, ops, GradCheckSettings, Tensor};
use crate::params::{Bound, ParamStore};
use crate::pose::HeatmapVolume;
use crate::skeleton::{skeleton_forward, SkeletonEncoderConfig, SkeletonLayout};
use crate::visual::{prefix_tokens, project_tokens, suffix_forward, VitConfig, VitLayout};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Tensor::new(data, shape.to_vec()).expect("finite").trainable()
}

fn settings(seed: u64, max_coords: usize) -> GradCheckSettings {
    GradCheckSettings {
        eps: 1e-5,
        max_coords,
        seed,
        ..Default::default()
    }
}

/// Run every gradient check. `corrupt` swaps in a deliberately wrong
/// backward rule (test fixture) to prove the suite catches regressions.
pub fn gradcheck_suite(seed: u64, corrupt: bool) -> Result<Vec<SuiteCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // ── Primitive ops ────────────────────────────────────────────────
    {
        let w = rand_tensor(&[5, 4], &mut rng, 1.0);
        let x = rand_tensor(&[4, 2], &mut rng, 1.0);
        let err = grad_check(
            &[w, x],
            &|_, v| ops::sum_all(ops::sigmoid(ops::matmul(v[0], v[1])?)?),
            &settings(seed ^ 1, 24),
        )?;
        checks.push(SuiteCheck {
            name: "numeric/matmul-sigmoid".into(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    {
        let logits = rand_tensor(&[3, 6], &mut rng, 2.0);
        let err = grad_check(
            &[logits],
            &|_, v| ops::nll_loss(ops::softmax(v[0])?, &[4, 0, 2]),
            &settings(seed ^ 2, 18),
        )?;
        checks.push(SuiteCheck {
            name: "numeric/softmax-nll".into(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    {
        let x = rand_tensor(&[4, 6], &mut rng, 1.0);
        let gamma = rand_tensor(&[6], &mut rng, 0.8);
        let beta = rand_tensor(&[6], &mut rng, 0.5);
        let err = grad_check(
            &[x, gamma, beta],
            &|_, v| ops::sum_all(ops::gelu(ops::layer_norm(v[0], v[1], v[2], 1e-6)?)?),
            &settings(seed ^ 3, 24),
        )?;
        checks.push(SuiteCheck {
            name: "numeric/layernorm-gelu".into(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    {
        let vol = rand_tensor(&[2, 3, 4, 4], &mut rng, 1.0);
        let ker = rand_tensor(&[2, 2, 3, 3, 3], &mut rng, 0.4);
        let err = grad_check(
            &[vol, ker],
            &|_, v| ops::mean_all(ops::sigmoid(conv3d(v[0], v[1], (1, 2, 2))?)?),
            &settings(seed ^ 4, 20),
        )?;
        checks.push(SuiteCheck {
            name: "numeric/conv3d".into(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    {
        let a = {
            let mut t = rand_tensor(&[8], &mut rng, 0.5);
            for v in &mut t.data {
                *v = v.abs() + 0.4;
            }
            t
        };
        let b = rand_tensor(&[8], &mut rng, 1.0);
        let err = grad_check(
            &[a, b],
            &|_, v| ops::sum_all(ops::mul(ops::log(v[0])?, ops::exp(v[1])?)?),
            &settings(seed ^ 5, 16),
        )?;
        checks.push(SuiteCheck {
            name: "numeric/log-exp-mul".into(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }

    // ── Skeleton encoder: scalar head over a 2×4×16×16 toy volume ───
    {
        let cfg = SkeletonEncoderConfig {
            canvas: 16,
            sigma_px: 2.5,
            stage_channels: [4, 6, 8],
            identity_activation: false,
        };
        let mut store = ParamStore::new();
        let layout = SkeletonLayout::build(&mut store, &cfg, 2, 8, &mut rng)?;
        let volume = HeatmapVolume {
            data: (0..2 * 4 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect(),
            frames: 4,
            joints: 2,
            height: 16,
            width: 16,
            sigma_px: 2.5,
        };
        let ids = store.trainable_ids();
        let tensors: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let store_len = store.len();
        let err = grad_check(
            &tensors,
            &|tape, vars| {
                let bound =
                    Bound::from_pairs(store_len, ids.iter().copied().zip(vars.iter().copied()));
                let (_, h_proj) = skeleton_forward(tape, &bound, &layout, &cfg, &volume)?;
                ops::mean_all(ops::sigmoid(h_proj)?)
            },
            &settings(seed ^ 6, 10),
        )?;
        checks.push(SuiteCheck {
            name: "skeleton/forward-head".into(),
            max_rel_err: err,
            tolerance: COMPOSITE_TOLERANCE,
        });
    }

    // ── Visual: two unfrozen blocks plus projection ──────────────────
    {
        let cfg = VitConfig {
            image_size: 32,
            patch_size: 16,
            channels: 3,
            width: 16,
            depth: 4,
            heads: 2,
            proj_dim: 8,
            frozen_prefix: 2,
        };
        let mut store = ParamStore::new();
        let layout = VitLayout::build(&mut store, &cfg, &mut rng)?;
        let frame: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let prefix = prefix_tokens(&store, &layout, &cfg, &frame)?;
        let ids = store.trainable_ids();
        let tensors: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let store_len = store.len();
        let err = grad_check(
            &tensors,
            &|tape, vars| {
                let bound =
                    Bound::from_pairs(store_len, ids.iter().copied().zip(vars.iter().copied()));
                let tokens = suffix_forward(tape, &bound, &layout, &cfg, &prefix)?;
                let projected = project_tokens(tokens.final_tokens, bound.var(layout.proj))?;
                ops::mean_all(ops::sigmoid(projected)?)
            },
            &settings(seed ^ 7, 8),
        )?;
        checks.push(SuiteCheck {
            name: "visual/unfrozen-blocks-projection".into(),
            max_rel_err: err,
            tolerance: COMPOSITE_TOLERANCE,
        });
    }

    // ── Fusion + classifier ──────────────────────────────────────────
    {
        let d = 6;
        let n = 10;
        let mut store = ParamStore::new();
        let layout = FusionLayout::build(&mut store, d, false, &mut rng);
        let head = HeadLayout::build(&mut store, d, d, 4, &mut rng);
        let finals: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let penult: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let relevance: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let ids = store.trainable_ids();
        let mut tensors: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        // The pose descriptor participates as a differentiable input.
        tensors.push(rand_tensor(&[d], &mut rng, 1.0));
        let store_len = store.len();
        let flags = FusionFlags::default();
        let err = grad_check(
            &tensors,
            &|tape, vars| {
                let pose = *vars.last().expect("pose var");
                let pose = if corrupt { corrupted_sigmoid(pose)? } else { pose };
                let bound = Bound::from_pairs(
                    store_len,
                    ids.iter().copied().zip(vars[..vars.len() - 1].iter().copied()),
                );
                let inputs = FusionInputs {
                    final_patches: tape.constant(finals.clone(), vec![n, d])?,
                    penult_patches: tape.constant(penult.clone(), vec![n, d])?,
                    pose_proj: Some(pose),
                    relevance: Some(relevance.clone()),
                };
                let (q_out, _) = fusion_forward(&bound, &layout, &flags, &inputs)?;
                let probs = classify(&bound, &head, q_out)?;
                batch_loss(&[probs], &[2])
            },
            &settings(seed ^ 8, 12),
        )?;
        checks.push(SuiteCheck {
            name: "fusion/forward-classifier".into(),
            max_rel_err: err,
            tolerance: COMPOSITE_TOLERANCE,
        });
    }

    // ── Full model on a 2-sample toy batch ───────────────────────────
    {
        let cfg = crate::model::ModelConfig {
            vit: VitConfig {
                image_size: 16,
                patch_size: 8,
                channels: 3,
                width: 16,
                depth: 2,
                heads: 2,
                proj_dim: 12,
                frozen_prefix: 0,
            },
            skeleton: SkeletonEncoderConfig {
                canvas: 8,
                sigma_px: 1.5,
                stage_channels: [2, 3, 4],
                identity_activation: false,
            },
            classes: 5,
            sigma_rel: 0.4,
            gate_mode: crate::fusion::GateMode::Literal,
            motion_weighting: false,
            learned_qkv: false,
            variant: Variant::Full,
        };
        let model = ClipMgModel::new(cfg.clone(), seed ^ 9)?;
        let clips: Vec<crate::model::ClipInput> = (0..2)
            .map(|i| synth_like_clip(seed ^ (10 + i), &cfg))
            .collect();
        let labels = [1usize, 3];
        let ids = model.store.trainable_ids();
        let tensors: Vec<Tensor> = ids.iter().map(|&id| model.store.get(id).clone()).collect();
        let store_len = model.store.len();
        let err = grad_check(
            &tensors,
            &|tape, vars| {
                let bound =
                    Bound::from_pairs(store_len, ids.iter().copied().zip(vars.iter().copied()));
                let probs: Vec<_> = clips
                    .iter()
                    .map(|clip| Ok(model_forward(tape, &model, &bound, clip, None)?.probs))
                    .collect::<Result<_>>()?;
                batch_loss(&probs, &labels)
            },
            &settings(seed ^ 11, 5),
        )?;
        checks.push(SuiteCheck {
            name: "model/full-two-sample-batch".into(),
            max_rel_err: err,
            tolerance: COMPOSITE_TOLERANCE,
        });
    }

    Ok(checks)
}

fn synth_like_clip(seed: u64, cfg: &crate::model::ModelConfig) -> crate::model::ClipInput {
    use crate::pose::{Joint, Skeleton, JOINT_COUNT};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.vit.image_size;
    let frames: Vec<Vec<f64>> = (0..12)
        .map(|_| {
            (0..s * s * cfg.vit.channels)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect()
        })
        .collect();
    let pose_frames: Vec<Skeleton> = (0..36)
        .map(|_| Skeleton {
            joints: (0..JOINT_COUNT)
                .map(|_| Joint {
                    x: rng.gen_range(0.1..0.9),
                    y: rng.gen_range(0.1..0.9),
                    confidence: 1.0,
                })
                .collect(),
        })
        .collect();
    crate::model::ClipInput {
        frames,
        pose: crate::pose::RawPoseClip {
            id: format!("gc-{seed}"),
            label: None,
            source_fps: None,
            frames: pose_frames,
        },
    }
}
