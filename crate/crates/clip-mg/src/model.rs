//! Full network assembly: the ablation variants, classification head, and
//! cross-entropy objective.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    cross_attention, fusion_forward, FusionFlags, FusionInputs, FusionLayout, FusionState,
    GateMode,
};
use crate::numeric::{ops, Tape, Tensor, Var};
use crate::params::{read_checkpoint, write_checkpoint, Bound, ParamId, ParamStore};
use crate::pose::{
    patch_relevance, rasterize, sample_pose_frames, temporal_windows, RawPoseClip, JOINT_COUNT,
};
use crate::skeleton::{skeleton_forward, SkeletonEncoderConfig, SkeletonLayout};
use crate::visual::{
    pool_cls, prefix_tokens, project_tokens, sample_rgb_frames, suffix_forward, VitConfig,
    VitLayout,
};

/// One mechanism removed per variant; rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPoseBranch,
    NoPoseGuidance,
    NoCrossAttention,
    NoGatedFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPoseBranch,
        Variant::NoPoseGuidance,
        Variant::NoCrossAttention,
        Variant::NoGatedFusion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPoseBranch => "no_pose_branch",
            Variant::NoPoseGuidance => "no_pose_guidance",
            Variant::NoCrossAttention => "no_cross_attention",
            Variant::NoGatedFusion => "no_gated_fusion",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Variant::Full => "pose-guided query, gates, cross-attention",
            Variant::NoPoseBranch => "visual-only cross-attention, no pose input",
            Variant::NoPoseGuidance => "plain-mean query, gates retained",
            Variant::NoCrossAttention => "CLS mean concatenated with pose feature",
            Variant::NoGatedFusion => "pose query via concatenation, no gates",
        }
    }

    /// Fusion switches for the variants that run the standard fusion path.
    pub fn fusion_flags(&self, gate_mode: GateMode, motion: bool, learned_qkv: bool) -> FusionFlags {
        let (pose_guidance, alpha_gate, gating) = match self {
            Variant::Full => (true, true, true),
            Variant::NoPoseBranch => (false, false, false),
            Variant::NoPoseGuidance => (false, false, true),
            // These two bypass fusion_forward; flags are all-off placeholders.
            Variant::NoCrossAttention | Variant::NoGatedFusion => (false, false, false),
        };
        FusionFlags {
            pose_guidance,
            alpha_gate,
            gating,
            gate_mode,
            motion_weighting: motion && pose_guidance,
            learned_qkv,
        }
    }

    /// Whether the skeleton encoder runs at all.
    pub fn uses_pose(&self) -> bool {
        !matches!(self, Variant::NoPoseBranch)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub skeleton: SkeletonEncoderConfig,
    pub classes: usize,
    /// Spatial scale of patch relevance, normalized coordinates.
    pub sigma_rel: f64,
    pub gate_mode: GateMode,
    pub motion_weighting: bool,
    pub learned_qkv: bool,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.skeleton.validate()?;
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.sigma_rel <= 0.0 {
            return Err(Error::config("sigma_rel must be positive"));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.vit.proj_dim
    }
}

#[derive(Debug, Clone)]
pub struct HeadLayout {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_dim: usize,
}

impl HeadLayout {
    pub(crate) fn build(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        HeadLayout {
            w1: store.add(
                "head.w1",
                Tensor::kaiming_uniform(&[in_dim, hidden], in_dim, rng).trainable(),
            ),
            b1: store.add("head.b1", Tensor::zeros(&[hidden]).trainable()),
            w2: store.add(
                "head.w2",
                Tensor::kaiming_uniform(&[hidden, classes], hidden, rng).trainable(),
            ),
            b2: store.add("head.b2", Tensor::zeros(&[classes]).trainable()),
            in_dim,
        }
    }
}

/// The assembled network. The skeleton and fusion parameters exist in every
/// variant (unused mechanisms simply receive zero gradient), so checkpoint
/// layouts stay uniform for a given variant.
pub struct ClipMgModel {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub vit: VitLayout,
    pub skeleton: SkeletonLayout,
    pub fusion: FusionLayout,
    pub head: HeadLayout,
    /// Query projection for the concatenation variant: D × 2D.
    pub w_cat: Option<ParamId>,
}

impl ClipMgModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d();
        let vit = VitLayout::build(&mut store, &cfg.vit, &mut rng)?;
        let skeleton = SkeletonLayout::build(&mut store, &cfg.skeleton, JOINT_COUNT, d, &mut rng)?;
        let fusion = FusionLayout::build(&mut store, d, cfg.learned_qkv, &mut rng);
        let w_cat = matches!(cfg.variant, Variant::NoGatedFusion).then(|| {
            store.add(
                "fusion.w_cat",
                Tensor::kaiming_uniform(&[d, 2 * d], 2 * d, &mut rng).trainable(),
            )
        });
        let head_in = if matches!(cfg.variant, Variant::NoCrossAttention) {
            2 * d
        } else {
            d
        };
        let head = HeadLayout::build(&mut store, head_in, d, cfg.classes, &mut rng);
        Ok(ClipMgModel {
            cfg,
            seed,
            store,
            vit,
            skeleton,
            fusion,
            head,
            w_cat,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "model_config": self.cfg,
            "seed": self.seed,
        });
        write_checkpoint(path, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        let cfg: ModelConfig = serde_json::from_value(ckpt.meta["model_config"].clone())
            .map_err(|e| Error::parse(format!("checkpoint meta: {e}")))?;
        let seed = ckpt.meta["seed"].as_u64().unwrap_or(0);
        let mut model = ClipMgModel::new(cfg, seed)?;
        crate::params::load_into_store(&ckpt, &mut model.store)?;
        Ok(model)
    }
}

/// One raw sample: unsampled frames (H×W×C values in [0,1]) plus the raw
/// pose stream.
#[derive(Debug, Clone)]
pub struct ClipInput {
    pub frames: Vec<Vec<f64>>,
    pub pose: RawPoseClip,
}

pub struct ClipOutput<'t> {
    /// Class probabilities, shape [C].
    pub probs: Var<'t>,
    /// Recorded fusion intermediates; absent for the concat-head variant.
    pub fusion: Option<FusionState>,
}

/// Two affine layers with GELU between, then softmax.
pub fn classify<'t>(bound: &Bound<'t>, head: &HeadLayout, feature: Var<'t>) -> Result<Var<'t>> {
    let in_dim = feature.numel();
    if in_dim != head.in_dim {
        return Err(Error::Shape {
            op: "classify",
            lhs: vec![in_dim],
            rhs: vec![head.in_dim],
        });
    }
    let x = ops::reshape(feature, vec![1, in_dim])?;
    let h = ops::gelu(ops::add_bias(
        ops::matmul(x, bound.var(head.w1))?,
        bound.var(head.b1),
    )?)?;
    let logits = ops::add_bias(ops::matmul(h, bound.var(head.w2))?, bound.var(head.b2))?;
    let probs = ops::softmax(logits)?;
    let classes = probs.shape()[1];
    ops::reshape(probs, vec![classes])
}

/// Mean cross-entropy of a batch of probability rows against labels.
pub fn batch_loss<'t>(prob_rows: &[Var<'t>], labels: &[usize]) -> Result<Var<'t>> {
    if prob_rows.is_empty() || prob_rows.len() != labels.len() {
        return Err(Error::contract(format!(
            "batch_loss: {} probability rows vs {} labels",
            prob_rows.len(),
            labels.len()
        )));
    }
    let rows: Vec<Var<'t>> = prob_rows
        .iter()
        .map(|p| ops::reshape(*p, vec![1, p.numel()]))
        .collect::<Result<_>>()?;
    let stacked = ops::concat_rows(&rows)?;
    ops::nll_loss(stacked, labels)
}

/// Full pipeline for one clip under the model's variant. `prefix_cache`
/// supplies precomputed frozen-tower activations for the 8 sampled frames;
/// without it they are computed on the fly.
pub fn model_forward<'t>(
    tape: &'t Tape,
    model: &ClipMgModel,
    bound: &Bound<'t>,
    clip: &ClipInput,
    prefix_cache: Option<&[Vec<f64>]>,
) -> Result<ClipOutput<'t>> {
    let cfg = &model.cfg;
    let p = cfg.vit.patches();

    // Visual tower: frozen prefix off-tape (or cached), trainable suffix on-tape.
    let prefixes: Vec<Vec<f64>> = match prefix_cache {
        Some(cached) => cached.to_vec(),
        None => {
            let sampled = sample_rgb_frames(&clip.frames)?;
            sampled
                .iter()
                .map(|f| prefix_tokens(&model.store, &model.vit, &cfg.vit, f))
                .collect::<Result<_>>()?
        }
    };
    let mut final_patch_rows = Vec::with_capacity(prefixes.len());
    let mut penult_patch_rows = Vec::with_capacity(prefixes.len());
    let mut cls_rows = Vec::with_capacity(prefixes.len());
    for prefix in &prefixes {
        let tokens = suffix_forward(tape, bound, &model.vit, &cfg.vit, prefix)?;
        final_patch_rows.push(ops::slice_rows(tokens.final_tokens, 1, p)?);
        penult_patch_rows.push(ops::slice_rows(tokens.penult_tokens, 1, p)?);
        cls_rows.push(ops::slice_rows(tokens.final_tokens, 0, 1)?);
    }
    let proj = bound.var(model.vit.proj);
    let final_proj = project_tokens(ops::concat_rows(&final_patch_rows)?, proj)?;
    let penult_proj = project_tokens(ops::concat_rows(&penult_patch_rows)?, proj)?;

    // Pose branch.
    let pose_data = if cfg.variant.uses_pose() {
        let pose32 = sample_pose_frames(&clip.pose)?;
        let windows = temporal_windows(&pose32)?;
        let volume = rasterize(
            &pose32,
            (cfg.skeleton.canvas, cfg.skeleton.canvas),
            cfg.skeleton.sigma_px,
        )?;
        let (_, h_proj) = skeleton_forward(tape, bound, &model.skeleton, &cfg.skeleton, &volume)?;
        let relevance = patch_relevance(
            &windows,
            &cfg.vit.patch_centers(),
            cfg.sigma_rel,
            cfg.motion_weighting,
        )?;
        Some((h_proj, relevance))
    } else {
        None
    };

    let (feature, fusion_state) = match cfg.variant {
        Variant::Full | Variant::NoPoseGuidance | Variant::NoPoseBranch => {
            let flags = cfg
                .variant
                .fusion_flags(cfg.gate_mode, cfg.motion_weighting, cfg.learned_qkv);
            let (pose_proj, relevance) = match &pose_data {
                Some((h, r)) => (Some(*h), Some(r.clone())),
                None => (None, None),
            };
            let inputs = FusionInputs {
                final_patches: final_proj,
                penult_patches: penult_proj,
                pose_proj,
                relevance,
            };
            let (q_out, state) = fusion_forward(bound, &model.fusion, &flags, &inputs)?;
            (q_out, Some(state))
        }
        Variant::NoGatedFusion => {
            // Pose enters the query by concatenation instead of gating:
            // q_f = W_cat·[mean(z); h̃], attention over ungated tokens.
            let (h_proj, _) = pose_data.as_ref().expect("pose branch present");
            let d = cfg.d();
            let mean_token = ops::col_mean(final_proj)?;
            let cat = ops::concat_cols(&[
                ops::reshape(mean_token, vec![1, d])?,
                ops::reshape(*h_proj, vec![1, d])?,
            ])?;
            let w_cat = bound.var(model.w_cat.expect("concat variant has w_cat"));
            let q_f = ops::reshape(
                ops::matmul(w_cat, ops::reshape(cat, vec![2 * d, 1])?)?,
                vec![d],
            )?;
            let (q_out, attn) = cross_attention(q_f, penult_proj, None)?;
            let n = attn.numel();
            let state = FusionState {
                n_tokens: n,
                relevance: vec![1.0; n],
                alpha: None,
                gate_g: None,
                gate_u: None,
                query: mean_token.data(),
                fused_query: q_f.data(),
                attention: attn.data(),
                output: q_out.data(),
            };
            (q_out, Some(state))
        }
        Variant::NoCrossAttention => {
            // Late fusion: mean projected CLS ⊕ pose feature into the head.
            let (h_proj, _) = pose_data.as_ref().expect("pose branch present");
            let d = cfg.d();
            let cls_proj: Vec<Var<'t>> = cls_rows
                .iter()
                .map(|c| project_tokens(*c, proj))
                .collect::<Result<_>>()?;
            let pooled = pool_cls(&cls_proj)?;
            let cat = ops::concat_cols(&[
                ops::reshape(pooled, vec![1, d])?,
                ops::reshape(*h_proj, vec![1, d])?,
            ])?;
            (ops::reshape(cat, vec![2 * d])?, None)
        }
    };

    let probs = classify(bound, &model.head, feature)?;
    Ok(ClipOutput {
        probs,
        fusion: fusion_state,
    })
}

/// Forward-only convenience: probabilities and fusion state for one clip.
pub fn infer(model: &ClipMgModel, clip: &ClipInput) -> Result<(Vec<f64>, Option<FusionState>)> {
    let tape = Tape::no_grad();
    let bound = model.store.bind(&tape)?;
    let out = model_forward(&tape, model, &bound, clip, None)?;
    Ok((out.probs.data(), out.fusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{Joint, Skeleton};
    use rand::Rng;

    pub(crate) fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
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
            gate_mode: GateMode::Literal,
            motion_weighting: false,
            learned_qkv: false,
            variant,
        }
    }

    pub(crate) fn tiny_clip(seed: u64, cfg: &ModelConfig) -> ClipInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.vit.image_size;
        let frames: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                (0..s * s * cfg.vit.channels)
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect()
            })
            .collect();
        let pose_frames: Vec<Skeleton> = (0..40)
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
        ClipInput {
            frames,
            pose: RawPoseClip {
                id: format!("clip-{seed}"),
                label: Some(0),
                source_fps: None,
                frames: pose_frames,
            },
        }
    }

    #[test]
    fn zero_head_weights_give_uniform_distribution() {
        let cfg = tiny_config(Variant::Full);
        let c = cfg.classes;
        let mut model = ClipMgModel::new(cfg.clone(), 1).unwrap();
        for id in [model.head.w1, model.head.b1, model.head.w2, model.head.b2] {
            let t = model.store.get_mut(id);
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let clip = tiny_clip(10, &cfg);
        let (probs, _) = infer(&model, &clip).unwrap();
        for p in &probs {
            assert!((p - 1.0 / c as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_prediction_over_33_classes_has_ln33_loss() {
        let tape = Tape::new();
        let c = 33;
        let probs = tape.leaf(vec![1.0 / c as f64; c], vec![c]).unwrap();
        let loss = batch_loss(&[probs], &[7]).unwrap();
        assert!((loss.scalar() - (c as f64).ln()).abs() < 1e-12);
        assert!((loss.scalar() - 3.4965).abs() < 1e-4);
    }

    #[test]
    fn batch_loss_matches_per_sample_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let tape = Tape::new();
        let c = 6;
        let mut rows = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..4 {
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v = tape.constant(logits, vec![c]).unwrap();
            let p = ops::softmax(v).unwrap();
            raw.push(p.data());
            rows.push(p);
        }
        let labels = [2usize, 0, 5, 1];
        let loss = batch_loss(&rows, &labels).unwrap().scalar();
        let want: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -raw[i][y].ln())
            .sum::<f64>()
            / 4.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn full_variant_emits_probs_and_attention_of_the_right_widths() {
        let cfg = tiny_config(Variant::Full);
        let model = ClipMgModel::new(cfg.clone(), 2).unwrap();
        let clip = tiny_clip(11, &cfg);
        let (probs, fusion) = infer(&model, &clip).unwrap();
        assert_eq!(probs.len(), cfg.classes);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let state = fusion.unwrap();
        let n = 8 * cfg.vit.patches();
        assert_eq!(state.n_tokens, n);
        assert_eq!(state.attention.len(), n);
        let asum: f64 = state.attention.iter().sum();
        assert!((asum - 1.0).abs() < 1e-9);
        assert!(state.alpha.is_some() && state.gate_u.is_some());
    }

    #[test]
    fn concat_head_variant_has_double_width_input() {
        let cfg = tiny_config(Variant::NoCrossAttention);
        let model = ClipMgModel::new(cfg.clone(), 3).unwrap();
        assert_eq!(
            model.store.get(model.head.w1).shape,
            vec![2 * cfg.d(), cfg.d()]
        );
        let clip = tiny_clip(12, &cfg);
        let (probs, fusion) = infer(&model, &clip).unwrap();
        assert_eq!(probs.len(), cfg.classes);
        assert!(fusion.is_none());
    }

    #[test]
    fn identical_clips_give_identical_rows() {
        let cfg = tiny_config(Variant::Full);
        let model = ClipMgModel::new(cfg.clone(), 4).unwrap();
        let clip = tiny_clip(13, &cfg);
        let (a, _) = infer(&model, &clip).unwrap();
        let (b, _) = infer(&model, &clip).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_variant_forward_runs_and_is_distinct_configuration() {
        let mut seen = Vec::new();
        for variant in Variant::ALL {
            let cfg = tiny_config(variant);
            let model = ClipMgModel::new(cfg.clone(), 5).unwrap();
            let clip = tiny_clip(14, &cfg);
            let (probs, _) = infer(&model, &clip).unwrap();
            assert_eq!(probs.len(), cfg.classes, "{variant}");
            seen.push(variant.name());
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 5, "variants must be mutually distinct");
    }

    #[test]
    fn no_pose_branch_never_touches_skeleton_parameters() {
        let cfg = tiny_config(Variant::NoPoseBranch);
        let model = ClipMgModel::new(cfg.clone(), 6).unwrap();
        let clip = tiny_clip(15, &cfg);
        let tape = Tape::new();
        let bound = model.store.bind(&tape).unwrap();
        let out = model_forward(&tape, &model, &bound, &clip, None).unwrap();
        let loss = batch_loss(&[out.probs], &[1]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for stage in &model.skeleton.stages {
            assert!(grads.of(bound.var(stage.kernels)).is_none());
            assert!(grads.of(bound.var(stage.bias)).is_none());
        }
        assert!(grads.of(bound.var(model.skeleton.wp)).is_none());
        assert!(grads.of(bound.var(model.fusion.w_alpha)).is_none());
        // The visual path still trains.
        assert!(grads.of(bound.var(model.vit.proj)).is_some());
    }

    #[test]
    fn checkpoint_save_load_reproduces_predictions() {
        let cfg = tiny_config(Variant::Full);
        let model = ClipMgModel::new(cfg.clone(), 7).unwrap();
        let clip = tiny_clip(16, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let restored = ClipMgModel::load(&path).unwrap();
        assert_eq!(restored.cfg.classes, cfg.classes);

        // Quantize the original to f32 the way the checkpoint does, then
        // predictions must agree exactly.
        let mut quantized = ClipMgModel::new(cfg, 7).unwrap();
        for i in 0..quantized.store.len() {
            let id = ParamId(i);
            let data: Vec<f64> = model
                .store
                .get(id)
                .data
                .iter()
                .map(|v| *v as f32 as f64)
                .collect();
            quantized.store.get_mut(id).data = data;
        }
        let (a, _) = infer(&quantized, &clip).unwrap();
        let (b, _) = infer(&restored, &clip).unwrap();
        assert_eq!(a, b);
    }
}
