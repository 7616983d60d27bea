//! ViT-style visual tower: patch embedding, pre-norm transformer blocks,
//! CLS + patch tokens per frame, partial freezing of the bottom blocks,
//! and a shared linear projection into the fusion dimension.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ops, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pose::{patch_center_grid, uniform_sample_indices, RGB_FRAMES};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Internal transformer width.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Shared projection dimension D.
    pub proj_dim: usize,
    /// Blocks frozen from the bottom; the embedding layer freezes with them.
    pub frozen_prefix: usize,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.depth < 2 {
            return Err(Error::config("depth must be at least 2"));
        }
        if self.frozen_prefix > self.depth {
            return Err(Error::config(format!(
                "frozen prefix {} exceeds depth {}",
                self.frozen_prefix, self.depth
            )));
        }
        if self.frozen_prefix + 1 > self.depth {
            return Err(Error::config(
                "at least the final block must stay trainable (penultimate tokens feed fusion)",
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch token count P.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// P + 1 (CLS).
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch_centers(&self) -> Vec<(f64, f64)> {
        patch_center_grid(self.grid())
    }
}

#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wqkv: ParamId,
    pub bqkv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct VitLayout {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockLayout>,
    pub ln_f_g: ParamId,
    pub ln_f_b: ParamId,
    /// Shared projection applied to every token (CLS and patches, final and
    /// penultimate) so fusion operates in one D-dimensional space.
    pub proj: ParamId,
}

impl VitLayout {
    pub fn build(store: &mut ParamStore, cfg: &VitConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let embed_trainable = cfg.frozen_prefix == 0;
        let mark = |t: Tensor, trainable: bool| if trainable { t.trainable() } else { t };

        let embed_w = store.add(
            "visual.embed.w",
            mark(
                Tensor::kaiming_uniform(&[cfg.patch_dim(), w], cfg.patch_dim(), rng),
                embed_trainable,
            ),
        );
        let embed_b = store.add(
            "visual.embed.b",
            mark(Tensor::zeros(&[w]), embed_trainable),
        );
        let cls = store.add(
            "visual.cls",
            mark(Tensor::uniform(&[w], 0.02, rng), embed_trainable),
        );
        let pos = store.add(
            "visual.pos",
            mark(Tensor::uniform(&[cfg.tokens(), w], 0.02, rng), embed_trainable),
        );

        let ones = |n: usize| Tensor::new(vec![1.0; n], vec![n]).expect("ones");
        // Residual-branch outputs are scaled down by 1/sqrt(2·depth) so the
        // stream stays near the embedded tokens at init; without this the
        // random blocks swamp the patch content.
        let residual_scale = 1.0 / (2.0 * cfg.depth as f64).sqrt();
        let scaled = |mut t: Tensor| {
            t.data.iter_mut().for_each(|v| *v *= residual_scale);
            t
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let trainable = i >= cfg.frozen_prefix;
            let p = format!("visual.block{i}");
            blocks.push(BlockLayout {
                ln1_g: store.add(format!("{p}.ln1.g"), mark(ones(w), trainable)),
                ln1_b: store.add(format!("{p}.ln1.b"), mark(Tensor::zeros(&[w]), trainable)),
                wqkv: store.add(
                    format!("{p}.attn.wqkv"),
                    mark(Tensor::kaiming_uniform(&[w, 3 * w], w, rng), trainable),
                ),
                bqkv: store.add(
                    format!("{p}.attn.bqkv"),
                    mark(Tensor::zeros(&[3 * w]), trainable),
                ),
                wo: store.add(
                    format!("{p}.attn.wo"),
                    mark(scaled(Tensor::kaiming_uniform(&[w, w], w, rng)), trainable),
                ),
                bo: store.add(format!("{p}.attn.bo"), mark(Tensor::zeros(&[w]), trainable)),
                ln2_g: store.add(format!("{p}.ln2.g"), mark(ones(w), trainable)),
                ln2_b: store.add(format!("{p}.ln2.b"), mark(Tensor::zeros(&[w]), trainable)),
                w1: store.add(
                    format!("{p}.mlp.w1"),
                    mark(Tensor::kaiming_uniform(&[w, 4 * w], w, rng), trainable),
                ),
                b1: store.add(
                    format!("{p}.mlp.b1"),
                    mark(Tensor::zeros(&[4 * w]), trainable),
                ),
                w2: store.add(
                    format!("{p}.mlp.w2"),
                    mark(scaled(Tensor::kaiming_uniform(&[4 * w, w], 4 * w, rng)), trainable),
                ),
                b2: store.add(format!("{p}.mlp.b2"), mark(Tensor::zeros(&[w]), trainable)),
            });
        }
        let ln_f_g = store.add("visual.ln_f.g", ones(w).trainable());
        let ln_f_b = store.add("visual.ln_f.b", Tensor::zeros(&[w]).trainable());
        let proj = store.add(
            "visual.proj",
            Tensor::kaiming_uniform(&[w, cfg.proj_dim], w, rng).trainable(),
        );
        Ok(VitLayout {
            embed_w,
            embed_b,
            cls,
            pos,
            blocks,
            ln_f_g,
            ln_f_b,
            proj,
        })
    }
}

/// Uniform temporal sampling of RGB frames (same floor formula as pose
/// sampling).
pub fn sample_rgb_frames<T: Clone>(frames: &[T]) -> Result<Vec<T>> {
    let idx = uniform_sample_indices(frames.len(), RGB_FRAMES)?;
    Ok(idx.into_iter().map(|i| frames[i].clone()).collect())
}

/// Extract row-major patches from an H×W×C frame: P × patch_dim.
pub fn patchify(frame: &[f64], cfg: &VitConfig) -> Result<Vec<f64>> {
    let (s, p, ch) = (cfg.image_size, cfg.patch_size, cfg.channels);
    if frame.len() != s * s * ch {
        return Err(Error::config(format!(
            "frame has {} values, config expects {}x{}x{}",
            frame.len(),
            s,
            s,
            ch
        )));
    }
    let grid = cfg.grid();
    let mut out = Vec::with_capacity(cfg.patches() * cfg.patch_dim());
    for pr in 0..grid {
        for pc in 0..grid {
            for y in 0..p {
                for x in 0..p {
                    let row = pr * p + y;
                    let col = pc * p + x;
                    let base = (row * s + col) * ch;
                    out.extend_from_slice(&frame[base..base + ch]);
                }
            }
        }
    }
    Ok(out)
}

fn embed_tokens<'t>(
    cfg: &VitConfig,
    patches: Var<'t>,
    embed_w: Var<'t>,
    embed_b: Var<'t>,
    cls: Var<'t>,
    pos: Var<'t>,
) -> Result<Var<'t>> {
    let embedded = ops::add_bias(ops::matmul(patches, embed_w)?, embed_b)?;
    let cls_row = ops::reshape(cls, vec![1, cfg.width])?;
    let tokens = ops::concat_rows(&[cls_row, embedded])?;
    ops::add(tokens, pos)
}

/// One pre-norm transformer block.
pub fn block_forward<'t>(
    bound: &Bound<'t>,
    block: &BlockLayout,
    cfg: &VitConfig,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let w = cfg.width;
    let dh = w / cfg.heads;
    let h = ops::layer_norm(x, bound.var(block.ln1_g), bound.var(block.ln1_b), 1e-6)?;
    let qkv = ops::add_bias(ops::matmul(h, bound.var(block.wqkv))?, bound.var(block.bqkv))?;
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let q = ops::slice_cols(qkv, i * dh, dh)?;
        let k = ops::slice_cols(qkv, w + i * dh, dh)?;
        let v = ops::slice_cols(qkv, 2 * w + i * dh, dh)?;
        let scores = ops::scale(ops::matmul(q, ops::transpose(k)?)?, 1.0 / (dh as f64).sqrt())?;
        let attn = ops::softmax(scores)?;
        head_outputs.push(ops::matmul(attn, v)?);
    }
    let ctx = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        ops::concat_cols(&head_outputs)?
    };
    let attn_out = ops::add_bias(ops::matmul(ctx, bound.var(block.wo))?, bound.var(block.bo))?;
    let x = ops::add(x, attn_out)?;
    let h2 = ops::layer_norm(x, bound.var(block.ln2_g), bound.var(block.ln2_b), 1e-6)?;
    let m = ops::gelu(ops::add_bias(ops::matmul(h2, bound.var(block.w1))?, bound.var(block.b1))?)?;
    let m = ops::add_bias(ops::matmul(m, bound.var(block.w2))?, bound.var(block.b2))?;
    ops::add(x, m)
}

/// Run the frozen bottom of the tower (embedding plus the first
/// `frozen_prefix` blocks) off-tape and return the boundary activations.
/// With nothing frozen this is just the raw patchification; gradients then
/// flow through the embedding too.
pub fn prefix_tokens(
    store: &ParamStore,
    layout: &VitLayout,
    cfg: &VitConfig,
    frame: &[f64],
) -> Result<Vec<f64>> {
    let patches = patchify(frame, cfg)?;
    if cfg.frozen_prefix == 0 {
        return Ok(patches);
    }
    let tape = Tape::no_grad();
    let bound = bind_prefix(&tape, store, layout, cfg)?;
    let patches = tape.constant(patches, vec![cfg.patches(), cfg.patch_dim()])?;
    let mut x = embed_tokens(
        cfg,
        patches,
        bound.var(layout.embed_w),
        bound.var(layout.embed_b),
        bound.var(layout.cls),
        bound.var(layout.pos),
    )?;
    for block in &layout.blocks[..cfg.frozen_prefix] {
        x = block_forward(&bound, block, cfg, x)?;
    }
    Ok(x.data())
}

/// Bind only the frozen-prefix parameters onto an ephemeral tape.
fn bind_prefix<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    layout: &VitLayout,
    cfg: &VitConfig,
) -> Result<Bound<'t>> {
    let mut ids = vec![layout.embed_w, layout.embed_b, layout.cls, layout.pos];
    for block in &layout.blocks[..cfg.frozen_prefix] {
        ids.extend_from_slice(&[
            block.ln1_g, block.ln1_b, block.wqkv, block.bqkv, block.wo, block.bo,
            block.ln2_g, block.ln2_b, block.w1, block.b1, block.w2, block.b2,
        ]);
    }
    Bound::bind_ids(tape, store, &ids)
}

/// Final and penultimate token matrices for one frame (each (P+1) × width).
pub struct FrameTokens<'t> {
    pub final_tokens: Var<'t>,
    pub penult_tokens: Var<'t>,
}

/// Run the trainable top of the tower on the caller's tape, starting from
/// cached prefix activations.
pub fn suffix_forward<'t>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    layout: &VitLayout,
    cfg: &VitConfig,
    prefix: &[f64],
) -> Result<FrameTokens<'t>> {
    let mut x = if cfg.frozen_prefix == 0 {
        let patches = tape.constant(prefix.to_vec(), vec![cfg.patches(), cfg.patch_dim()])?;
        embed_tokens(
            cfg,
            patches,
            bound.var(layout.embed_w),
            bound.var(layout.embed_b),
            bound.var(layout.cls),
            bound.var(layout.pos),
        )?
    } else {
        tape.constant(prefix.to_vec(), vec![cfg.tokens(), cfg.width])?
    };
    let mut penult = x;
    for (i, block) in layout.blocks.iter().enumerate().skip(cfg.frozen_prefix) {
        if i == cfg.depth - 1 {
            penult = x;
        }
        x = block_forward(bound, block, cfg, x)?;
    }
    let final_tokens = ops::layer_norm(x, bound.var(layout.ln_f_g), bound.var(layout.ln_f_b), 1e-6)?;
    Ok(FrameTokens {
        final_tokens,
        penult_tokens: penult,
    })
}

/// Full per-frame forward: frozen prefix off-tape, trainable suffix on-tape.
pub fn vit_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    bound: &Bound<'t>,
    layout: &VitLayout,
    cfg: &VitConfig,
    frames: &[Vec<f64>],
) -> Result<Vec<FrameTokens<'t>>> {
    if frames.len() != RGB_FRAMES {
        return Err(Error::contract(format!(
            "vit_forward expects {RGB_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    frames
        .iter()
        .map(|f| {
            let prefix = prefix_tokens(store, layout, cfg, f)?;
            suffix_forward(tape, bound, layout, cfg, &prefix)
        })
        .collect()
}

/// Project token rows into the shared D-dimensional space. The projection
/// has no bias, so it is exactly linear.
pub fn project_tokens<'t>(tokens: Var<'t>, proj: Var<'t>) -> Result<Var<'t>> {
    ops::matmul(tokens, proj)
}

/// Average the per-frame projected CLS tokens into one clip vector.
pub fn pool_cls<'t>(cls_rows: &[Var<'t>]) -> Result<Var<'t>> {
    if cls_rows.is_empty() {
        return Err(Error::contract("pool_cls: no CLS tokens"));
    }
    let stacked = ops::concat_rows(cls_rows)?;
    ops::col_mean(stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_cfg() -> VitConfig {
        VitConfig {
            image_size: 64,
            patch_size: 16,
            channels: 3,
            width: 64,
            depth: 4,
            heads: 4,
            proj_dim: 32,
            frozen_prefix: 2,
        }
    }

    fn build(cfg: &VitConfig, seed: u64) -> (ParamStore, VitLayout) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = VitLayout::build(&mut store, cfg, &mut rng).unwrap();
        (store, layout)
    }

    fn gradient_frame(cfg: &VitConfig, phase: f64) -> Vec<f64> {
        let s = cfg.image_size;
        (0..s * s * cfg.channels)
            .map(|i| (0.3 + 0.7 * ((i as f64 * 0.013 + phase).sin() * 0.5 + 0.5)) * 0.9)
            .collect()
    }

    #[test]
    fn paper_profile_token_arithmetic() {
        let cfg = VitConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            width: 768,
            depth: 12,
            heads: 12,
            proj_dim: 512,
            frozen_prefix: 10,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.patches(), 196);
        assert_eq!(cfg.tokens(), 197);
    }

    #[test]
    fn toy_profile_has_17_tokens_of_width_64() {
        let cfg = toy_cfg();
        let (store, layout) = build(&cfg, 11);
        assert_eq!(cfg.tokens(), 17);
        let tape = Tape::no_grad();
        let bound = store.bind(&tape).unwrap();
        let frame = gradient_frame(&cfg, 0.0);
        let prefix = prefix_tokens(&store, &layout, &cfg, &frame).unwrap();
        assert_eq!(prefix.len(), 17 * 64);
        let tokens = suffix_forward(&tape, &bound, &layout, &cfg, &prefix).unwrap();
        assert_eq!(tokens.final_tokens.shape(), vec![17, 64]);
        assert_eq!(tokens.penult_tokens.shape(), vec![17, 64]);
    }

    #[test]
    fn identical_frames_give_identical_tokens() {
        let cfg = toy_cfg();
        let (store, layout) = build(&cfg, 12);
        let tape = Tape::no_grad();
        let bound = store.bind(&tape).unwrap();
        let frame = gradient_frame(&cfg, 1.0);
        let frames = vec![frame; RGB_FRAMES];
        let tokens = vit_forward(&tape, &store, &bound, &layout, &cfg, &frames).unwrap();
        let first = tokens[0].final_tokens.data();
        for t in &tokens[1..] {
            assert_eq!(t.final_tokens.data(), first);
        }
    }

    #[test]
    fn frame_size_mismatch_is_config_error() {
        let cfg = toy_cfg();
        let (store, layout) = build(&cfg, 13);
        let err = prefix_tokens(&store, &layout, &cfg, &vec![0.0; 10]);
        assert!(err.is_err());
    }

    #[test]
    fn frozen_prefix_params_are_not_trainable() {
        let cfg = toy_cfg();
        let (store, layout) = build(&cfg, 14);
        assert!(!store.get(layout.embed_w).requires_grad);
        assert!(!store.get(layout.blocks[0].wqkv).requires_grad);
        assert!(!store.get(layout.blocks[1].w2).requires_grad);
        assert!(store.get(layout.blocks[2].wqkv).requires_grad);
        assert!(store.get(layout.blocks[3].w1).requires_grad);
        assert!(store.get(layout.proj).requires_grad);
    }

    #[test]
    fn frozen_param_changes_loss_but_gets_exactly_zero_gradient() {
        let cfg = toy_cfg();
        let (mut store, layout) = build(&cfg, 15);
        let frame = gradient_frame(&cfg, 2.0);
        let loss_of = |store: &ParamStore| -> f64 {
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let prefix = prefix_tokens(store, &layout, &cfg, &frame).unwrap();
            let tokens = suffix_forward(&tape, &bound, &layout, &cfg, &prefix).unwrap();
            let loss = ops::mean_all(ops::sigmoid(tokens.final_tokens).unwrap()).unwrap();
            loss.scalar()
        };
        let base = loss_of(&store);

        // The analytic gradient never reaches frozen parameters: they are
        // not bound to the training tape at all.
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        assert!(bound.get(layout.blocks[0].wqkv).is_none());
        assert!(bound.get(layout.embed_w).is_none());
        let prefix = prefix_tokens(&store, &layout, &cfg, &frame).unwrap();
        let tokens = suffix_forward(&tape, &bound, &layout, &cfg, &prefix).unwrap();
        let loss = ops::mean_all(ops::sigmoid(tokens.final_tokens).unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.of(bound.var(layout.blocks[2].wqkv)).is_some());

        // Yet the loss genuinely depends on the frozen parameter.
        let t = store.get_mut(layout.blocks[0].wqkv);
        t.data[7] += 0.05;
        let perturbed = loss_of(&store);
        assert!((perturbed - base).abs() > 1e-9, "frozen block is dead code");
    }

    #[test]
    fn projection_is_linear_and_identity_preserving() {
        let cfg = toy_cfg();
        let tape = Tape::no_grad();
        let mut eye = vec![0.0; 64 * 64];
        for i in 0..64 {
            eye[i * 64 + i] = 1.0;
        }
        let proj = tape.constant(eye, vec![64, 64]).unwrap();
        let toks = tape
            .constant((0..2 * 64).map(|i| i as f64 * 0.01).collect(), vec![2, 64])
            .unwrap();
        let projected = project_tokens(toks, proj).unwrap();
        assert_eq!(projected.data(), toks.data());

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w = Tensor::kaiming_uniform(&[64, cfg.proj_dim], 64, &mut rng);
        let wv = tape.constant(w.data.clone(), w.shape.clone()).unwrap();
        let a = tape
            .constant((0..64).map(|i| (i as f64).sin()).collect(), vec![1, 64])
            .unwrap();
        let b = tape
            .constant((0..64).map(|i| (i as f64).cos()).collect(), vec![1, 64])
            .unwrap();
        let sum = ops::add(a, b).unwrap();
        let lhs = project_tokens(sum, wv).unwrap().data();
        let pa = project_tokens(a, wv).unwrap().data();
        let pb = project_tokens(b, wv).unwrap().data();
        for (l, (x, y)) in lhs.iter().zip(pa.iter().zip(&pb)) {
            assert!((l - (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_cls_matches_direct_mean() {
        let tape = Tape::no_grad();
        let v = tape
            .constant(vec![1.0, 2.0, 3.0, 4.0], vec![1, 4])
            .unwrap();
        let same = pool_cls(&[v, v]).unwrap();
        assert_eq!(same.data(), vec![1.0, 2.0, 3.0, 4.0]);

        let neg = ops::scale(v, -1.0).unwrap();
        let zero = pool_cls(&[v, neg]).unwrap();
        assert!(zero.data().iter().all(|x| *x == 0.0));

        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let vars: Vec<Var<'_>> = rows
            .iter()
            .map(|r| tape.constant(r.clone(), vec![1, 4]).unwrap())
            .collect();
        let pooled = pool_cls(&vars).unwrap().data();
        for c in 0..4 {
            let want: f64 = rows.iter().map(|r| r[c]).sum::<f64>() / 8.0;
            assert!((pooled[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rgb_sampling_follows_floor_formula() {
        let frames: Vec<usize> = (0..8).collect();
        assert_eq!(sample_rgb_frames(&frames).unwrap(), frames);
        let frames: Vec<usize> = (0..16).collect();
        assert_eq!(
            sample_rgb_frames(&frames).unwrap(),
            vec![0, 2, 4, 6, 8, 10, 12, 14]
        );
        let frames: Vec<usize> = (0..3).collect();
        let want: Vec<usize> = (0..8).map(|i| i * 3 / 8).collect();
        assert_eq!(sample_rgb_frames(&frames).unwrap(), want);
        let empty: Vec<usize> = vec![];
        assert!(sample_rgb_frames(&empty).is_err());
    }
}
