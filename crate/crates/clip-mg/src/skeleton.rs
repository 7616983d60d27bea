//! Heatmap-volume skeleton encoder: three 3×3×3 conv stages with spatial-only
//! downsampling, global average pooling to the clip descriptor, and a linear
//! projection into the shared fusion dimension.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{conv3d, ops, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pose::HeatmapVolume;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonEncoderConfig {
    /// Square heatmap canvas edge (pixels).
    pub canvas: usize,
    /// Gaussian radius in pixels.
    pub sigma_px: f64,
    /// Output channels of the three conv stages.
    pub stage_channels: [usize; 3],
    /// Replace GELU with identity (linearity tests only).
    #[serde(default)]
    pub identity_activation: bool,
}

impl SkeletonEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 8 {
            return Err(Error::config(format!(
                "skeleton canvas {} too small for three spatial halvings (need >= 8)",
                self.canvas
            )));
        }
        if self.sigma_px <= 0.0 {
            return Err(Error::config("skeleton sigma_px must be positive"));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("skeleton stage channels must be positive"));
        }
        Ok(())
    }

    /// Spatial extents before each stage and after the last:
    /// canvas → s1 → s2 → s3 under stride-2, pad-1, kernel-3 arithmetic.
    pub fn spatial_progression(&self) -> [usize; 4] {
        let halve = |s: usize| (s + 2 - 3) / 2 + 1;
        let s1 = halve(self.canvas);
        let s2 = halve(s1);
        let s3 = halve(s2);
        [self.canvas, s1, s2, s3]
    }

    /// Dimension of the pooled clip descriptor h_p.
    pub fn descriptor_dim(&self) -> usize {
        self.stage_channels[2]
    }
}

#[derive(Debug, Clone)]
pub struct SkeletonLayout {
    pub stages: Vec<ConvStage>,
    /// Projection of the pooled descriptor into the fusion dimension D.
    pub wp: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvStage {
    pub kernels: ParamId,
    pub bias: ParamId,
}

impl SkeletonLayout {
    pub fn build(
        store: &mut ParamStore,
        cfg: &SkeletonEncoderConfig,
        in_channels: usize,
        proj_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(3);
        let mut c_in = in_channels;
        for (i, &c_out) in cfg.stage_channels.iter().enumerate() {
            let fan_in = c_in * 27;
            let kernels = store.add(
                format!("skeleton.stage{i}.kernels"),
                Tensor::kaiming_uniform(&[c_out, c_in, 3, 3, 3], fan_in, rng).trainable(),
            );
            let bias = store.add(
                format!("skeleton.stage{i}.bias"),
                Tensor::zeros(&[c_out]).trainable(),
            );
            stages.push(ConvStage { kernels, bias });
            c_in = c_out;
        }
        let wp = store.add(
            "skeleton.wp",
            Tensor::kaiming_uniform(&[proj_dim, c_in], c_in, rng).trainable(),
        );
        Ok(SkeletonLayout { stages, wp })
    }
}

/// Encode a heatmap volume: conv → bias → activation per stage (stride 1 in
/// time, 2 in space), global average pool over (T, H, W), then project.
/// Returns (h_p, h̃_p) — the pooled descriptor and its D-dim projection.
pub fn skeleton_forward<'t>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    layout: &SkeletonLayout,
    cfg: &SkeletonEncoderConfig,
    volume: &HeatmapVolume,
) -> Result<(Var<'t>, Var<'t>)> {
    if volume.height != cfg.canvas || volume.width != cfg.canvas {
        return Err(Error::config(format!(
            "volume canvas {}x{} does not match encoder canvas {}",
            volume.height, volume.width, cfg.canvas
        )));
    }
    // Joints become input channels: [T, J, H, W] → [J, T, H, W].
    let (t_len, joints) = (volume.frames, volume.joints);
    let plane = volume.height * volume.width;
    let mut reordered = vec![0.0; volume.data.len()];
    for t in 0..t_len {
        for j in 0..joints {
            let src = (t * joints + j) * plane;
            let dst = (j * t_len + t) * plane;
            reordered[dst..dst + plane].copy_from_slice(&volume.data[src..src + plane]);
        }
    }
    let mut x = tape.constant(reordered, vec![joints, t_len, volume.height, volume.width])?;
    for stage in &layout.stages {
        let conv = conv3d(x, bound.var(stage.kernels), (1, 2, 2))?;
        let sh = conv.shape();
        debug_assert_eq!(sh[1], t_len, "temporal extent must be preserved");
        let (c, rest) = (sh[0], sh[1] * sh[2] * sh[3]);
        let flat = ops::reshape(conv, vec![c, rest])?;
        let biased = ops::add_bias_per_row(flat, bound.var(stage.bias))?;
        let activated = if cfg.identity_activation {
            biased
        } else {
            ops::gelu(biased)?
        };
        x = ops::reshape(activated, sh)?;
    }
    let sh = x.shape();
    let flat = ops::reshape(x, vec![sh[0], sh[1] * sh[2] * sh[3]])?;
    let h_p = ops::row_mean(flat)?;
    let col = ops::reshape(h_p, vec![sh[0], 1])?;
    let projected = ops::matmul(bound.var(layout.wp), col)?;
    let proj_dim = projected.shape()[0];
    let h_proj = ops::reshape(projected, vec![proj_dim])?;
    Ok((h_p, h_proj))
}
