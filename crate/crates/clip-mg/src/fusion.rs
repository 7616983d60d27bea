//! Pose-guided semantic query generation, gated multimodal fusion, and
//! cross-attention with the fused query.
//!
//! Relevance weights (distance of each patch to the nearest joint) and the
//! alpha gate (pose/token alignment) concentrate the token pool; the pooled
//! query is gated against the pose descriptor and attends over the gated
//! penultimate tokens of all frames.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ops, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// How the query gate combines q with the pose feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// q⊙g + q⊙(1−g): algebraically the identity on q. Implemented as the
    /// exact (simplified) form; the gate vector is still computed and
    /// recorded for inspection.
    Literal,
    /// g⊙q + (1−g)⊙h̃: the minimal variant in which the gate is
    /// consequential.
    Convex,
}

impl FromStr for GateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(GateMode::Literal),
            "convex" => Ok(GateMode::Convex),
            other => Err(Error::config(format!(
                "unknown gate mode '{other}' (expected literal|convex)"
            ))),
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Literal => "literal",
            GateMode::Convex => "convex",
        })
    }
}

/// Ablation switches. Each Table-style variant is a fixed assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionFlags {
    /// Weight tokens by distance to the nearest joint when pooling.
    pub pose_guidance: bool,
    /// Scale each token by sigmoid(<W_a h̃, z>).
    pub alpha_gate: bool,
    /// Apply the query gate g and the key/value channel gate u.
    pub gating: bool,
    pub gate_mode: GateMode,
    /// Multiply relevance by per-window joint displacement.
    pub motion_weighting: bool,
    /// Pass Q/K/V through learned projections before attention.
    pub learned_qkv: bool,
}

impl Default for FusionFlags {
    fn default() -> Self {
        FusionFlags {
            pose_guidance: true,
            alpha_gate: true,
            gating: true,
            gate_mode: GateMode::Literal,
            motion_weighting: false,
            learned_qkv: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionLayout {
    pub w_alpha: ParamId,
    pub w_g: ParamId,
    pub w_u: ParamId,
    pub qkv: Option<(ParamId, ParamId, ParamId)>,
}

impl FusionLayout {
    pub fn build(
        store: &mut ParamStore,
        d: usize,
        learned_qkv: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w_alpha = store.add(
            "fusion.w_alpha",
            Tensor::kaiming_uniform(&[d, d], d, rng).trainable(),
        );
        let w_g = store.add(
            "fusion.w_g",
            Tensor::kaiming_uniform(&[d, d], d, rng).trainable(),
        );
        let w_u = store.add(
            "fusion.w_u",
            Tensor::kaiming_uniform(&[d, d], d, rng).trainable(),
        );
        let qkv = learned_qkv.then(|| {
            (
                store.add("fusion.wq", Tensor::kaiming_uniform(&[d, d], d, rng).trainable()),
                store.add("fusion.wk", Tensor::kaiming_uniform(&[d, d], d, rng).trainable()),
                store.add("fusion.wv", Tensor::kaiming_uniform(&[d, d], d, rng).trainable()),
            )
        });
        FusionLayout {
            w_alpha,
            w_g,
            w_u,
            qkv,
        }
    }
}

/// Recorded intermediates of one clip's fusion pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionState {
    pub n_tokens: usize,
    /// Relevance weights w, frame-major (T×P flattened).
    pub relevance: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    pub gate_g: Option<Vec<f64>>,
    pub gate_u: Option<Vec<f64>>,
    pub query: Vec<f64>,
    pub fused_query: Vec<f64>,
    pub attention: Vec<f64>,
    pub output: Vec<f64>,
}

impl FusionState {
    /// JSON manifest plus raw little-endian f32 binary of all blocks.
    pub fn write_dump(&self, base: &Path) -> Result<()> {
        let mut blocks: Vec<(&str, &[f64])> = vec![
            ("relevance", &self.relevance),
            ("query", &self.query),
            ("fused_query", &self.fused_query),
            ("attention", &self.attention),
            ("output", &self.output),
        ];
        if let Some(a) = &self.alpha {
            blocks.push(("alpha", a));
        }
        if let Some(g) = &self.gate_g {
            blocks.push(("gate_g", g));
        }
        if let Some(u) = &self.gate_u {
            blocks.push(("gate_u", u));
        }
        let mut bin = Vec::new();
        let mut manifest = Vec::new();
        for (name, data) in &blocks {
            manifest.push(serde_json::json!({
                "name": name,
                "len": data.len(),
                "offset": bin.len() / 4,
            }));
            for v in data.iter() {
                bin.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        std::fs::write(base.with_extension("bin"), bin)?;
        let json = serde_json::json!({
            "dtype": "f32le",
            "n_tokens": self.n_tokens,
            "blocks": manifest,
        });
        std::fs::write(base.with_extension("json"), serde_json::to_string_pretty(&json)?)?;
        Ok(())
    }
}

// ── Fusion operations ────────────────────────────────────────────────

/// Scale each token by α = sigmoid(<W_a·h̃, z_i>). Returns the gated tokens
/// and the alpha values.
pub fn token_gate_alpha<'t>(
    tokens: Var<'t>,
    pose_proj: Var<'t>,
    w_alpha: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let d = pose_proj.shape()[0];
    let direction = ops::matmul(w_alpha, ops::reshape(pose_proj, vec![d, 1])?)?;
    let logits = ops::matmul(tokens, direction)?;
    let n = logits.shape()[0];
    let alpha = ops::sigmoid(ops::reshape(logits, vec![n])?)?;
    let gated = ops::mul_col(tokens, alpha)?;
    Ok((gated, alpha))
}

/// Weighted mean pooling of tokens: q = Σ w_i z_i / Σ w_i. Weights come from
/// pose geometry and are constants on the tape.
pub fn semantic_query<'t>(tokens: Var<'t>, weights: &[f64]) -> Result<Var<'t>> {
    let sh = tokens.shape();
    if sh.len() != 2 || sh[0] != weights.len() {
        return Err(Error::Shape {
            op: "semantic_query",
            lhs: sh,
            rhs: vec![weights.len()],
        });
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::contract(
            "semantic_query: relevance weights sum to zero",
        ));
    }
    let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let wrow = tokens.tape.constant(normalized, vec![1, sh[0]])?;
    let q = ops::matmul(wrow, tokens)?;
    ops::reshape(q, vec![sh[1]])
}

/// Query gate g = sigmoid(W_g·h̃). In literal mode q⊙g + q⊙(1−g) reduces
/// exactly to q, so the query passes through unchanged (and the gate gets a
/// zero gradient, matching the formula's algebra); convex mode blends the
/// query with the pose feature.
pub fn fuse_query<'t>(
    query: Var<'t>,
    pose_proj: Var<'t>,
    w_g: Var<'t>,
    mode: GateMode,
) -> Result<(Var<'t>, Var<'t>)> {
    let d = pose_proj.shape()[0];
    let g_col = ops::matmul(w_g, ops::reshape(pose_proj, vec![d, 1])?)?;
    let g = ops::sigmoid(ops::reshape(g_col, vec![d])?)?;
    let fused = match mode {
        GateMode::Literal => query,
        GateMode::Convex => {
            let one_minus_g = ops::add_scalar(ops::scale(g, -1.0)?, 1.0)?;
            ops::add(ops::mul(g, query)?, ops::mul(one_minus_g, pose_proj)?)?
        }
    };
    Ok((fused, g))
}

/// Channel gate u = sigmoid(W_u·h̃) applied to every token row.
pub fn gate_tokens<'t>(
    tokens: Var<'t>,
    pose_proj: Var<'t>,
    w_u: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let d = pose_proj.shape()[0];
    let u_col = ops::matmul(w_u, ops::reshape(pose_proj, vec![d, 1])?)?;
    let u = ops::sigmoid(ops::reshape(u_col, vec![d])?)?;
    let gated = ops::mul_row(tokens, u)?;
    Ok((gated, u))
}

/// Single-head scaled dot-product attention with a single query row:
/// softmax(q·Kᵀ/√D)·V with K = V = the token set. Optional learned Q/K/V
/// projections.
pub fn cross_attention<'t>(
    query: Var<'t>,
    tokens: Var<'t>,
    learned: Option<(Var<'t>, Var<'t>, Var<'t>)>,
) -> Result<(Var<'t>, Var<'t>)> {
    let sh = tokens.shape();
    if sh.len() != 2 || sh[0] == 0 {
        return Err(Error::contract("cross_attention: empty token set"));
    }
    let (n, d) = (sh[0], sh[1]);
    if query.shape() != vec![d] {
        return Err(Error::Shape {
            op: "cross_attention",
            lhs: query.shape(),
            rhs: sh,
        });
    }
    let (q, k, v) = match learned {
        Some((wq, wk, wv)) => {
            let q = ops::reshape(
                ops::matmul(wq, ops::reshape(query, vec![d, 1])?)?,
                vec![d],
            )?;
            let k = ops::matmul(tokens, ops::transpose(wk)?)?;
            let v = ops::matmul(tokens, ops::transpose(wv)?)?;
            (q, k, v)
        }
        None => (query, tokens, tokens),
    };
    let scores = ops::matmul(k, ops::reshape(q, vec![d, 1])?)?;
    let scaled = ops::scale(ops::reshape(scores, vec![n])?, 1.0 / (d as f64).sqrt())?;
    let attn = ops::softmax(scaled)?;
    let out = ops::matmul(ops::reshape(attn, vec![1, n])?, v)?;
    Ok((ops::reshape(out, vec![d])?, attn))
}

/// Inputs to a fusion pass: projected token matrices plus the pose side.
pub struct FusionInputs<'t> {
    /// Final-layer patch tokens of all frames, N×D.
    pub final_patches: Var<'t>,
    /// Penultimate-layer patch tokens of all frames, N×D (keys/values).
    pub penult_patches: Var<'t>,
    /// Projected pose descriptor h̃; `None` when the pose branch is absent.
    pub pose_proj: Option<Var<'t>>,
    /// Relevance weights w (frame-major T×P), when pose guidance is active.
    pub relevance: Option<Vec<f64>>,
}

/// Compose relevance weighting, the alpha gate, weighted pooling, query
/// gating, token gating, and cross-attention according to the flags.
pub fn fusion_forward<'t>(
    bound: &Bound<'t>,
    layout: &FusionLayout,
    flags: &FusionFlags,
    inputs: &FusionInputs<'t>,
) -> Result<(Var<'t>, FusionState)> {
    let n = inputs.final_patches.shape()[0];
    let weights: Vec<f64> = match (&inputs.relevance, flags.pose_guidance) {
        (Some(w), true) => {
            if w.len() != n {
                return Err(Error::Shape {
                    op: "fusion_forward",
                    lhs: vec![w.len()],
                    rhs: vec![n],
                });
            }
            w.clone()
        }
        _ => vec![1.0; n],
    };

    let (pooled_tokens, alpha) = match (inputs.pose_proj, flags.alpha_gate) {
        (Some(pose), true) => {
            let (gated, alpha) =
                token_gate_alpha(inputs.final_patches, pose, bound.var(layout.w_alpha))?;
            (gated, Some(alpha))
        }
        _ => (inputs.final_patches, None),
    };

    let query = semantic_query(pooled_tokens, &weights)?;

    let (fused_query, gate_g) = match (inputs.pose_proj, flags.gating) {
        (Some(pose), true) => {
            let (fused, g) = fuse_query(query, pose, bound.var(layout.w_g), flags.gate_mode)?;
            (fused, Some(g))
        }
        _ => (query, None),
    };

    let (kv_tokens, gate_u) = match (inputs.pose_proj, flags.gating) {
        (Some(pose), true) => {
            let (gated, u) = gate_tokens(inputs.penult_patches, pose, bound.var(layout.w_u))?;
            (gated, Some(u))
        }
        _ => (inputs.penult_patches, None),
    };

    let learned = if flags.learned_qkv {
        layout
            .qkv
            .map(|(wq, wk, wv)| (bound.var(wq), bound.var(wk), bound.var(wv)))
    } else {
        None
    };
    let (output, attention) = cross_attention(fused_query, kv_tokens, learned)?;

    let state = FusionState {
        n_tokens: n,
        relevance: weights,
        alpha: alpha.map(|a| a.data()),
        gate_g: gate_g.map(|g| g.data()),
        gate_u: gate_u.map(|u| u.data()),
        query: query.data(),
        fused_query: fused_query.data(),
        attention: attention.data(),
        output: output.data(),
    };
    Ok((output, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;
    use rand::{Rng, SeedableRng};

    fn rand_mat<'t>(tape: &'t Tape, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Var<'t> {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.constant(data, vec![rows, cols]).unwrap()
    }

    fn rand_vec<'t>(tape: &'t Tape, n: usize, rng: &mut ChaCha8Rng) -> Var<'t> {
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.constant(data, vec![n]).unwrap()
    }

    #[test]
    fn alpha_gate_halves_orthogonal_tokens() {
        let tape = Tape::no_grad();
        // Identity W, pose along axis 0; token 0 orthogonal, token 1 aligned
        // with <Wh, z> = ln 3 so alpha = 0.75.
        let d = 4;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let w = tape.constant(eye, vec![d, d]).unwrap();
        let pose = tape.constant(vec![1.0, 0.0, 0.0, 0.0], vec![d]).unwrap();
        let tokens = tape
            .constant(
                vec![0.0, 2.0, 0.0, 0.0, 3.0_f64.ln(), 0.0, 1.0, 0.0],
                vec![2, d],
            )
            .unwrap();
        let (gated, alpha) = token_gate_alpha(tokens, pose, w).unwrap();
        let a = alpha.data();
        assert!((a[0] - 0.5).abs() < 1e-12);
        assert!((a[1] - 0.75).abs() < 1e-12);
        let g = gated.data();
        assert!((g[1] - 1.0).abs() < 1e-12, "token halved by alpha 0.5");
        assert!((g[4] - 0.75 * 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alpha_gate_matches_per_token_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let tape = Tape::no_grad();
        let (n, d) = (7, 5);
        let tokens = rand_mat(&tape, n, d, &mut rng);
        let pose = rand_vec(&tape, d, &mut rng);
        let w = rand_mat(&tape, d, d, &mut rng);
        let (gated, alpha) = token_gate_alpha(tokens, pose, w).unwrap();

        let (td, pd, wd) = (tokens.data(), pose.data(), w.data());
        let mut wh = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                wh[i] += wd[i * d + j] * pd[j];
            }
        }
        let ad = alpha.data();
        let gd = gated.data();
        for i in 0..n {
            let dot: f64 = (0..d).map(|j| wh[j] * td[i * d + j]).sum();
            let want_a = 1.0 / (1.0 + (-dot).exp());
            assert!((ad[i] - want_a).abs() < 1e-12);
            for j in 0..d {
                assert!((gd[i * d + j] - want_a * td[i * d + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn semantic_query_pools_as_expected() {
        let tape = Tape::no_grad();
        let tokens = tape
            .constant(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![3, 2])
            .unwrap();
        // Uniform weights: plain mean.
        let q = semantic_query(tokens, &[1.0, 1.0, 1.0]).unwrap().data();
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-12 && (q[1] - 2.0 / 3.0).abs() < 1e-12);
        // One-hot: that token exactly.
        let q = semantic_query(tokens, &[0.0, 1.0, 0.0]).unwrap().data();
        assert_eq!(q, vec![0.0, 1.0]);
        // All-zero weights break the contract.
        assert!(semantic_query(tokens, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn semantic_query_matches_direct_ratio_and_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tape = Tape::no_grad();
        let (n, d) = (6, 4);
        let tokens = rand_mat(&tape, n, d, &mut rng);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let q = semantic_query(tokens, &w).unwrap().data();

        let td = tokens.data();
        let total: f64 = w.iter().sum();
        for j in 0..d {
            let want: f64 = (0..n).map(|i| w[i] * td[i * d + j]).sum::<f64>() / total;
            assert!((q[j] - want).abs() < 1e-12);
        }

        // Power-of-two scaling is exactly invariant; arbitrary scaling to fp
        // tolerance.
        let w4: Vec<f64> = w.iter().map(|x| 4.0 * x).collect();
        assert_eq!(semantic_query(tokens, &w4).unwrap().data(), q);
        let w3: Vec<f64> = w.iter().map(|x| 3.0 * x).collect();
        for (a, b) in semantic_query(tokens, &w3).unwrap().data().iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn literal_fuse_query_is_bit_identical_to_its_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let tape = Tape::no_grad();
        let d = 6;
        let q = rand_vec(&tape, d, &mut rng);
        let pose = rand_vec(&tape, d, &mut rng);
        let w_g = rand_mat(&tape, d, d, &mut rng);
        let (fused, g) = fuse_query(q, pose, w_g, GateMode::Literal).unwrap();
        assert_eq!(fused.data(), q.data(), "q⊙g + q⊙(1−g) must collapse to q");
        assert!(g.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn convex_fuse_query_blends_and_has_the_right_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tape = Tape::no_grad();
        let d = 5;
        let q = rand_vec(&tape, d, &mut rng);
        let pose = rand_vec(&tape, d, &mut rng);

        // W_g·h large positive → g → 1 → q_f → q.
        let big = tape.constant(vec![50.0; d * d], vec![d, d]).unwrap();
        let pose_pos = tape.constant(vec![1.0; d], vec![d]).unwrap();
        let (fused, _) = fuse_query(q, pose_pos, big, GateMode::Convex).unwrap();
        for (f, qq) in fused.data().iter().zip(q.data()) {
            assert!((f - qq).abs() < 1e-9);
        }

        // Random case matches the elementwise oracle.
        let w_g = rand_mat(&tape, d, d, &mut rng);
        let (fused, g) = fuse_query(q, pose, w_g, GateMode::Convex).unwrap();
        let (fd, gd, qd, pd) = (fused.data(), g.data(), q.data(), pose.data());
        for i in 0..d {
            let want = gd[i] * qd[i] + (1.0 - gd[i]) * pd[i];
            assert!((fd[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_gate_halves_with_zero_projection_and_squares_when_applied_twice() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let tape = Tape::no_grad();
        let (n, d) = (4, 3);
        let tokens = rand_mat(&tape, n, d, &mut rng);
        let pose = rand_vec(&tape, d, &mut rng);
        let zero = tape.constant(vec![0.0; d * d], vec![d, d]).unwrap();
        let (gated, u) = gate_tokens(tokens, pose, zero).unwrap();
        assert!(u.data().iter().all(|v| (*v - 0.5).abs() < 1e-12));
        for (g, t) in gated.data().iter().zip(tokens.data()) {
            assert!((g - 0.5 * t).abs() < 1e-12);
        }
        let (twice, _) = gate_tokens(gated, pose, zero).unwrap();
        for (tw, t) in twice.data().iter().zip(tokens.data()) {
            assert!((tw - 0.25 * t).abs() < 1e-12, "u applied twice scales by u²");
        }
    }

    #[test]
    fn channel_gate_matches_broadcast_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let tape = Tape::no_grad();
        let (n, d) = (6, 4);
        let tokens = rand_mat(&tape, n, d, &mut rng);
        let pose = rand_vec(&tape, d, &mut rng);
        let w_u = rand_mat(&tape, d, d, &mut rng);
        let (gated, u) = gate_tokens(tokens, pose, w_u).unwrap();
        let (gd, ud, td) = (gated.data(), u.data(), tokens.data());
        for i in 0..n {
            for j in 0..d {
                assert!((gd[i * d + j] - ud[j] * td[i * d + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_single_token_passes_it_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let tape = Tape::no_grad();
        let d = 4;
        let q = rand_vec(&tape, d, &mut rng);
        let row = rand_mat(&tape, 1, d, &mut rng);
        let (out, attn) = cross_attention(q, row, None).unwrap();
        assert_eq!(attn.data(), vec![1.0]);
        assert_eq!(out.data(), row.data());
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let tape = Tape::no_grad();
        let d = 3;
        let q = tape.constant(vec![0.3, -0.7, 1.1], vec![d]).unwrap();
        let row: Vec<f64> = vec![0.5, 0.25, -0.125];
        let tokens = tape
            .constant([row.clone(), row.clone(), row.clone(), row.clone()].concat(), vec![4, d])
            .unwrap();
        let (out, attn) = cross_attention(q, tokens, None).unwrap();
        for a in attn.data() {
            assert!((a - 0.25).abs() < 1e-12);
        }
        for (o, r) in out.data().iter().zip(&row) {
            assert!((o - r).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let tape = Tape::no_grad();
        let (n, d) = (7, 4);
        let q = rand_vec(&tape, d, &mut rng);
        let tokens = rand_mat(&tape, n, d, &mut rng);
        let (out, attn) = cross_attention(q, tokens, None).unwrap();

        let (qd, td) = (q.data(), tokens.data());
        let mut scores: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|j| td[i * d + j] * qd[j]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in &mut scores {
            *s = (*s - m).exp();
            z += *s;
        }
        for s in &mut scores {
            *s /= z;
        }
        let ad = attn.data();
        let sum: f64 = ad.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for (a, s) in ad.iter().zip(&scores) {
            assert!((a - s).abs() < 1e-12);
        }
        let od = out.data();
        for j in 0..d {
            let want: f64 = (0..n).map(|i| scores[i] * td[i * d + j]).sum();
            assert!((od[j] - want).abs() < 1e-12);
        }
        // Convex hull: each output coordinate lies within the value range.
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| td[i * d + j]).collect();
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                    (l.min(*v), h.max(*v))
                });
            assert!(od[j] >= lo - 1e-12 && od[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn empty_token_set_is_contract_error() {
        let tape = Tape::no_grad();
        let q = tape.constant(vec![1.0, 2.0], vec![2]).unwrap();
        let empty = tape.constant(vec![], vec![0, 2]).unwrap();
        assert!(cross_attention(q, empty, None).is_err());
    }

    #[test]
    fn flags_off_reduces_to_plain_mean_query_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let tape = Tape::new();
        let d = 4;
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(1);
        let layout = FusionLayout::build(&mut store, d, false, &mut prng);
        let bound = store.bind(&tape).unwrap();

        let finals = rand_mat(&tape, 6, d, &mut rng);
        let penult = rand_mat(&tape, 6, d, &mut rng);
        let flags = FusionFlags {
            pose_guidance: false,
            alpha_gate: false,
            gating: false,
            gate_mode: GateMode::Literal,
            motion_weighting: false,
            learned_qkv: false,
        };
        let inputs = FusionInputs {
            final_patches: finals,
            penult_patches: penult,
            pose_proj: None,
            relevance: None,
        };
        let (out, state) = fusion_forward(&bound, &layout, &flags, &inputs).unwrap();

        let mean = ops::col_mean(finals).unwrap();
        let (want, _) = cross_attention(mean, penult, None).unwrap();
        assert_eq!(out.data(), want.data());
        assert!(state.alpha.is_none() && state.gate_g.is_none() && state.gate_u.is_none());
        assert!(state.relevance.iter().all(|w| *w == 1.0));
        let s: f64 = state.attention.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn full_flags_record_all_intermediates() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let tape = Tape::new();
        let d = 4;
        let n = 8;
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(2);
        let layout = FusionLayout::build(&mut store, d, false, &mut prng);
        let bound = store.bind(&tape).unwrap();
        let finals = rand_mat(&tape, n, d, &mut rng);
        let penult = rand_mat(&tape, n, d, &mut rng);
        let pose = rand_vec(&tape, d, &mut rng);
        let relevance: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let inputs = FusionInputs {
            final_patches: finals,
            penult_patches: penult,
            pose_proj: Some(pose),
            relevance: Some(relevance.clone()),
        };
        let (_, state) =
            fusion_forward(&bound, &layout, &FusionFlags::default(), &inputs).unwrap();
        assert_eq!(state.n_tokens, n);
        assert_eq!(state.relevance, relevance);
        assert!(state.alpha.is_some() && state.gate_g.is_some() && state.gate_u.is_some());
        assert_eq!(state.query.len(), d);
        // Literal mode: the fused query is the query, exactly.
        assert_eq!(state.fused_query, state.query);
        let s: f64 = state.attention.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fusion_dump_round_trips_block_layout() {
        let state = FusionState {
            n_tokens: 3,
            relevance: vec![1.0, 0.5, 0.25],
            alpha: Some(vec![0.7, 0.6, 0.5]),
            gate_g: None,
            gate_u: None,
            query: vec![0.1, 0.2],
            fused_query: vec![0.1, 0.2],
            attention: vec![0.3, 0.3, 0.4],
            output: vec![0.9, -0.9],
        };
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("fusion_state");
        state.write_dump(&base).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(base.with_extension("json")).unwrap())
                .unwrap();
        assert_eq!(manifest["n_tokens"], 3);
        let bin = std::fs::read(base.with_extension("bin")).unwrap();
        let total: usize = manifest["blocks"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| b["len"].as_u64().unwrap() as usize)
            .sum();
        assert_eq!(bin.len(), total * 4);
    }
}
