//! Central-difference gradient checking against tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per tensor (all coordinates when numel is smaller).
    pub max_coords: usize,
    pub seed: u64,
    /// Noise floor: when both gradients are below this, the coordinate is
    /// structurally zero and carries no information at step `eps` — e.g.
    /// attention key biases, which softmax shift-invariance cancels exactly,
    /// where the finite difference is pure f64 roundoff.
    pub atol: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            eps: 1e-5,
            max_coords: 24,
            seed: 0,
            atol: 1e-9,
        }
    }
}

/// Compare tape gradients of a scalar function against central differences
/// (f(θ+ε) − f(θ−ε)) / 2ε over sampled coordinates. Returns the maximum
/// relative error |g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|).
pub fn grad_check<F>(params: &[Tensor], f: &F, settings: &GradCheckSettings) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = values
            .iter()
            .map(|t| tape.constant(t.data.clone(), t.shape.clone()))
            .collect::<Result<_>>()?;
        let out = f(&tape, &vars)?;
        if out.numel() != 1 {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        let v = out.scalar();
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite function value".into()));
        }
        Ok(v)
    };

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params
        .iter()
        .map(|t| tape.leaf(t.data.clone(), t.shape.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&tape, &vars)?;
    if loss.numel() != 1 {
        return Err(Error::contract("grad_check function must return a scalar"));
    }
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0_f64;
    for (pi, p) in params.iter().enumerate() {
        let ad = grads
            .of(vars[pi])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        let coords: Vec<usize> = if p.numel() <= settings.max_coords {
            (0..p.numel()).collect()
        } else {
            rand::seq::index::sample(&mut rng, p.numel(), settings.max_coords).into_vec()
        };
        for c in coords {
            let orig = work[pi].data[c];
            work[pi].data[c] = orig + settings.eps;
            let up = eval(&work)?;
            work[pi].data[c] = orig - settings.eps;
            let down = eval(&work)?;
            work[pi].data[c] = orig;
            let fd = (up - down) / (2.0 * settings.eps);
            if ad[c].abs() <= settings.atol && fd.abs() <= settings.atol {
                continue;
            }
            let rel = (ad[c] - fd).abs() / (ad[c].abs() + fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Sigmoid with a deliberately wrong backward rule. Negative-control
/// fixture: gradient checks against it must fail.
#[doc(hidden)]
pub fn corrupted_sigmoid(a: Var<'_>) -> Result<Var<'_>> {
    let out: Vec<f64> = a
        .tape
        .data(a.id)
        .iter()
        .map(|&x| 1.0 / (1.0 + (-x).exp()))
        .collect();
    let aid = a.id;
    let out_id = a.tape.next_id();
    a.tape.push(
        "corrupted_sigmoid",
        out,
        a.shape(),
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            crate::numeric::tape::acc(nodes, store, aid, |da| {
                let y = &nodes[out_id].data;
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    // Wrong on purpose: offsets the true derivative.
                    *d += gi * (yi * (1.0 - yi) + 0.25);
                }
            });
        })),
    )
}
