//! 3-D convolution (cross-correlation semantics) with 3×3×3 kernels,
//! padding 1 on every axis, and per-axis stride.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::tape::{acc, Var};

const K: usize = 3;
const PAD: isize = 1;

/// Output extent for one axis: (size + 2·pad − kernel)/stride + 1.
fn out_extent(size: usize, stride: usize) -> Result<usize> {
    let padded = size + 2 * PAD as usize;
    if padded < K {
        return Err(Error::Shape {
            op: "conv3d",
            lhs: vec![size],
            rhs: vec![K],
        });
    }
    Ok((padded - K) / stride + 1)
}

/// Loop bounds along one output axis for a fixed kernel offset, such that
/// the corresponding input index o·stride + offset stays inside [0, size).
fn valid_range(out_len: usize, stride: usize, offset: isize, size: usize) -> (usize, usize) {
    let lo = if offset < 0 {
        ((-offset) as usize).div_ceil(stride)
    } else {
        0
    };
    let hi_excl = if (size as isize) <= offset {
        0
    } else {
        let max_in = (size as isize - 1 - offset) as usize;
        (max_in / stride + 1).min(out_len)
    };
    (lo.min(hi_excl), hi_excl)
}

struct Dims {
    c_in: usize,
    t: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ot: usize,
    oh: usize,
    ow: usize,
    stride: (usize, usize, usize),
}

fn conv_forward_channel(input: &[f64], kernels: &[f64], d: &Dims, co: usize, out: &mut [f64]) {
    let (st, sh, sw) = d.stride;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    for ci in 0..d.c_in {
        let in_base = ci * d.t * in_plane;
        let k_base = (co * d.c_in + ci) * K * K * K;
        for kt in 0..K {
            let toff = kt as isize - PAD;
            let (t0, t1) = valid_range(d.ot, st, toff, d.t);
            for kh in 0..K {
                let hoff = kh as isize - PAD;
                let (h0, h1) = valid_range(d.oh, sh, hoff, d.h);
                for kw in 0..K {
                    let woff = kw as isize - PAD;
                    let (w0, w1) = valid_range(d.ow, sw, woff, d.w);
                    let wgt = kernels[k_base + (kt * K + kh) * K + kw];
                    for o_t in t0..t1 {
                        let it = (o_t * st) as isize + toff;
                        let in_t = in_base + it as usize * in_plane;
                        let out_t = o_t * out_plane;
                        for o_h in h0..h1 {
                            let ih = (o_h * sh) as isize + hoff;
                            let in_row = in_t + ih as usize * d.w;
                            let out_row = out_t + o_h * d.ow;
                            for o_w in w0..w1 {
                                let iw = ((o_w * sw) as isize + woff) as usize;
                                out[out_row + o_w] += wgt * input[in_row + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3-D convolution. Input is C_in×T×H×W, kernels C_out×C_in×3×3×3.
pub fn conv3d<'t>(
    input: Var<'t>,
    kernels: Var<'t>,
    stride: (usize, usize, usize),
) -> Result<Var<'t>> {
    if !input.same_tape(&kernels) {
        return Err(Error::contract("conv3d: operands on different tapes"));
    }
    let ish = input.shape();
    let ksh = kernels.shape();
    if ish.len() != 4 || ksh.len() != 5 || ksh[2] != K || ksh[3] != K || ksh[4] != K {
        return Err(Error::Shape {
            op: "conv3d",
            lhs: ish,
            rhs: ksh,
        });
    }
    if ish[0] != ksh[1] {
        return Err(Error::Shape {
            op: "conv3d",
            lhs: ish,
            rhs: ksh,
        });
    }
    if stride.0 < 1 || stride.1 < 1 || stride.2 < 1 {
        return Err(Error::config("conv3d stride components must be >= 1"));
    }
    let d = Dims {
        c_in: ish[0],
        t: ish[1],
        h: ish[2],
        w: ish[3],
        c_out: ksh[0],
        ot: out_extent(ish[1], stride.0)?,
        oh: out_extent(ish[2], stride.1)?,
        ow: out_extent(ish[3], stride.2)?,
        stride,
    };
    let out_vol = d.ot * d.oh * d.ow;
    let out: Vec<f64> = {
        let id_ref = input.tape.data(input.id);
        let kd_ref = kernels.tape.data(kernels.id);
        let id: &[f64] = &id_ref;
        let kd: &[f64] = &kd_ref;
        let dims = &d;
        let mut out = vec![0.0; d.c_out * out_vol];
        out.par_chunks_mut(out_vol).enumerate().for_each(|(co, chunk)| {
            conv_forward_channel(id, kd, dims, co, chunk);
        });
        out
    };
    let out_shape = vec![d.c_out, d.ot, d.oh, d.ow];
    let (iid, kid) = (input.id, kernels.id);
    input.tape.push(
        "conv3d",
        out,
        out_shape,
        &[iid, kid],
        Some(Box::new(move |nodes, g, store| {
            let id = &nodes[iid].data;
            let kd = &nodes[kid].data;
            acc(nodes, store, kid, |dk| {
                conv_backward_kernels(id, g, &d, dk);
            });
            acc(nodes, store, iid, |di| {
                conv_backward_input(kd, g, &d, di);
            });
        })),
    )
}

fn conv_backward_kernels(input: &[f64], g: &[f64], d: &Dims, dk: &mut [f64]) {
    let (st, sh, sw) = d.stride;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let per_out = d.c_in * K * K * K;
    dk.par_chunks_mut(per_out).enumerate().for_each(|(co, dk_co)| {
        let g_base = co * d.ot * out_plane;
        for ci in 0..d.c_in {
            let in_base = ci * d.t * in_plane;
            for kt in 0..K {
                let toff = kt as isize - PAD;
                let (t0, t1) = valid_range(d.ot, st, toff, d.t);
                for kh in 0..K {
                    let hoff = kh as isize - PAD;
                    let (h0, h1) = valid_range(d.oh, sh, hoff, d.h);
                    for kw in 0..K {
                        let woff = kw as isize - PAD;
                        let (w0, w1) = valid_range(d.ow, sw, woff, d.w);
                        let mut s = 0.0;
                        for o_t in t0..t1 {
                            let it = (o_t * st) as isize + toff;
                            let in_t = in_base + it as usize * in_plane;
                            let g_t = g_base + o_t * out_plane;
                            for o_h in h0..h1 {
                                let ih = (o_h * sh) as isize + hoff;
                                let in_row = in_t + ih as usize * d.w;
                                let g_row = g_t + o_h * d.ow;
                                for o_w in w0..w1 {
                                    let iw = ((o_w * sw) as isize + woff) as usize;
                                    s += g[g_row + o_w] * input[in_row + iw];
                                }
                            }
                        }
                        dk_co[ci * K * K * K + (kt * K + kh) * K + kw] += s;
                    }
                }
            }
        }
    });
}

fn conv_backward_input(kernels: &[f64], g: &[f64], d: &Dims, di: &mut [f64]) {
    let (st, sh, sw) = d.stride;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    di.par_chunks_mut(d.t * in_plane).enumerate().for_each(|(ci, di_ci)| {
        for co in 0..d.c_out {
            let g_base = co * d.ot * out_plane;
            let k_base = (co * d.c_in + ci) * K * K * K;
            for kt in 0..K {
                let toff = kt as isize - PAD;
                let (t0, t1) = valid_range(d.ot, st, toff, d.t);
                for kh in 0..K {
                    let hoff = kh as isize - PAD;
                    let (h0, h1) = valid_range(d.oh, sh, hoff, d.h);
                    for kw in 0..K {
                        let woff = kw as isize - PAD;
                        let (w0, w1) = valid_range(d.ow, sw, woff, d.w);
                        let wgt = kernels[k_base + (kt * K + kh) * K + kw];
                        for o_t in t0..t1 {
                            let it = (o_t * st) as isize + toff;
                            let di_t = it as usize * in_plane;
                            let g_t = g_base + o_t * out_plane;
                            for o_h in h0..h1 {
                                let ih = (o_h * sh) as isize + hoff;
                                let di_row = di_t + ih as usize * d.w;
                                let g_row = g_t + o_h * d.ow;
                                for o_w in w0..w1 {
                                    let iw = ((o_w * sw) as isize + woff) as usize;
                                    di_ci[di_row + iw] += wgt * g[g_row + o_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}
