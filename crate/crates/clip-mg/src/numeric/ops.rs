//! Differentiable tensor operations. Each op validates shapes, computes the
//! forward value, checks it for non-finite entries, and records a backward
//! closure on the tape.

use crate::error::{Error, Result};
use crate::numeric::tape::{acc, Var};

/// Clamp floor for logarithms inside loss functions.
pub const LOG_CLAMP: f64 = 1e-12;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Row-major GEMM: C = A·B + beta·C, with optional logical transposes.
/// `a` stores the logical m×k operand (k×m when `a_t`), likewise for `b`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm out size");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_same_tape(a: &Var<'_>, b: &Var<'_>, op: &'static str) -> Result<()> {
    if !a.same_tape(b) {
        return Err(Error::contract(format!("{op}: operands on different tapes")));
    }
    Ok(())
}

/// Interpret a shape as rows × cols with cols = the last axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&0);
    let rows = if cols == 0 {
        0
    } else {
        shape.iter().product::<usize>() / cols
    };
    (rows, cols)
}

// ── Elementwise ──────────────────────────────────────────────────────

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_same_tape(&a, &b, "add")?;
    let (ash, bsh) = (a.shape(), b.shape());
    if ash != bsh {
        return Err(Error::Shape {
            op: "add",
            lhs: ash,
            rhs: bsh,
        });
    }
    let out: Vec<f64> = {
        let ad = a.tape.data(a.id);
        let bd = b.tape.data(b.id);
        ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect()
    };
    let (aid, bid) = (a.id, b.id);
    a.tape.push(
        "add",
        out,
        ash,
        &[aid, bid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            acc(nodes, store, bid, |db| {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        })),
    )
}

pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_same_tape(&a, &b, "mul")?;
    let (ash, bsh) = (a.shape(), b.shape());
    if ash != bsh {
        return Err(Error::Shape {
            op: "mul",
            lhs: ash,
            rhs: bsh,
        });
    }
    let out: Vec<f64> = {
        let ad = a.tape.data(a.id);
        let bd = b.tape.data(b.id);
        ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect()
    };
    let (aid, bid) = (a.id, b.id);
    a.tape.push(
        "mul",
        out,
        ash,
        &[aid, bid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(&nodes[bid].data) {
                    *d += gi * y;
                }
            });
            acc(nodes, store, bid, |db| {
                for ((d, gi), x) in db.iter_mut().zip(g).zip(&nodes[aid].data) {
                    *d += gi * x;
                }
            });
        })),
    )
}

pub fn scale(a: Var<'_>, s: f64) -> Result<Var<'_>> {
    let out: Vec<f64> = a.tape.data(a.id).iter().map(|x| x * s).collect();
    let aid = a.id;
    a.tape.push(
        "scale",
        out,
        a.shape(),
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += s * gi;
                }
            });
        })),
    )
}

pub fn add_scalar(a: Var<'_>, c: f64) -> Result<Var<'_>> {
    let out: Vec<f64> = a.tape.data(a.id).iter().map(|x| x + c).collect();
    let aid = a.id;
    a.tape.push(
        "add_scalar",
        out,
        a.shape(),
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        })),
    )
}

/// m[r, c] + b[c], broadcasting the bias across rows.
pub fn add_bias<'t>(m: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_same_tape(&m, &b, "add_bias")?;
    let msh = m.shape();
    let bsh = b.shape();
    let (rows, cols) = rows_cols(&msh);
    if bsh.len() != 1 || bsh[0] != cols {
        return Err(Error::Shape {
            op: "add_bias",
            lhs: msh,
            rhs: bsh,
        });
    }
    let out: Vec<f64> = {
        let md = m.tape.data(m.id);
        let bd = b.tape.data(b.id);
        let mut out = md.to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bd[c];
            }
        }
        out
    };
    let (mid, bid) = (m.id, b.id);
    m.tape.push(
        "add_bias",
        out,
        msh,
        &[mid, bid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, mid, |dm| {
                for (d, gi) in dm.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            acc(nodes, store, bid, |db| {
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
            });
        })),
    )
}

/// m[r, k] + b[r], broadcasting the bias across columns (per-channel bias).
pub fn add_bias_per_row<'t>(m: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_same_tape(&m, &b, "add_bias_per_row")?;
    let msh = m.shape();
    let bsh = b.shape();
    if msh.len() != 2 || bsh.len() != 1 || bsh[0] != msh[0] {
        return Err(Error::Shape {
            op: "add_bias_per_row",
            lhs: msh,
            rhs: bsh,
        });
    }
    let (rows, cols) = (msh[0], msh[1]);
    let out: Vec<f64> = {
        let md = m.tape.data(m.id);
        let bd = b.tape.data(b.id);
        let mut out = md.to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bd[r];
            }
        }
        out
    };
    let (mid, bid) = (m.id, b.id);
    m.tape.push(
        "add_bias_per_row",
        out,
        msh,
        &[mid, bid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, mid, |dm| {
                for (d, gi) in dm.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            acc(nodes, store, bid, |db| {
                for r in 0..rows {
                    let mut s = 0.0;
                    for c in 0..cols {
                        s += g[r * cols + c];
                    }
                    db[r] += s;
                }
            });
        })),
    )
}

/// m[r, c] * col[r]: per-row scaling (token gates).
pub fn mul_col<'t>(m: Var<'t>, col: Var<'t>) -> Result<Var<'t>> {
    check_same_tape(&m, &col, "mul_col")?;
    let msh = m.shape();
    let csh = col.shape();
    if msh.len() != 2 || csh.len() != 1 || csh[0] != msh[0] {
        return Err(Error::Shape {
            op: "mul_col",
            lhs: msh,
            rhs: csh,
        });
    }
    let (rows, cols) = (msh[0], msh[1]);
    let out: Vec<f64> = {
        let md = m.tape.data(m.id);
        let cd = col.tape.data(col.id);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = md[r * cols + c] * cd[r];
            }
        }
        out
    };
    let (mid, cid) = (m.id, col.id);
    m.tape.push(
        "mul_col",
        out,
        msh,
        &[mid, cid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, mid, |dm| {
                let cd = &nodes[cid].data;
                for r in 0..rows {
                    for c in 0..cols {
                        dm[r * cols + c] += g[r * cols + c] * cd[r];
                    }
                }
            });
            acc(nodes, store, cid, |dc| {
                let md = &nodes[mid].data;
                for r in 0..rows {
                    let mut s = 0.0;
                    for c in 0..cols {
                        s += g[r * cols + c] * md[r * cols + c];
                    }
                    dc[r] += s;
                }
            });
        })),
    )
}

/// m[r, c] * row[c]: per-channel scaling (channel gates).
pub fn mul_row<'t>(m: Var<'t>, row: Var<'t>) -> Result<Var<'t>> {
    check_same_tape(&m, &row, "mul_row")?;
    let msh = m.shape();
    let rsh = row.shape();
    let (rows, cols) = rows_cols(&msh);
    if rsh.len() != 1 || rsh[0] != cols {
        return Err(Error::Shape {
            op: "mul_row",
            lhs: msh,
            rhs: rsh,
        });
    }
    let out: Vec<f64> = {
        let md = m.tape.data(m.id);
        let rd = row.tape.data(row.id);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = md[r * cols + c] * rd[c];
            }
        }
        out
    };
    let (mid, rid) = (m.id, row.id);
    m.tape.push(
        "mul_row",
        out,
        msh,
        &[mid, rid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, mid, |dm| {
                let rd = &nodes[rid].data;
                for r in 0..rows {
                    for c in 0..cols {
                        dm[r * cols + c] += g[r * cols + c] * rd[c];
                    }
                }
            });
            acc(nodes, store, rid, |dr| {
                let md = &nodes[mid].data;
                for r in 0..rows {
                    for c in 0..cols {
                        dr[c] += g[r * cols + c] * md[r * cols + c];
                    }
                }
            });
        })),
    )
}

// ── Linear algebra ───────────────────────────────────────────────────

pub fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_same_tape(&a, &b, "matmul")?;
    let ash = a.shape();
    let bsh = b.shape();
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: ash,
            rhs: bsh,
        });
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let mut out = vec![0.0; m * n];
    {
        let ad = a.tape.data(a.id);
        let bd = b.tape.data(b.id);
        gemm(m, k, n, &ad, false, &bd, false, 0.0, &mut out);
    }
    let (aid, bid) = (a.id, b.id);
    a.tape.push(
        "matmul",
        out,
        vec![m, n],
        &[aid, bid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                gemm(m, n, k, g, false, &nodes[bid].data, true, 1.0, da);
            });
            acc(nodes, store, bid, |db| {
                gemm(k, m, n, &nodes[aid].data, true, g, false, 1.0, db);
            });
        })),
    )
}

pub fn transpose(a: Var<'_>) -> Result<Var<'_>> {
    let ash = a.shape();
    if ash.len() != 2 {
        return Err(Error::Shape {
            op: "transpose",
            lhs: ash,
            rhs: vec![],
        });
    }
    let (m, n) = (ash[0], ash[1]);
    let out: Vec<f64> = {
        let ad = a.tape.data(a.id);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        out
    };
    let aid = a.id;
    a.tape.push(
        "transpose",
        out,
        vec![n, m],
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            });
        })),
    )
}

pub fn reshape(a: Var<'_>, shape: Vec<usize>) -> Result<Var<'_>> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() {
        return Err(Error::Shape {
            op: "reshape",
            lhs: a.shape(),
            rhs: shape,
        });
    }
    let out = a.data();
    let aid = a.id;
    a.tape.push(
        "reshape",
        out,
        shape,
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        })),
    )
}

pub fn slice_rows(a: Var<'_>, start: usize, len: usize) -> Result<Var<'_>> {
    let ash = a.shape();
    if ash.len() != 2 || start + len > ash[0] {
        return Err(Error::Shape {
            op: "slice_rows",
            lhs: ash,
            rhs: vec![start, len],
        });
    }
    let cols = ash[1];
    let out = a.tape.data(a.id)[start * cols..(start + len) * cols].to_vec();
    let aid = a.id;
    a.tape.push(
        "slice_rows",
        out,
        vec![len, cols],
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for (d, gi) in da[start * cols..(start + len) * cols].iter_mut().zip(g) {
                    *d += gi;
                }
            });
        })),
    )
}

pub fn slice_cols(a: Var<'_>, start: usize, len: usize) -> Result<Var<'_>> {
    let ash = a.shape();
    if ash.len() != 2 || start + len > ash[1] {
        return Err(Error::Shape {
            op: "slice_cols",
            lhs: ash,
            rhs: vec![start, len],
        });
    }
    let (rows, cols) = (ash[0], ash[1]);
    let out: Vec<f64> = {
        let ad = a.tape.data(a.id);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ad[r * cols + start..r * cols + start + len]);
        }
        out
    };
    let aid = a.id;
    a.tape.push(
        "slice_cols",
        out,
        vec![rows, len],
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for r in 0..rows {
                    for j in 0..len {
                        da[r * cols + start + j] += g[r * len + j];
                    }
                }
            });
        })),
    )
}

pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    if parts.is_empty() {
        return Err(Error::contract("concat_rows: empty part list"));
    }
    let cols = parts[0].shape()[1];
    let mut total_rows = 0;
    for p in parts {
        let sh = p.shape();
        if sh.len() != 2 || sh[1] != cols {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: parts[0].shape(),
                rhs: sh,
            });
        }
        total_rows += sh[0];
    }
    let mut out = Vec::with_capacity(total_rows * cols);
    for p in parts {
        out.extend_from_slice(&p.tape.data(p.id));
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let row_counts: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
    let ids_for_bw = ids.clone();
    parts[0].tape.push(
        "concat_rows",
        out,
        vec![total_rows, cols],
        &ids,
        Some(Box::new(move |nodes, g, store| {
            let mut offset = 0;
            for (pid, rows) in ids_for_bw.iter().zip(&row_counts) {
                let span = rows * cols;
                acc(nodes, store, *pid, |dp| {
                    for (d, gi) in dp.iter_mut().zip(&g[offset..offset + span]) {
                        *d += gi;
                    }
                });
                offset += span;
            }
        })),
    )
}

pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    if parts.is_empty() {
        return Err(Error::contract("concat_cols: empty part list"));
    }
    let rows = parts[0].shape()[0];
    let mut total_cols = 0;
    for p in parts {
        let sh = p.shape();
        if sh.len() != 2 || sh[0] != rows {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: parts[0].shape(),
                rhs: sh,
            });
        }
        total_cols += sh[1];
    }
    let col_counts: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let mut out = vec![0.0; rows * total_cols];
    {
        let mut offset = 0;
        for (p, pc) in parts.iter().zip(&col_counts) {
            let pd = p.tape.data(p.id);
            for r in 0..rows {
                out[r * total_cols + offset..r * total_cols + offset + pc]
                    .copy_from_slice(&pd[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let ids_for_bw = ids.clone();
    parts[0].tape.push(
        "concat_cols",
        out,
        vec![rows, total_cols],
        &ids,
        Some(Box::new(move |nodes, g, store| {
            let mut offset = 0;
            for (pid, pc) in ids_for_bw.iter().zip(&col_counts) {
                acc(nodes, store, *pid, |dp| {
                    for r in 0..rows {
                        for j in 0..*pc {
                            dp[r * pc + j] += g[r * total_cols + offset + j];
                        }
                    }
                });
                offset += pc;
            }
        })),
    )
}

// ── Nonlinearities ───────────────────────────────────────────────────

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: Var<'_>) -> Result<Var<'_>> {
    let out: Vec<f64> = a.tape.data(a.id).iter().map(|&x| sigmoid_scalar(x)).collect();
    let aid = a.id;
    let out_id = a.tape.next_id();
    a.tape.push(
        "sigmoid",
        out,
        a.shape(),
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                let y = &nodes[out_id].data;
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            });
        })),
    )
}

/// Tanh-approximation GELU.
pub fn gelu(a: Var<'_>) -> Result<Var<'_>> {
    let out: Vec<f64> = a
        .tape
        .data(a.id)
        .iter()
        .map(|&x| {
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        })
        .collect();
    let aid = a.id;
    a.tape.push(
        "gelu",
        out,
        a.shape(),
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                let x = &nodes[aid].data;
                for ((d, gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    let u = SQRT_2_OVER_PI * (xi + GELU_CUBIC * xi * xi * xi);
                    let t = u.tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * xi * xi);
                    *d += gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                }
            });
        })),
    )
}

pub fn exp(a: Var<'_>) -> Result<Var<'_>> {
    let out: Vec<f64> = a.tape.data(a.id).iter().map(|x| x.exp()).collect();
    let aid = a.id;
    let out_id = a.tape.next_id();
    a.tape.push(
        "exp",
        out,
        a.shape(),
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                let y = &nodes[out_id].data;
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            });
        })),
    )
}

/// Natural log. Non-positive inputs surface as a non-finite error.
pub fn log(a: Var<'_>) -> Result<Var<'_>> {
    let out: Vec<f64> = a.tape.data(a.id).iter().map(|x| x.ln()).collect();
    let aid = a.id;
    a.tape.push(
        "log",
        out,
        a.shape(),
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                let x = &nodes[aid].data;
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi / xi;
                }
            });
        })),
    )
}

/// Softmax along the last axis, with max subtraction for stability.
pub fn softmax(a: Var<'_>) -> Result<Var<'_>> {
    let ash = a.shape();
    let (rows, cols) = rows_cols(&ash);
    if cols == 0 {
        return Err(Error::Shape {
            op: "softmax",
            lhs: ash,
            rhs: vec![],
        });
    }
    let out: Vec<f64> = {
        let ad = a.tape.data(a.id);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = (x - m).exp();
                *o = e;
                s += e;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= s;
            }
        }
        out
    };
    let aid = a.id;
    let out_id = a.tape.next_id();
    a.tape.push(
        "softmax",
        out,
        ash,
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                let y = &nodes[out_id].data;
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for ((d, &yi), &gi) in da[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yr)
                        .zip(gr)
                    {
                        *d += yi * (gi - dot);
                    }
                }
            });
        })),
    )
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    check_same_tape(&x, &gamma, "layer_norm")?;
    check_same_tape(&x, &beta, "layer_norm")?;
    let xsh = x.shape();
    let (rows, cols) = rows_cols(&xsh);
    if gamma.shape() != vec![cols] || beta.shape() != vec![cols] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: xsh,
            rhs: gamma.shape(),
        });
    }
    let mut means = vec![0.0; rows];
    let mut inv_stds = vec![0.0; rows];
    let out: Vec<f64> = {
        let xd = x.tape.data(x.id);
        let gd = gamma.tape.data(gamma.id);
        let bd = beta.tape.data(beta.id);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv;
            for c in 0..cols {
                out[r * cols + c] = gd[c] * (row[c] - mean) * inv + bd[c];
            }
        }
        out
    };
    let (xid, gid, bid) = (x.id, gamma.id, beta.id);
    x.tape.push(
        "layer_norm",
        out,
        xsh,
        &[xid, gid, bid],
        Some(Box::new(move |nodes, g, store| {
            let xd = &nodes[xid].data;
            let gd = &nodes[gid].data;
            acc(nodes, store, xid, |dx| {
                for r in 0..rows {
                    let mean = means[r];
                    let inv = inv_stds[r];
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * inv;
                        let dxhat = gr[c] * gd[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let n = cols as f64;
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * inv;
                        let dxhat = gr[c] * gd[c];
                        dx[r * cols + c] +=
                            inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
            });
            acc(nodes, store, gid, |dgamma| {
                for r in 0..rows {
                    let mean = means[r];
                    let inv = inv_stds[r];
                    for c in 0..cols {
                        let xhat = (xd[r * cols + c] - mean) * inv;
                        dgamma[c] += g[r * cols + c] * xhat;
                    }
                }
            });
            acc(nodes, store, bid, |dbeta| {
                for r in 0..rows {
                    for c in 0..cols {
                        dbeta[c] += g[r * cols + c];
                    }
                }
            });
        })),
    )
}

// ── Reductions ───────────────────────────────────────────────────────

pub fn sum_all(a: Var<'_>) -> Result<Var<'_>> {
    let s: f64 = a.tape.data(a.id).iter().sum();
    let aid = a.id;
    a.tape.push(
        "sum_all",
        vec![s],
        vec![1],
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            });
        })),
    )
}

pub fn mean_all(a: Var<'_>) -> Result<Var<'_>> {
    let n = a.numel();
    if n == 0 {
        return Err(Error::contract("mean_all: empty tensor"));
    }
    let s: f64 = a.tape.data(a.id).iter().sum::<f64>() / n as f64;
    let aid = a.id;
    a.tape.push(
        "mean_all",
        vec![s],
        vec![1],
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                let w = g[0] / n as f64;
                for d in da.iter_mut() {
                    *d += w;
                }
            });
        })),
    )
}

/// Mean along axis 1 of an R×C matrix: one value per row (per-channel GAP).
pub fn row_mean(a: Var<'_>) -> Result<Var<'_>> {
    let ash = a.shape();
    if ash.len() != 2 || ash[1] == 0 {
        return Err(Error::Shape {
            op: "row_mean",
            lhs: ash,
            rhs: vec![],
        });
    }
    let (rows, cols) = (ash[0], ash[1]);
    let out: Vec<f64> = {
        let ad = a.tape.data(a.id);
        (0..rows)
            .map(|r| ad[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
            .collect()
    };
    let aid = a.id;
    a.tape.push(
        "row_mean",
        out,
        vec![rows],
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for r in 0..rows {
                    let w = g[r] / cols as f64;
                    for c in 0..cols {
                        da[r * cols + c] += w;
                    }
                }
            });
        })),
    )
}

/// Mean along axis 0 of an R×C matrix: one value per column (token pooling).
pub fn col_mean(a: Var<'_>) -> Result<Var<'_>> {
    let ash = a.shape();
    if ash.len() != 2 || ash[0] == 0 {
        return Err(Error::Shape {
            op: "col_mean",
            lhs: ash,
            rhs: vec![],
        });
    }
    let (rows, cols) = (ash[0], ash[1]);
    let out: Vec<f64> = {
        let ad = a.tape.data(a.id);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += ad[r * cols + c];
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        out
    };
    let aid = a.id;
    a.tape.push(
        "col_mean",
        out,
        vec![cols],
        &[aid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, aid, |da| {
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] += g[c] / rows as f64;
                    }
                }
            });
        })),
    )
}

// ── Lookup and loss ──────────────────────────────────────────────────

/// Row lookup: out[i] = table[ids[i]]. Backward scatter-adds into the table.
pub fn embedding<'t>(table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    let tsh = table.shape();
    if tsh.len() != 2 {
        return Err(Error::Shape {
            op: "embedding",
            lhs: tsh,
            rhs: vec![],
        });
    }
    let (vocab, dim) = (tsh[0], tsh[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::contract(format!(
            "embedding id {bad} out of range (vocab {vocab})"
        )));
    }
    let out: Vec<f64> = {
        let td = table.tape.data(table.id);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        out
    };
    let tid = table.id;
    let ids_bw = ids.to_vec();
    table.tape.push(
        "embedding",
        out,
        vec![ids.len(), dim],
        &[tid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, tid, |dt| {
                for (row, &i) in ids_bw.iter().enumerate() {
                    for c in 0..dim {
                        dt[i * dim + c] += g[row * dim + c];
                    }
                }
            });
        })),
    )
}

/// Mean negative log-likelihood of the true class under probabilities,
/// with the log argument clamped at `LOG_CLAMP`.
pub fn nll_loss<'t>(probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let psh = probs.shape();
    if psh.len() != 2 || psh[0] != labels.len() {
        return Err(Error::Shape {
            op: "nll_loss",
            lhs: psh,
            rhs: vec![labels.len()],
        });
    }
    let (batch, classes) = (psh[0], psh[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let loss: f64 = {
        let pd = probs.tape.data(probs.id);
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -pd[i * classes + y].max(LOG_CLAMP).ln())
            .sum::<f64>()
            / batch as f64
    };
    let pid = probs.id;
    let labels_bw = labels.to_vec();
    probs.tape.push(
        "nll_loss",
        vec![loss],
        vec![1],
        &[pid],
        Some(Box::new(move |nodes, g, store| {
            acc(nodes, store, pid, |dp| {
                let pd = &nodes[pid].data;
                for (i, &y) in labels_bw.iter().enumerate() {
                    let p = pd[i * classes + y];
                    if p >= LOG_CLAMP {
                        dp[i * classes + y] -= g[0] / (batch as f64 * p);
                    }
                }
            });
        })),
    )
}
