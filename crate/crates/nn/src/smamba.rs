//! Selective state-space block with learnable smoothing vectors.
//!
//! `s_out` smooths the gated output path and is folded into the gate and
//! output projections; `s_mm` smooths the B/C projections of the scan.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::params::{init_uniform, ParamStore};
use crate::tape::{sigmoid, silu, CustomOp, Tape, Var};
use crate::tensor::{gemm, Tensor};

/// Reserved parameter-name prefix for block weights inside a [`ParamStore`].
pub const PREFIX: &str = "smamba/";

/// Smallest value a smoothing entry may take after an optimizer step.
pub const SMOOTHING_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScanMode {
    #[default]
    Sequential,
    ParallelScan,
}

/// Where the `-ln(s_mm)` correction enters the discretization exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DeltaAdjust {
    #[default]
    FirstStep,
    EveryStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SMambaConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub seq_len: usize,
    pub scan_mode: ScanMode,
    pub delta_adjust: DeltaAdjust,
}

impl Default for SMambaConfig {
    fn default() -> Self {
        SMambaConfig {
            d_model: 32,
            d_inner: 64,
            d_state: 16,
            conv_width: 4,
            seq_len: 10,
            scan_mode: ScanMode::Sequential,
            delta_adjust: DeltaAdjust::FirstStep,
        }
    }
}

/// S-SiLU: `x * sigmoid(s * x)`.
pub fn s_silu(x: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    if x.len() != s.len() {
        return shape_err("s_silu", format!("{} inputs, {} smoothing entries", x.len(), s.len()));
    }
    check_positive("s", s)?;
    Ok(x.iter().zip(s).map(|(&xi, &si)| xi * sigmoid(si * xi)).collect())
}

fn check_positive(what: &str, s: &[f64]) -> Result<()> {
    if let Some(v) = s.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(NnError::Domain(format!("smoothing vector `{what}` has non-positive entry {v}")));
    }
    Ok(())
}

/// Row vector times matrix, accumulated left to right.
fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let n = w.cols();
    let mut out = vec![0.0; n];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w.data[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

/// Gated output of a single time step.
///
/// `absorbed = true` folds `s_out` into the weights (`W_gate / s_out`,
/// `s_out * W_out`); `false` applies the smoothing to the activations.
pub fn gated_output(
    y_ssm: &[f64],
    x_gate: &[f64],
    w_gate: &Tensor,
    w_out: &Tensor,
    s_out: &[f64],
    absorbed: bool,
) -> Result<Vec<f64>> {
    let di = y_ssm.len();
    if x_gate.len() != di || s_out.len() != di || w_gate.shape != [di, di] || w_out.rows() != di {
        return shape_err(
            "gated_output",
            format!("d_inner {di}, gate {}, s_out {}, W_gate {:?}, W_out {:?}", x_gate.len(), s_out.len(), w_gate.shape, w_out.shape),
        );
    }
    check_positive("s_out", s_out)?;
    if absorbed {
        let mut wg = w_gate.clone();
        for i in 0..di {
            for j in 0..di {
                wg.data[i * di + j] /= s_out[j];
            }
        }
        let mut wo = w_out.clone();
        let dm = wo.cols();
        for i in 0..di {
            for j in 0..dm {
                wo.data[i * dm + j] *= s_out[i];
            }
        }
        let z = vecmat(x_gate, &wg);
        let act = s_silu(&z, s_out)?;
        let prod: Vec<f64> = y_ssm.iter().zip(&act).map(|(a, b)| a * b).collect();
        Ok(vecmat(&prod, &wo))
    } else {
        let z: Vec<f64> = vecmat(x_gate, w_gate).iter().zip(s_out).map(|(z, s)| z / s).collect();
        let act = s_silu(&z, s_out)?;
        let prod: Vec<f64> = y_ssm.iter().zip(&act).zip(s_out).map(|((a, b), s)| a * b * s).collect();
        Ok(vecmat(&prod, w_out))
    }
}

/// Unsmoothed reference: `(y * SiLU(x_gate W_gate)) W_out`.
pub fn plain_gated_output(y_ssm: &[f64], x_gate: &[f64], w_gate: &Tensor, w_out: &Tensor) -> Vec<f64> {
    let z = vecmat(x_gate, w_gate);
    let prod: Vec<f64> = y_ssm.iter().zip(&z).map(|(a, &b)| a * silu(b)).collect();
    vecmat(&prod, w_out)
}

/// Inputs of a batched scan. Rows are `batch * len` time steps in
/// batch-major order; `b` and `c` are the already smoothed projections.
#[derive(Debug, Clone)]
pub struct ScanInputs {
    pub batch: usize,
    pub len: usize,
    pub u: Tensor,
    pub delta: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub ln_s: Vec<f64>,
    pub mask: Vec<bool>,
    pub adjust: DeltaAdjust,
}

impl ScanInputs {
    fn dims(&self) -> Result<(usize, usize)> {
        let rows = self.batch * self.len;
        let (d, n) = (self.a.rows(), self.a.cols());
        let ok = self.u.shape == [rows, d]
            && self.delta.shape == [rows, d]
            && self.b.shape == [rows, n]
            && self.c.shape == [rows, n]
            && self.ln_s.len() == n
            && self.mask.len() == rows;
        if !ok {
            return shape_err(
                "ssm_scan",
                format!(
                    "u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, s {} for {} x {}",
                    self.u.shape, self.delta.shape, self.a.shape, self.b.shape, self.c.shape, self.ln_s.len(), self.batch, self.len
                ),
            );
        }
        Ok((d, n))
    }

    fn first_valid(&self) -> Vec<Option<usize>> {
        (0..self.batch).map(|b| (0..self.len).find(|&t| self.mask[b * self.len + t])).collect()
    }

    fn adjusted(&self, first: Option<usize>, t: usize) -> bool {
        match self.adjust {
            DeltaAdjust::EveryStep => true,
            DeltaAdjust::FirstStep => first == Some(t),
        }
    }
}

/// Runs the recurrence `h_t = exp(dt_t A - adj) h_{t-1} + dt_t B_t u_t`,
/// `y_t = C_t h_t`. Returns outputs `[rows, d]` and the states
/// `[rows, d, n]`. Masked steps carry the state and emit zero.
fn scan_forward(inp: &ScanInputs, mode: ScanMode) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (d, n) = inp.dims()?;
    let (bsz, len) = (inp.batch, inp.len);
    let rows = bsz * len;
    let mut hs = vec![0.0; rows * d * n];
    let mut abars = vec![1.0; rows * d * n];
    let firsts = inp.first_valid();
    if mode == ScanMode::Sequential {
        // time-major over a contiguous [d, n] state
        for b in 0..bsz {
            let first = firsts[b];
            let mut h = vec![0.0; d * n];
            for t in 0..len {
                let r = b * len + t;
                let out = &mut hs[r * d * n..(r + 1) * d * n];
                if !inp.mask[r] {
                    out.copy_from_slice(&h);
                    continue;
                }
                let adj = inp.adjusted(first, t);
                let brow = &inp.b.data[r * n..(r + 1) * n];
                for di in 0..d {
                    let dt = inp.delta.data[r * d + di];
                    let du = dt * inp.u.data[r * d + di];
                    let arow = &inp.a.data[di * n..(di + 1) * n];
                    let hrow = &mut h[di * n..(di + 1) * n];
                    for ni in 0..n {
                        let mut e = dt * arow[ni];
                        if adj {
                            e -= inp.ln_s[ni];
                        }
                        let ab = e.exp();
                        abars[r * d * n + di * n + ni] = ab;
                        hrow[ni] = ab * hrow[ni] + du * brow[ni];
                    }
                }
                out.copy_from_slice(&h);
            }
        }
    } else {
        let mut pa = vec![0.0; len];
        let mut pb = vec![0.0; len];
        let mut qa = vec![0.0; len];
        let mut qb = vec![0.0; len];
        for b in 0..bsz {
            let first = firsts[b];
            for di in 0..d {
                for ni in 0..n {
                    let a = inp.a.data[di * n + ni];
                    for t in 0..len {
                        let r = b * len + t;
                        if inp.mask[r] {
                            let dt = inp.delta.data[r * d + di];
                            let mut e = dt * a;
                            if inp.adjusted(first, t) {
                                e -= inp.ln_s[ni];
                            }
                            pa[t] = e.exp();
                            abars[(r * d + di) * n + ni] = pa[t];
                            pb[t] = dt * inp.b.data[r * n + ni] * inp.u.data[r * d + di];
                        } else {
                            pa[t] = 1.0;
                            pb[t] = 0.0;
                        }
                    }
                    // Hillis-Steele inclusive scan with
                    // (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2).
                    let mut offset = 1;
                    while offset < len {
                        for t in 0..len {
                            if t >= offset {
                                let (a1, b1) = (pa[t - offset], pb[t - offset]);
                                let (a2, b2) = (pa[t], pb[t]);
                                qa[t] = a1 * a2;
                                qb[t] = a2 * b1 + b2;
                            } else {
                                qa[t] = pa[t];
                                qb[t] = pb[t];
                            }
                        }
                        std::mem::swap(&mut pa, &mut qa);
                        std::mem::swap(&mut pb, &mut qb);
                        offset *= 2;
                    }
                    for t in 0..len {
                        hs[((b * len + t) * d + di) * n + ni] = pb[t];
                    }
                }
            }
        }
    }
    let mut y = Tensor::zeros(rows, d);
    for r in 0..rows {
        if !inp.mask[r] {
            continue;
        }
        let c = &inp.c.data[r * n..(r + 1) * n];
        for di in 0..d {
            let h = &hs[(r * d + di) * n..(r * d + di + 1) * n];
            y.data[r * d + di] = h.iter().zip(c).map(|(h, c)| h * c).sum();
        }
    }
    Ok((y, hs, abars))
}

/// Smoothed selective scan over a batch of sequences.
pub fn smoothed_ssm_scan(inp: &ScanInputs, mode: ScanMode) -> Result<Tensor> {
    Ok(scan_forward(inp, mode)?.0)
}

struct ScanOp {
    batch: usize,
    len: usize,
    mask: Vec<bool>,
    adjust: DeltaAdjust,
    hs: Vec<f64>,
    abars: Vec<f64>,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "ssm_scan"
    }

    // inputs: u [rows, d], delta [rows, d], A [d, n], B [rows, n], C [rows, n], ln_s [1, n]
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let (u, delta, a, bm, cm) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let (d, n) = (a.rows(), a.cols());
        let len = self.len;
        let mut du = Tensor::zeros(u.rows(), d);
        let mut ddelta = Tensor::zeros(u.rows(), d);
        let mut da = Tensor::zeros(d, n);
        let mut dbm = Tensor::zeros(bm.rows(), n);
        let mut dcm = Tensor::zeros(cm.rows(), n);
        let mut dln = Tensor::zeros(1, n);
        let probe = ScanInputs {
            batch: self.batch,
            len,
            u: Tensor::zeros(0, 0),
            delta: Tensor::zeros(0, 0),
            a: Tensor::zeros(0, 0),
            b: Tensor::zeros(0, 0),
            c: Tensor::zeros(0, 0),
            ln_s: Vec::new(),
            mask: self.mask.clone(),
            adjust: self.adjust,
        };
        let firsts = probe.first_valid();
        let mut carry = vec![0.0; d * n];
        for b in 0..self.batch {
            let first = firsts[b];
            carry.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..len).rev() {
                let r = b * len + t;
                if !self.mask[r] {
                    continue;
                }
                let adj = probe.adjusted(first, t);
                let hrow_all = &self.hs[r * d * n..(r + 1) * d * n];
                let crow = &cm.data[r * n..(r + 1) * n];
                let brow = &bm.data[r * n..(r + 1) * n];
                for di in 0..d {
                    let gy = g.data[r * d + di];
                    let dt = delta.data[r * d + di];
                    let uv = u.data[r * d + di];
                    let mut ddt = 0.0;
                    let mut duv = 0.0;
                    for ni in 0..n {
                        let k = di * n + ni;
                        let h = hrow_all[k];
                        dcm.data[r * n + ni] += gy * h;
                        let gh = carry[k] + gy * crow[ni];
                        let h_prev = if t > 0 { self.hs[(r - 1) * d * n + k] } else { 0.0 };
                        let av = a.data[k];
                        let abar = self.abars[r * d * n + k];
                        let de = gh * h_prev * abar;
                        let bv = brow[ni];
                        ddt += de * av + gh * bv * uv;
                        da.data[k] += de * dt;
                        if adj {
                            dln.data[ni] -= de;
                        }
                        dbm.data[r * n + ni] += gh * dt * uv;
                        duv += gh * dt * bv;
                        carry[k] = gh * abar;
                    }
                    ddelta.data[r * d + di] += ddt;
                    du.data[r * d + di] += duv;
                }
            }
        }
        vec![du, ddelta, da, dbm, dcm, dln]
    }
}

/// Records the scan on the tape. `ln_s` is a `[1, n]` variable.
#[allow(clippy::too_many_arguments)]
pub fn scan_on_tape(
    tape: &mut Tape,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    ln_s: Var,
    batch: usize,
    len: usize,
    mask: &[bool],
    adjust: DeltaAdjust,
    mode: ScanMode,
) -> Result<Var> {
    let inp = ScanInputs {
        batch,
        len,
        u: tape.value(u).clone(),
        delta: tape.value(delta).clone(),
        a: tape.value(a).clone(),
        b: tape.value(b).clone(),
        c: tape.value(c).clone(),
        ln_s: tape.value(ln_s).data.clone(),
        mask: mask.to_vec(),
        adjust,
    };
    if tape.value(ln_s).rows() != 1 {
        return shape_err("ssm_scan", "ln_s must be a row vector");
    }
    let (y, hs, abars) = scan_forward(&inp, mode)?;
    let op = ScanOp { batch, len, mask: inp.mask, adjust, hs, abars };
    Ok(tape.custom(&[u, delta, a, b, c, ln_s], y, Box::new(op)))
}

/// Depthwise causal convolution with zero history.
struct ConvOp {
    batch: usize,
    len: usize,
}

fn conv_forward(x: &Tensor, w: &Tensor, bias: &Tensor, batch: usize, len: usize) -> Tensor {
    let (ch, k) = (w.rows(), w.cols());
    let mut y = Tensor::zeros(x.rows(), ch);
    for b in 0..batch {
        for t in 0..len {
            let r = b * len + t;
            for c in 0..ch {
                let mut s = bias.data[c];
                for j in 0..k {
                    let back = k - 1 - j;
                    if t >= back {
                        s += w.data[c * k + j] * x.data[(r - back) * ch + c];
                    }
                }
                y.data[r * ch + c] = s;
            }
        }
    }
    y
}

impl CustomOp for ConvOp {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        let (ch, k) = (w.rows(), w.cols());
        let mut dx = Tensor::zeros(x.rows(), ch);
        let mut dw = Tensor::zeros(ch, k);
        let mut db = Tensor::zeros(1, ch);
        for b in 0..self.batch {
            for t in 0..self.len {
                let r = b * self.len + t;
                for c in 0..ch {
                    let gv = g.data[r * ch + c];
                    db.data[c] += gv;
                    for j in 0..k {
                        let back = k - 1 - j;
                        if t >= back {
                            let src = (r - back) * ch + c;
                            dw.data[c * k + j] += gv * x.data[src];
                            dx.data[src] += gv * w.data[c * k + j];
                        }
                    }
                }
            }
        }
        vec![dx, dw, db]
    }
}

pub fn causal_conv_on_tape(tape: &mut Tape, x: Var, w: Var, bias: Var, batch: usize, len: usize) -> Result<Var> {
    let (tx, tw, tb) = (tape.value(x), tape.value(w), tape.value(bias));
    if tx.rows() != batch * len || tx.cols() != tw.rows() || tb.shape != [1, tw.rows()] {
        return shape_err("causal_conv", format!("x {:?}, w {:?}, b {:?} for {batch} x {len}", tx.shape, tw.shape, tb.shape));
    }
    let y = conv_forward(tx, tw, tb, batch, len);
    Ok(tape.custom(&[x, w, bias], y, Box::new(ConvOp { batch, len })))
}

/// Smoothed selective-state-space block.
#[derive(Debug, Clone)]
pub struct SMamba {
    pub cfg: SMambaConfig,
}

fn pname(name: &str) -> String {
    format!("{PREFIX}{name}")
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SMamba {
    pub fn new(cfg: SMambaConfig) -> Self {
        SMamba { cfg }
    }

    pub fn param_names() -> [&'static str; 12] {
        ["w_in", "conv_w", "conv_b", "w_delta", "b_delta", "w_b", "w_c", "a_log", "w_gate", "w_out", "s_out", "s_mm"]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let SMambaConfig { d_model: dm, d_inner: di, d_state: ds, conv_width: k, .. } = self.cfg;
        let bm = 1.0 / (dm as f64).sqrt();
        let bi = 1.0 / (di as f64).sqrt();
        let bk = 1.0 / (k as f64).sqrt();
        store.insert(&pname("w_in"), init_uniform(rng, dm, 2 * di, bm));
        store.insert(&pname("conv_w"), init_uniform(rng, di, k, bk));
        store.insert(&pname("conv_b"), init_uniform(rng, 1, di, bk));
        store.insert(&pname("w_delta"), init_uniform(rng, di, di, bi));
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let bd: Vec<f64> = (0..di).map(|_| inv_softplus(rng.random_range(lo..hi).exp())).collect();
        store.insert(&pname("b_delta"), Tensor::row(bd));
        store.insert(&pname("w_b"), init_uniform(rng, di, ds, bi));
        store.insert(&pname("w_c"), init_uniform(rng, di, ds, bi));
        let a_log: Vec<f64> = (0..di).flat_map(|_| (0..ds).map(|n| ((n + 1) as f64).ln())).collect();
        store.insert(&pname("a_log"), Tensor::from_vec(di, ds, a_log).expect("sized"));
        store.insert(&pname("w_gate"), init_uniform(rng, di, di, bi));
        store.insert(&pname("w_out"), init_uniform(rng, di, dm, bi));
        store.insert(&pname("s_out"), Tensor::filled(1, di, 1.0));
        store.insert(&pname("s_mm"), Tensor::filled(1, ds, 1.0));
        store.set_lower_bound(&pname("s_out"), SMOOTHING_FLOOR).expect("inserted");
        store.set_lower_bound(&pname("s_mm"), SMOOTHING_FLOOR).expect("inserted");
    }

    /// Re-applies the positivity floor after loading stored values.
    pub fn mark_bounds(store: &mut ParamStore) -> Result<()> {
        store.set_lower_bound(&pname("s_out"), SMOOTHING_FLOOR)?;
        store.set_lower_bound(&pname("s_mm"), SMOOTHING_FLOOR)
    }

    /// Block forward. `x` is `[batch * seq_len, d_model]`, `mask` marks
    /// valid rows. Returns the gated output at each sequence's last valid
    /// step, `[batch, d_model]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, mask: &[bool], frozen: bool) -> Result<Var> {
        let SMambaConfig { d_model: dm, d_inner: di, seq_len: len, .. } = self.cfg;
        let rows = batch * len;
        if tape.value(x).shape != [rows, dm] || mask.len() != rows {
            return shape_err("smamba", format!("x {:?}, mask {} for {batch} x {len} x {dm}", tape.value(x).shape, mask.len()));
        }
        let p = |name: &str, tape: &mut Tape| -> Result<Var> {
            let full = pname(name);
            if frozen {
                store.frozen(tape, &full)
            } else {
                store.var(tape, &full)
            }
        };
        let w_in = p("w_in", tape)?;
        let xz = tape.matmul(x, w_in)?;
        let xa = tape.slice_cols(xz, 0, di)?;
        let xg = tape.slice_cols(xz, di, di)?;
        let mcol = tape.constant(Tensor::from_vec(rows, 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?);
        let xa = tape.mul(xa, mcol)?;

        let conv_w = p("conv_w", tape)?;
        let conv_b = p("conv_b", tape)?;
        let xc = causal_conv_on_tape(tape, xa, conv_w, conv_b, batch, len)?;
        let xc = tape.silu(xc);

        let w_delta = p("w_delta", tape)?;
        let b_delta = p("b_delta", tape)?;
        let dl = tape.matmul(xc, w_delta)?;
        let dl = tape.add(dl, b_delta)?;
        let dl = tape.softplus(dl);

        let s_mm = p("s_mm", tape)?;
        let w_b = p("w_b", tape)?;
        let w_c = p("w_c", tape)?;
        let w_b = tape.div(w_b, s_mm)?;
        let w_c = tape.div(w_c, s_mm)?;
        let bmat = tape.matmul(xc, w_b)?;
        let cmat = tape.matmul(xc, w_c)?;
        let a_log = p("a_log", tape)?;
        let a = tape.exp(a_log);
        let a = tape.neg(a);
        let ln_s = tape.ln(s_mm);
        let y = scan_on_tape(tape, xc, dl, a, bmat, cmat, ln_s, batch, len, mask, self.cfg.delta_adjust, self.cfg.scan_mode)?;

        let last: Vec<usize> = (0..batch)
            .map(|b| (0..len).rev().find(|&t| mask[b * len + t]).map_or(b * len + len - 1, |t| b * len + t))
            .collect();
        let y_last = tape.gather_rows(y, &last)?;
        let g_last = tape.gather_rows(xg, &last)?;

        let s_out = p("s_out", tape)?;
        let w_gate = p("w_gate", tape)?;
        let w_out = p("w_out", tape)?;
        let wg = tape.div(w_gate, s_out)?;
        let s_col = tape.transpose(s_out);
        let wo = tape.mul(w_out, s_col)?;
        let z = tape.matmul(g_last, wg)?;
        let sz = tape.mul(z, s_out)?;
        let sig = tape.sigmoid(sz);
        let act = tape.mul(z, sig)?;
        let prod = tape.mul(y_last, act)?;
        tape.matmul(prod, wo)
    }
}

/// Matrix product helper used by callers that want plain tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return shape_err("matmul", format!("{:?} x {:?}", a.shape, b.shape));
    }
    let mut out = Tensor::zeros(a.rows(), b.cols());
    gemm(a, false, b, false, &mut out, false);
    Ok(out)
}

