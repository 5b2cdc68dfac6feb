//! Structured state-space (S4) layers.
//!
//! Each head is a single-input single-output system
//! `x'(t) = A x(t) + B u(t)`, `y(t) = C x(t) + D u(t)` with `A` fixed to the
//! HiPPO-LegS matrix. The system is discretized with the bilinear transform
//! and unrolled into a length-`L` convolution kernel, which is applied with
//! FFTs. The recurrent evaluation is kept alongside as a reference path.

use num_complex::Complex64;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fft::RealFft;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{gemm, Tensor};

/// HiPPO-LegS state matrix of size `n x n`:
/// `-sqrt(2i+1) sqrt(2j+1)` below the diagonal, `-(i+1)` on it, zero above.
pub fn hippo_legs(n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::domain("hippo_legs", "state dimension must be positive"));
    }
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if i > j {
            -((2 * i + 1) as f64).sqrt() * ((2 * j + 1) as f64).sqrt()
        } else if i == j {
            -((i + 1) as f64)
        } else {
            0.0
        }
    }))
}

/// HiPPO-LegS input vector, `B_i = sqrt(2i+1)`.
pub fn hippo_legs_input(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((2 * i + 1) as f64).sqrt()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmContinuous {
    /// `[N, N]`
    pub a: Tensor,
    /// length `N`
    pub b: Vec<f64>,
    /// length `N`
    pub c: Vec<f64>,
    pub d: f64,
    pub log_delta: f64,
}

impl SsmContinuous {
    pub fn hippo(c: Vec<f64>, d: f64, log_delta: f64) -> Result<Self> {
        let n = c.len();
        Ok(Self {
            a: hippo_legs(n)?,
            b: hippo_legs_input(n),
            c,
            d,
            log_delta,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.b.len()
    }

    pub fn delta(&self) -> f64 {
        self.log_delta.exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmDiscrete {
    /// `[N, N]`
    pub a_bar: Tensor,
    pub b_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel {
    pub k_bar: Vec<f64>,
}

/// Bilinear (Tustin) discretization with step `delta`:
/// `A_bar = (I - delta/2 A)^-1 (I + delta/2 A)`, `B_bar = (I - delta/2 A)^-1 delta B`.
pub fn discretize_bilinear(ssm: &SsmContinuous, delta: f64) -> Result<SsmDiscrete> {
    let n = ssm.state_dim();
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::domain("discretize_bilinear", format!("step {delta} must be positive")));
    }
    if ssm.a.shape() != [n, n] || ssm.c.len() != n {
        return Err(Error::dim(
            "discretize_bilinear",
            format!("A {:?}, B {n}, C {}", ssm.a.shape(), ssm.c.len()),
        ));
    }
    let parts = BilinearParts::new(ssm.a.data(), &ssm.b, n, delta)?;
    Ok(SsmDiscrete {
        a_bar: Tensor::from_parts(vec![n, n], parts.a_bar),
        b_bar: parts.b_bar,
        c_bar: ssm.c.clone(),
    })
}

/// Discretized matrices plus the resolvent `P = (I - delta/2 A)^-1` needed
/// to differentiate with respect to the step.
struct BilinearParts {
    p: Vec<f64>,
    a_bar: Vec<f64>,
    b_bar: Vec<f64>,
}

impl BilinearParts {
    fn new(a: &[f64], b: &[f64], n: usize, delta: f64) -> Result<Self> {
        let half = 0.5 * delta;
        let mut lhs = vec![0.0; n * n];
        let mut rhs = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                lhs[i * n + j] = id - half * a[i * n + j];
                rhs[i * n + j] = id + half * a[i * n + j];
            }
        }
        let p = invert(&lhs, n)?;
        let mut a_bar = vec![0.0; n * n];
        gemm(n, n, n, &p, false, &rhs, false, &mut a_bar, false);
        let b_bar = (0..n)
            .map(|i| delta * (0..n).map(|j| p[i * n + j] * b[j]).sum::<f64>())
            .collect();
        Ok(Self { p, a_bar, b_bar })
    }
}

/// Dense inverse: forward substitution for lower-triangular input (the
/// HiPPO case), otherwise Gauss–Jordan elimination with partial pivoting.
fn invert(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let lower = (0..n).all(|i| m[i * n + i + 1..(i + 1) * n].iter().all(|&v| v == 0.0));
    if lower {
        return invert_lower(m, n);
    }
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let (mut max_pivot, mut min_pivot) = (0.0f64, f64::INFINITY);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .unwrap_or(col);
        let pv = a[piv * n + col];
        max_pivot = max_pivot.max(pv.abs());
        min_pivot = min_pivot.min(pv.abs());
        if pv.abs() <= 1e-14 * scale {
            return Err(Error::Singular {
                condition: if min_pivot > 0.0 { max_pivot / min_pivot } else { f64::INFINITY },
            });
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
                inv.swap(piv * n + j, col * n + j);
            }
        }
        let r = 1.0 / pv;
        for j in 0..n {
            a[col * n + j] *= r;
            inv[col * n + j] *= r;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[row * n + j] -= f * a[col * n + j];
                inv[row * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}

fn invert_lower(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let diag = (0..n).map(|i| m[i * n + i].abs());
    let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
    if lo <= 1e-14 * scale {
        return Err(Error::Singular {
            condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        });
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        let r = 1.0 / m[i * n + i];
        // row i of the inverse: (e_i - sum_{k<i} m[i,k] inv[k,:]) / m[i,i]
        let (done, row) = inv.split_at_mut(i * n);
        let row = &mut row[..n];
        row[i] = 1.0;
        for k in 0..i {
            let f = m[i * n + k];
            if f != 0.0 {
                row.iter_mut().zip(&done[k * n..(k + 1) * n]).for_each(|(x, y)| *x -= f * y);
            }
        }
        row.iter_mut().for_each(|x| *x *= r);
    }
    Ok(inv)
}

fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks(n)) {
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn matvec_t(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    out.fill(0.0);
    for (row, &vi) in m.chunks(n).zip(v) {
        out.iter_mut().zip(row).for_each(|(o, a)| *o += a * vi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fills row `i` of `states` with `A_bar^i B_bar`, doubling the number of
/// filled rows per matrix product.
fn krylov(a_bar: &[f64], b_bar: &[f64], states: &mut [f64]) {
    let n = b_bar.len();
    let len = states.len() / n;
    states[..n].copy_from_slice(b_bar);
    let mut power = a_bar.to_vec();
    let mut next = vec![0.0; n * n];
    let mut filled = 1;
    while filled < len {
        let m = filled.min(len - filled);
        let (done, rest) = states.split_at_mut(filled * n);
        gemm(m, n, n, &done[..m * n], false, &power, true, &mut rest[..m * n], false);
        filled += m;
        if filled < len {
            gemm(n, n, n, &power, false, &power, false, &mut next, false);
            std::mem::swap(&mut power, &mut next);
        }
    }
}

/// Unrolls `k[i] = C A_bar^i B_bar` for `i < len` by propagating the state.
pub fn materialize_kernel(d: &SsmDiscrete, len: usize) -> Result<SsmKernel> {
    if len == 0 {
        return Err(Error::domain("materialize_kernel", "kernel length must be positive"));
    }
    let n = d.b_bar.len();
    let mut v = d.b_bar.clone();
    let mut next = vec![0.0; n];
    let mut k_bar = Vec::with_capacity(len);
    for i in 0..len {
        k_bar.push(dot(&d.c_bar, &v));
        if i + 1 < len {
            matvec(d.a_bar.data(), &v, &mut next);
            std::mem::swap(&mut v, &mut next);
        }
    }
    Ok(SsmKernel { k_bar })
}

/// `y[t] = sum_{i<=t} k[i] u[t-i] + D u[t]`, through FFTs of length `2L`.
pub fn apply_convolutional(k: &SsmKernel, u: &[f64], d: f64) -> Result<Vec<f64>> {
    let len = u.len();
    if k.k_bar.len() != len {
        return Err(Error::dim(
            "apply_convolutional",
            format!("kernel length {} vs input length {len}", k.k_bar.len()),
        ));
    }
    let plan = RealFft::cached((2 * len).next_power_of_two())?;
    let zero = Complex64::new(0.0, 0.0);
    let mut ks = vec![zero; plan.bins()];
    let mut us = vec![zero; plan.bins()];
    plan.forward(&k.k_bar, &mut ks);
    plan.forward(u, &mut us);
    us.iter_mut().zip(&ks).for_each(|(a, b)| *a *= b);
    let mut y = vec![0.0; len];
    plan.inverse(&us, &mut y);
    y.iter_mut().zip(u).for_each(|(o, v)| *o += d * v);
    Ok(y)
}

/// State recursion `x_k = A_bar x_{k-1} + B_bar u_k`, `y_k = C x_k + D u_k`, `x_{-1} = 0`.
pub fn apply_recurrent(disc: &SsmDiscrete, u: &[f64], d: f64) -> Vec<f64> {
    let n = disc.b_bar.len();
    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    u.iter()
        .map(|&uk| {
            matvec(disc.a_bar.data(), &x, &mut next);
            next.iter_mut().zip(&disc.b_bar).for_each(|(s, b)| *s += b * uk);
            std::mem::swap(&mut x, &mut next);
            dot(&disc.c_bar, &x) + d * uk
        })
        .collect()
}

/// Differentiable kernels for `H` heads sharing the frozen `(A, B)`.
///
/// `c: [H, N]`, `log_delta: [H]`; output `[H, len]`. Gradients with
/// respect to the step go through the derivative of the bilinear transform:
/// `dA_bar/dDelta = P (A/2) (A_bar + I)`, `dB_bar/dDelta = P (B + (A/2) B_bar)`.
pub fn ssm_kernels<'t>(
    c: Var<'t>,
    log_delta: Var<'t>,
    a: &Tensor,
    b: &[f64],
    len: usize,
) -> Result<Var<'t>> {
    let n = b.len();
    let (heads, parts, states, out) = {
        let (cv, ld) = (c.value(), log_delta.value());
        let heads = match cv.shape() {
            [h, nn] if *nn == n => *h,
            s => return Err(Error::dim("ssm_kernels", format!("C {s:?} for state dim {n}"))),
        };
        if ld.shape() != [heads] {
            return Err(Error::dim("ssm_kernels", format!("log_delta {:?}", ld.shape())));
        }
        let mut parts = Vec::with_capacity(heads);
        let mut states = vec![0.0; heads * len * n];
        let mut out = vec![0.0; heads * len];
        for h in 0..heads {
            let delta = ld.data()[h].exp();
            let bp = BilinearParts::new(a.data(), b, n, delta)?;
            let st = &mut states[h * len * n..(h + 1) * len * n];
            krylov(&bp.a_bar, &bp.b_bar, st);
            let ch = &cv.data()[h * n..(h + 1) * n];
            gemm(len, n, 1, st, false, ch, false, &mut out[h * len..(h + 1) * len], false);
            parts.push((delta, bp));
        }
        (heads, parts, states, Tensor::from_parts(vec![heads, len], out))
    };
    let a = a.data().to_vec();
    let b = b.to_vec();
    let tape: &Tape = c.tape();
    tape.record(
        "ssm_kernels",
        out,
        &[c, log_delta],
        Box::new(move |ctx| {
            let cv = ctx.inputs[0].data();
            let mut dc = vec![0.0; heads * n];
            let mut dld = vec![0.0; heads];
            let mut lam = vec![0.0; len * n];
            let mut tmp = vec![0.0; n];
            let mut d_abar = vec![0.0; n * n];
            let mut work = vec![0.0; n * n];
            let mut pa = vec![0.0; n * n];
            let mut da_dd = vec![0.0; n * n];
            let mut db_dd = vec![0.0; n];
            for h in 0..heads {
                let g = &ctx.grad[h * len..(h + 1) * len];
                let ch = &cv[h * n..(h + 1) * n];
                let st = &states[h * len * n..(h + 1) * len * n];
                gemm(1, len, n, g, false, st, false, &mut dc[h * n..(h + 1) * n], false);
                if !ctx.needs[1] {
                    continue;
                }
                let (delta, bp) = &parts[h];
                // adjoint of the state recursion
                for i in (0..len).rev() {
                    let (head, tail) = lam.split_at_mut((i + 1) * n);
                    let li = &mut head[i * n..];
                    if i + 1 < len {
                        matvec_t(&bp.a_bar, &tail[..n], li);
                    } else {
                        li.fill(0.0);
                    }
                    li.iter_mut().zip(ch).for_each(|(l, c)| *l += g[i] * c);
                }
                // d/dA_bar = sum_i lam_{i+1} v_i^T
                if len > 1 {
                    gemm(n, len - 1, n, &lam[n..], true, &st[..(len - 1) * n], false, &mut d_abar, false);
                } else {
                    d_abar.fill(0.0);
                }
                let d_bbar = &lam[..n];
                // P (A/2)
                gemm(n, n, n, &bp.p, false, &a, false, &mut pa, false);
                pa.iter_mut().for_each(|v| *v *= 0.5);
                // dA_bar/dDelta = P (A/2) (A_bar + I)
                work.copy_from_slice(&bp.a_bar);
                for i in 0..n {
                    work[i * n + i] += 1.0;
                }
                gemm(n, n, n, &pa, false, &work, false, &mut da_dd, false);
                // dB_bar/dDelta = P B + P (A/2) B_bar
                matvec(&bp.p, &b, &mut db_dd);
                matvec(&pa, &bp.b_bar, &mut tmp);
                db_dd.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                let d_delta = dot(&d_abar, &da_dd) + dot(d_bbar, &db_dd);
                dld[h] = delta * d_delta;
            }
            vec![ctx.needs[0].then_some(dc), ctx.needs[1].then_some(dld)]
        }),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Bidirectional,
}

#[derive(Clone, Copy, Debug)]
struct SsmHeads {
    c: ParamId,
    log_delta: ParamId,
}

/// `H` independent SISO heads with a shared HiPPO-LegS `(A, B)`, pre-SSM layer
/// normalization over channels and one feedthrough `D` per head. The
/// bidirectional case adds a second set of heads run over the reversed
/// sequence, sums both directions and mixes the channels with a learned
/// pointwise projection.
#[derive(Clone, Debug)]
pub struct S4Layer {
    heads: usize,
    state_dim: usize,
    direction: Direction,
    a: Tensor,
    b: Vec<f64>,
    forward: SsmHeads,
    backward: Option<SsmHeads>,
    feedthrough: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    projection: Option<(ParamId, ParamId)>,
}

pub const DELTA_MIN: f64 = 1e-3;
pub const DELTA_MAX: f64 = 1e-1;
const LN_EPS: f64 = 1e-5;

impl S4Layer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        heads: usize,
        state_dim: usize,
        direction: Direction,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("S4 layer needs at least one head".into()));
        }
        let a = hippo_legs(state_dim)?;
        let b = hippo_legs_input(state_dim);
        let mut ssm = |tag: &str, rng: &mut SeededRng| {
            let c_std = (1.0 / state_dim as f64).sqrt();
            let c = Tensor::from_fn(&[heads, state_dim], |_| c_std * rng.normal());
            let (lo, hi) = (DELTA_MIN.ln(), DELTA_MAX.ln());
            let ld = Tensor::from_fn(&[heads], |_| rng.uniform_range(lo, hi));
            SsmHeads {
                c: store.add(format!("{prefix}.{tag}.c"), c),
                log_delta: store.add(format!("{prefix}.{tag}.log_delta"), ld),
            }
        };
        let forward = ssm("fwd", rng);
        let backward = (direction == Direction::Bidirectional).then(|| ssm("bwd", rng));
        let feedthrough = store.add(format!("{prefix}.d"), Tensor::from_fn(&[heads], |_| rng.normal()));
        let ln_gain = store.add(format!("{prefix}.norm.gain"), Tensor::ones(&[heads]));
        let ln_bias = store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[heads]));
        let projection = (direction == Direction::Bidirectional).then(|| {
            let std = (1.0 / heads as f64).sqrt();
            let w = Tensor::from_fn(&[heads, heads], |_| std * rng.normal());
            (
                store.add(format!("{prefix}.proj.weight"), w),
                store.add(format!("{prefix}.proj.bias"), Tensor::zeros(&[heads])),
            )
        });
        Ok(Self {
            heads,
            state_dim,
            direction,
            a,
            b,
            forward,
            backward,
            feedthrough,
            ln_gain,
            ln_bias,
            projection,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// The continuous system of one head, read from `store`. The feedthrough
    /// belongs to the forward system; the reverse system's `d` is 0.
    pub fn head_system(&self, store: &ParamStore, head: usize, reverse: bool) -> Option<SsmContinuous> {
        let ids = if reverse { self.backward? } else { self.forward };
        let n = self.state_dim;
        Some(SsmContinuous {
            a: self.a.clone(),
            b: self.b.clone(),
            c: store.get(ids.c).data()[head * n..(head + 1) * n].to_vec(),
            d: if reverse { 0.0 } else { store.get(self.feedthrough).data()[head] },
            log_delta: store.get(ids.log_delta).data()[head],
        })
    }

    /// `x: [B, H, L]` to `[B, H, L]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let len = match shape.as_slice() {
            [_, h, l] if *h == self.heads => *l,
            s => {
                return Err(Error::dim(
                    "s4_forward",
                    format!("expected [batch, {}, time], got {s:?}", self.heads),
                ))
            }
        };
        let xn = x.layer_norm_channels(p[self.ln_gain], p[self.ln_bias], LN_EPS)?;
        let kernel = |ids: &SsmHeads| ssm_kernels(p[ids.c], p[ids.log_delta], &self.a, &self.b, len);
        let k_fwd = kernel(&self.forward)?;
        let d = p[self.feedthrough];
        match (&self.backward, &self.projection) {
            (Some(bwd), Some((w, b))) => xn
                .two_sided_conv(k_fwd, kernel(bwd)?, d)?
                .conv1x1(p[*w], p[*b]),
            _ => xn.causal_conv(k_fwd, d),
        }
    }
}
