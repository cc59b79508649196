//! Slow, literal reference evaluations used as ground truth.
//!
//! Nothing here shares code with the production kernels: every function is a
//! plain nested loop over output index, filter tap and (for LI) zone offset,
//! with an explicit bounds check standing in for zero padding. Everything is
//! `f64` and single-threaded.

use crate::conv::{ConvSpec, Padding};
use crate::error::{Error, Result};
use crate::li::{Activation, ConvKind, LIConvConfig, LIKernelSpec};
use crate::tensor::{Shape4, Tensor4};

/// Largest spatial side accepted by the oracles.
pub const MAX_SIDE: usize = 64;

/// Worst-case comparison between a candidate and a reference tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Where the largest relative error occurred.
    pub worst: String,
}

impl OracleReport {
    pub fn perfect() -> Self {
        OracleReport { max_abs_err: 0.0, max_rel_err: 0.0, worst: "none".into() }
    }

    pub fn merge(&mut self, other: OracleReport) {
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max_abs_err={:.3e} max_rel_err={:.3e} worst={}", self.max_abs_err, self.max_rel_err, self.worst)
    }
}

/// Absolute floor in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-9;

pub fn relative_error(candidate: f64, reference: f64) -> f64 {
    (candidate - reference).abs() / candidate.abs().max(reference.abs()).max(REL_FLOOR)
}

pub fn compare(candidate: &Tensor4<f64>, reference: &Tensor4<f64>, label: &str) -> Result<OracleReport> {
    if candidate.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "{label}: candidate {} vs reference {}",
            candidate.shape(),
            reference.shape()
        )));
    }
    let mut report = OracleReport::perfect();
    let s = reference.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let a = candidate.at(n, c, y, x);
                    let b = reference.at(n, c, y, x);
                    report.max_abs_err = report.max_abs_err.max((a - b).abs());
                    let rel = relative_error(a, b);
                    if rel > report.max_rel_err || !rel.is_finite() {
                        report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                        report.worst = format!("{label} at (n={n}, c={c}, y={y}, x={x}): {a} vs {b}");
                    }
                }
            }
        }
    }
    Ok(report)
}

fn check_size(s: Shape4) -> Result<()> {
    if s.h > MAX_SIDE || s.w > MAX_SIDE {
        return Err(Error::Dimension(format!("oracle input {s} exceeds {MAX_SIDE}x{MAX_SIDE}")));
    }
    Ok(())
}

/// Output side length and leading pad for one axis.
fn geometry(len: usize, spec: &ConvSpec) -> Result<(usize, isize)> {
    let k = spec.kernel_half_size as isize;
    let d = spec.dilation as isize;
    let s = spec.stride as isize;
    let pad = match spec.padding {
        Padding::SameZero => k * d,
        Padding::Valid => 0,
    };
    let span = 2 * k * d + 1;
    let room = len as isize + 2 * pad - span;
    if len == 0 || room < 0 || spec.dilation == 0 || spec.stride == 0 {
        return Err(Error::Dimension(format!("oracle: length {len} does not fit spec {spec:?}")));
    }
    Ok(((room / s + 1) as usize, pad))
}

/// Reads `g` at `(n, c, y, x)` or zero outside the grid.
fn sample(g: &Tensor4<f64>, n: usize, c: usize, y: isize, x: isize) -> f64 {
    let s = g.shape();
    if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
        0.0
    } else {
        g.at(n, c, y as usize, x as usize)
    }
}

/// Literal dilated correlation with dense channel mixing.
///
/// `out[n, co, p] = Σ_ci Σ_m F[co, ci, m] · G[n, ci, stride·p + d·m − pad]`
/// with `m` running over `[−k, k]²` (stored at `m + k`).
pub fn oracle_dilated_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, spec: &ConvSpec) -> Result<Tensor4<f64>> {
    let xs = x.shape();
    let ws = w.shape();
    check_size(xs)?;
    let ks = 2 * spec.kernel_half_size + 1;
    if ws.c != xs.c || ws.h != ks || ws.w != ks {
        return Err(Error::Dimension(format!("oracle conv: weights {ws} vs input {xs}")));
    }
    let (ho, pad_y) = geometry(xs.h, spec)?;
    let (wo, pad_x) = geometry(xs.w, spec)?;
    let k = spec.kernel_half_size as isize;
    let d = spec.dilation as isize;
    let st = spec.stride as isize;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ws.n, ho, wo));
    // n: batch, co: output channel, (py, px): output pixel p
    for n in 0..xs.n {
        for co in 0..ws.n {
            for py in 0..ho {
                for px in 0..wo {
                    let mut acc = 0.0;
                    // Σ over input channels and filter taps m
                    for ci in 0..xs.c {
                        for my in -k..=k {
                            for mx in -k..=k {
                                // tap centre: stride·p (+k·d for valid padding)
                                let iy = py as isize * st + (k * d - pad_y) + d * my;
                                let ix = px as isize * st + (k * d - pad_x) + d * mx;
                                let f = w.at(co, ci, (my + k) as usize, (mx + k) as usize);
                                acc += f * sample(x, n, ci, iy, ix);
                            }
                        }
                    }
                    out.set(n, co, py, px, acc);
                }
            }
        }
    }
    Ok(out)
}

/// The depthwise case: the reference applied channel by channel.
pub fn oracle_depthwise_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, spec: &ConvSpec) -> Result<Tensor4<f64>> {
    let xs = x.shape();
    if w.shape().n != xs.c || w.shape().c != 1 {
        return Err(Error::Dimension(format!("oracle depthwise: weights {} vs input {xs}", w.shape())));
    }
    let mut planes = Vec::with_capacity(xs.c);
    for c in 0..xs.c {
        let xc = Tensor4::from_fn(Shape4::new(xs.n, 1, xs.h, xs.w), |n, _, y, x_| x.at(n, c, y, x_));
        let wc = Tensor4::from_fn(Shape4::new(1, 1, w.shape().h, w.shape().w), |_, _, y, x_| w.at(c, 0, y, x_));
        planes.push(oracle_dilated_conv(&xc, &wc, spec)?);
    }
    let ps = planes[0].shape();
    Ok(Tensor4::from_fn(Shape4::new(xs.n, xs.c, ps.h, ps.w), |n, c, y, x_| planes[c].at(n, 0, y, x_)))
}

/// Inhibition intensity `L(u) = W_L · exp(−D²(u, 0) / 2σ²)` with Euclidean `D`.
fn intensity(w_l: f64, uy: isize, ux: isize, sigma: f64) -> f64 {
    let d2 = (uy * uy + ux * ux) as f64;
    w_l * (-d2 / (2.0 * sigma * sigma)).exp()
}

/// `G(v) − Σ_{u ≠ 0} L(u)·G(v + e·u)` for one pixel, with `G = relu(x)`.
fn inhibited_value(g: &Tensor4<f64>, n: usize, c: usize, vy: isize, vx: isize, w_l: f64, li: &LIKernelSpec) -> f64 {
    let t = li.zone_half_size as isize;
    let e = li.li_rate as isize;
    let mut inhibition = 0.0;
    for uy in -t..=t {
        for ux in -t..=t {
            if uy == 0 && ux == 0 {
                continue;
            }
            inhibition += intensity(w_l, uy, ux, li.sigma) * sample(g, n, c, vy + e * uy, vx + e * ux);
        }
    }
    sample(g, n, c, vy, vx) - inhibition
}

fn phi(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Relu => v.max(0.0),
        Activation::Identity => v,
    }
}

/// Literal LI-Conv: each sampled tap is rectified, inhibited by its dilated
/// zone, passed through `φ`, and weighted by the filter.
pub fn oracle_li_conv(x: &Tensor4<f64>, w_l: &[f64], conv_w: &Tensor4<f64>, cfg: &LIConvConfig) -> Result<Tensor4<f64>> {
    let xs = x.shape();
    check_size(xs)?;
    if w_l.len() != xs.c {
        return Err(Error::Dimension(format!("oracle LI: {} intensities for {} channels", w_l.len(), xs.c)));
    }
    let spec = &cfg.conv;
    let ws = conv_w.shape();
    let ks = 2 * spec.kernel_half_size + 1;
    let depthwise = cfg.conv_kind == ConvKind::Depthwise;
    let expected_c = if depthwise { 1 } else { xs.c };
    if ws.c != expected_c || ws.h != ks || ws.w != ks || (depthwise && ws.n != xs.c) {
        return Err(Error::Dimension(format!("oracle LI conv: weights {ws} vs input {xs}")));
    }
    let rectified = x.map(|v| v.max(0.0));
    let (ho, pad_y) = geometry(xs.h, spec)?;
    let (wo, pad_x) = geometry(xs.w, spec)?;
    let k = spec.kernel_half_size as isize;
    let d = spec.dilation as isize;
    let st = spec.stride as isize;
    let c_out = ws.n;
    let in_bounds = |y: isize, x_: isize| y >= 0 && x_ >= 0 && y < xs.h as isize && x_ < xs.w as isize;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, c_out, ho, wo));
    for n in 0..xs.n {
        for co in 0..c_out {
            for py in 0..ho {
                for px in 0..wo {
                    let mut acc = 0.0;
                    let channels: Vec<usize> = if depthwise { vec![co] } else { (0..xs.c).collect() };
                    for &ci in &channels {
                        let wc = if depthwise { 0 } else { ci };
                        for my in -k..=k {
                            for mx in -k..=k {
                                // sampled pixel n = p·stride + d·m (outside the grid the
                                // inhibited feature is zero-padded)
                                let vy = py as isize * st + (k * d - pad_y) + d * my;
                                let vx = px as isize * st + (k * d - pad_x) + d * mx;
                                if !in_bounds(vy, vx) {
                                    continue;
                                }
                                let inhibited = inhibited_value(&rectified, n, ci, vy, vx, w_l[ci], &cfg.li);
                                let f = conv_w.at(co, wc, (my + k) as usize, (mx + k) as usize);
                                acc += f * phi(cfg.phi, inhibited);
                            }
                        }
                    }
                    out.set(n, co, py, px, acc);
                }
            }
        }
    }
    Ok(out)
}

/// The LI layer alone: `G(v) − Σ_{u≠0} L(u)·G(v + e·u)` with no rectification.
pub fn oracle_li_layer(x: &Tensor4<f64>, w_l: &[f64], li: &LIKernelSpec) -> Result<Tensor4<f64>> {
    let s = x.shape();
    check_size(s)?;
    if w_l.len() != s.c {
        return Err(Error::Dimension(format!("oracle LI layer: {} intensities for {} channels", w_l.len(), s.c)));
    }
    Ok(Tensor4::from_fn(s, |n, c, y, x_| inhibited_value(x, n, c, y as isize, x_ as isize, w_l[c], li)))
}

/// Central differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every coordinate.
pub fn oracle_grad(mut f: impl FnMut(&[f64]) -> Result<f64>, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let up = f(&point)?;
        point[i] = theta[i] - h;
        let down = f(&point)?;
        point[i] = theta[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric(format!("objective is non-finite around coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
