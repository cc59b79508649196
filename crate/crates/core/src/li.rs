//! Lateral-inhibition filters, the LI layer, and the composed LI-Conv operator.
//!
//! The LI filter over a `(2t+1)²` zone has centre `1` and surround
//! `−w·exp(−|u|²/2σ²)`, where `|u|` is measured in zone-lattice units. The LI
//! rate `e` only spaces the taps, so the layer is a depthwise correlation
//! with dilation `e`, stride 1 and zero padding.

use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{relu, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LIKernelSpec {
    pub zone_half_size: usize,
    pub li_rate: usize,
    pub sigma: f64,
    pub distance: Distance,
}

impl Default for LIKernelSpec {
    fn default() -> Self {
        LIKernelSpec { zone_half_size: 1, li_rate: 1, sigma: 1.0, distance: Distance::Euclidean }
    }
}

impl LIKernelSpec {
    pub fn new(zone_half_size: usize, li_rate: usize, sigma: f64) -> Self {
        LIKernelSpec { zone_half_size, li_rate, sigma, distance: Distance::Euclidean }
    }

    pub fn zone_size(&self) -> usize {
        2 * self.zone_half_size + 1
    }

    pub fn taps(&self) -> usize {
        self.zone_size() * self.zone_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.li_rate == 0 {
            return Err(Error::Parameter("LI rate must be at least 1".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// The depthwise geometry that realises the LI layer.
    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec::same(self.zone_half_size, self.li_rate)
    }

    /// Squared distance of zone offset `u` from the centre.
    fn distance_sq(&self, dy: isize, dx: isize) -> f64 {
        match self.distance {
            Distance::Euclidean => (dy * dy + dx * dx) as f64,
        }
    }

    /// `exp(−D²(u, 0)/2σ²)` for every zone offset, row-major, with the centre set to 0.
    pub fn surround(&self) -> Vec<f64> {
        let t = self.zone_half_size as isize;
        let two_var = 2.0 * self.sigma * self.sigma;
        let mut out = Vec::with_capacity(self.taps());
        for dy in -t..=t {
            for dx in -t..=t {
                if dy == 0 && dx == 0 {
                    out.push(0.0);
                } else {
                    out.push((-self.distance_sq(dy, dx) / two_var).exp());
                }
            }
        }
        out
    }
}

/// Square filter grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2d {
    pub size: usize,
    pub values: Vec<f64>,
}

impl Kernel2d {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    /// Value at offset `(dy, dx)` from the centre.
    pub fn at_offset(&self, dy: isize, dx: isize) -> f64 {
        let c = (self.size / 2) as isize;
        self.get((c + dy) as usize, (c + dx) as usize)
    }

    /// One row per line, entries separated by a space, shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

fn check_intensity(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Parameter(format!("LI intensity {w} is outside [0, 1]")));
    }
    Ok(())
}

pub fn build_li_kernel(spec: &LIKernelSpec, w_l_c: f64) -> Result<Kernel2d> {
    spec.validate()?;
    check_intensity(w_l_c)?;
    let mut values: Vec<f64> = spec.surround().into_iter().map(|g| -w_l_c * g).collect();
    values[spec.taps() / 2] = 1.0;
    Ok(Kernel2d { size: spec.zone_size(), values })
}

/// Learnable per-channel intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct LILayerParams<T> {
    pub w_l: Vec<T>,
}

impl<T: Scalar> LILayerParams<T> {
    pub fn zeros(channels: usize) -> Self {
        LILayerParams { w_l: vec![T::zero(); channels] }
    }

    pub fn uniform(channels: usize, value: T) -> Self {
        LILayerParams { w_l: vec![value; channels] }
    }

    pub fn channels(&self) -> usize {
        self.w_l.len()
    }

    /// Stored in a parameter store as `(1, C, 1, 1)`.
    pub fn to_tensor(&self) -> Tensor4<T> {
        Tensor4::from_vec(Shape4::new(1, self.w_l.len(), 1, 1), self.w_l.clone()).expect("length matches")
    }

    pub fn from_tensor(t: &Tensor4<T>) -> Self {
        LILayerParams { w_l: t.data().to_vec() }
    }
}

pub fn project_wl<T: Scalar>(params: &LILayerParams<T>) -> LILayerParams<T> {
    LILayerParams { w_l: params.w_l.iter().map(|&w| clamp_unit(w)).collect() }
}

pub(crate) fn clamp_unit<T: Scalar>(w: T) -> T {
    if w < T::zero() {
        T::zero()
    } else if w > T::one() {
        T::one()
    } else {
        w
    }
}

fn check_channels<T: Scalar>(x: &Tensor4<T>, w_l: &[T]) -> Result<()> {
    if w_l.len() != x.shape().c {
        return Err(Error::dim(format!(
            "LI layer has {} intensities for {} channels",
            w_l.len(),
            x.shape().c
        )));
    }
    Ok(())
}

fn channel_kernels<T: Scalar>(spec: &LIKernelSpec, w_l: &[T]) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(w_l.len() * spec.taps());
    for &w in w_l {
        let k = build_li_kernel(spec, w.as_f64())?;
        out.extend(k.values.iter().map(|&v| T::from_f64(v)));
    }
    Ok(out)
}

/// Applies the per-channel LI filter: `y = x − Σ_u L(u)·x(· + e·u)`.
pub fn li_layer_forward<T: Scalar>(x: &Tensor4<T>, params: &LILayerParams<T>, spec: &LIKernelSpec) -> Result<Tensor4<T>> {
    li_layer_forward_raw(x, &params.w_l, spec)
}

/// The surround correlation over one zero-bordered, row-flattened plane.
#[derive(Debug, Clone)]
enum SurroundTaps<T> {
    /// `3×3` zone: one pass per zone row, three taps each.
    Rows3(Vec<(usize, [T; 3])>),
    /// Any zone: one pass per non-zero tap.
    Taps(Vec<(usize, T)>),
}

#[inline(always)]
fn correlate_generic<T: Scalar>(acc: &mut [T], src: &[T], taps: &SurroundTaps<T>) {
    let n = acc.len();
    match taps {
        SurroundTaps::Rows3(rows) => {
            for (r, &(off, g)) in rows.iter().enumerate() {
                let a = &src[off..off + n + 2];
                let (a0, a1, a2) = (&a[..n], &a[1..n + 1], &a[2..n + 2]);
                if r == 0 {
                    for (((y, &u), &v), &w) in acc.iter_mut().zip(a0).zip(a1).zip(a2) {
                        *y = g[0] * u + g[1] * v + g[2] * w;
                    }
                } else {
                    for (((y, &u), &v), &w) in acc.iter_mut().zip(a0).zip(a1).zip(a2) {
                        *y += g[0] * u + g[1] * v + g[2] * w;
                    }
                }
            }
        }
        SurroundTaps::Taps(taps) => {
            acc.iter_mut().for_each(|v| *v = T::zero());
            for &(off, g) in taps {
                for (y, &v) in acc.iter_mut().zip(&src[off..off + n]) {
                    *y += g * v;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_avx2<T: Scalar>(acc: &mut [T], src: &[T], taps: &SurroundTaps<T>) {
    correlate_generic(acc, src, taps)
}

fn correlate<T: Scalar>(acc: &mut [T], src: &[T], taps: &SurroundTaps<T>) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { correlate_avx2(acc, src, taps) };
    }
    correlate_generic(acc, src, taps)
}

/// Reusable per-plane state for `G ⋆ x` with zero padding.
///
/// Each plane is copied into a zero-bordered scratch buffer and the
/// correlation runs over it flattened, so every pass is one contiguous loop;
/// the border columns are computed and discarded.
struct SurroundPlanes<T> {
    h: usize,
    w: usize,
    p: usize,
    pw: usize,
    taps: SurroundTaps<T>,
    padded: Vec<T>,
    acc: Vec<T>,
}

impl<T: Scalar> SurroundPlanes<T> {
    fn new(spec: &LIKernelSpec, h: usize, w: usize) -> Self {
        let e = spec.li_rate;
        let p = spec.zone_half_size * e;
        let pw = w + 2 * p;
        let zs = spec.zone_size();
        let g: Vec<T> = spec.surround().into_iter().map(T::from_f64).collect();
        let taps = if zs == 3 && e == 1 {
            SurroundTaps::Rows3((0..3).map(|r| (r * pw, [g[3 * r], g[3 * r + 1], g[3 * r + 2]])).collect())
        } else {
            SurroundTaps::Taps(
                g.iter()
                    .enumerate()
                    .filter(|&(_, &v)| v != T::zero())
                    .map(|(i, &v)| ((i / zs) * e * pw + (i % zs) * e, v))
                    .collect(),
            )
        };
        let span = if h == 0 { 0 } else { (h - 1) * pw + w };
        SurroundPlanes { h, w, p, pw, taps, padded: vec![T::zero(); (h + 2 * p) * pw], acc: vec![T::zero(); span] }
    }

    /// Correlates `src`; the result row `y` is `acc()[y·pw ..][.. w]`.
    fn run(&mut self, src: &[T]) {
        let (p, pw, w) = (self.p, self.pw, self.w);
        for (row, d) in src.chunks_exact(w).zip(self.padded[p * pw..].chunks_exact_mut(pw)) {
            d[p..p + w].copy_from_slice(row);
        }
        correlate(&mut self.acc, &self.padded, &self.taps);
    }

    fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.acc.chunks(self.pw).map(|r| &r[..self.w]).take(self.h)
    }
}

/// `y = x − w_c·s` channel by channel; `w_c = 0` copies `x` exactly.
fn combine_into<T: Scalar>(out: &mut Vec<T>, x: &[T], s: impl Iterator<Item = T>, w: T) {
    if w == T::zero() {
        out.extend_from_slice(x);
    } else {
        out.extend(x.iter().zip(s).map(|(&v, sv)| v - w * sv));
    }
}

fn surround_unchecked<T: Scalar>(x: &Tensor4<T>, spec: &LIKernelSpec) -> Tensor4<T> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 || spec.zone_half_size == 0 {
        return Tensor4::zeros(s);
    }
    let mut planes = SurroundPlanes::new(spec, s.h, s.w);
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for c in 0..s.c {
            planes.run(x.plane(n, c));
            for r in planes.rows() {
                out.extend_from_slice(r);
            }
        }
    }
    Tensor4::from_vec(s, out).expect("shape preserved")
}

/// The inhibitory surround `Σ_{u≠0} G(u)·x(· + e·u)` for every channel: the
/// part of the LI filter that does not depend on the intensities.
pub fn li_surround<T: Scalar>(x: &Tensor4<T>, spec: &LIKernelSpec) -> Result<Tensor4<T>> {
    spec.validate()?;
    x.ensure_finite("LI layer input")?;
    Ok(surround_unchecked(x, spec))
}

/// Adjoint of [`li_surround`]. `G` is point-symmetric, so with zero padding
/// the adjoint of the correlation is the correlation itself.
pub(crate) fn li_surround_adjoint<T: Scalar>(g: &Tensor4<T>, spec: &LIKernelSpec) -> Tensor4<T> {
    surround_unchecked(g, spec)
}

/// `y = x − w_c·s` given a precomputed surround `s = li_surround(x)`.
pub fn li_combine<T: Scalar>(x: &Tensor4<T>, surround: &Tensor4<T>, w_l: &[T]) -> Result<Tensor4<T>> {
    check_channels(x, w_l)?;
    if surround.shape() != x.shape() {
        return Err(Error::dim(format!("LI surround {} for input {}", surround.shape(), x.shape())));
    }
    for &w in w_l {
        check_intensity(w.as_f64())?;
    }
    let s = x.shape();
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for (c, &w) in w_l.iter().enumerate() {
            combine_into(&mut out, x.plane(n, c), surround.plane(n, c).iter().copied(), w);
        }
    }
    Tensor4::from_vec(s, out)
}

/// Gradients of [`li_combine`] with respect to `x`, the surround and `w_l`.
pub(crate) fn li_combine_backward<T: Scalar>(
    surround: &Tensor4<T>,
    w_l: &[T],
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>)> {
    let s = surround.shape();
    if grad_out.shape() != s {
        return Err(Error::dim(format!("LI backward: gradient {} expected {s}", grad_out.shape())));
    }
    let mut gs = Vec::with_capacity(s.len());
    let mut gw = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (c, &w) in w_l.iter().enumerate() {
            let g = grad_out.plane(n, c);
            gs.extend(g.iter().map(|&v| -(w * v)));
            gw[c] -= g.iter().zip(surround.plane(n, c)).map(|(&a, &b)| (a * b).as_f64()).sum::<f64>();
        }
    }
    Ok((Tensor4::from_vec(s, gs)?, gw.into_iter().map(T::from_f64).collect()))
}

/// Applies the per-channel LI filter. Every channel shares the surround
/// shape `G`, so `y = x − w_c·(G ⋆ x)`; channels with `w_c = 0` skip the
/// correlation and are copied, so zero intensity is an exact identity.
pub(crate) fn li_layer_forward_raw<T: Scalar>(x: &Tensor4<T>, w_l: &[T], spec: &LIKernelSpec) -> Result<Tensor4<T>> {
    check_channels(x, w_l)?;
    spec.validate()?;
    for &w in w_l {
        check_intensity(w.as_f64())?;
    }
    x.ensure_finite("LI layer input")?;
    let s = x.shape();
    if s.h == 0 || s.w == 0 || spec.zone_half_size == 0 || w_l.iter().all(|&w| w == T::zero()) {
        return Ok(x.clone());
    }
    let mut planes = SurroundPlanes::new(spec, s.h, s.w);
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for (c, &w) in w_l.iter().enumerate() {
            let src = x.plane(n, c);
            if w == T::zero() {
                out.extend_from_slice(src);
                continue;
            }
            planes.run(src);
            for (row, sr) in src.chunks_exact(s.w).zip(planes.rows()) {
                combine_into(&mut out, row, sr.iter().copied(), w);
            }
        }
    }
    Tensor4::from_vec(s, out)
}

#[derive(Debug, Clone)]
pub struct LIGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub w_l: Option<Vec<T>>,
}

/// Exact gradients of [`li_layer_forward`].
///
/// The input gradient is the adjoint (full correlation) of the filter; since
/// the filter is affine in `w`, `∂y/∂w_c` is the surround correlation negated.
pub fn li_layer_backward<T: Scalar>(
    x: &Tensor4<T>,
    params: &LILayerParams<T>,
    spec: &LIKernelSpec,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>)> {
    let g = li_layer_backward_raw(x, &params.w_l, spec, grad_out, true, true)?;
    Ok((g.input.expect("requested"), g.w_l.expect("requested")))
}

pub(crate) fn li_layer_backward_raw<T: Scalar>(
    x: &Tensor4<T>,
    w_l: &[T],
    spec: &LIKernelSpec,
    grad_out: &Tensor4<T>,
    want_input: bool,
    want_w: bool,
) -> Result<LIGrads<T>> {
    check_channels(x, w_l)?;
    let s = x.shape();
    if grad_out.shape() != s {
        return Err(Error::dim(format!("LI backward: gradient {} expected {s}", grad_out.shape())));
    }
    let cs = spec.conv_spec();
    let taps = spec.taps();
    let surround = spec.surround();
    let kernels = if want_input { channel_kernels(spec, w_l)? } else { Vec::new() };
    let mut gx = want_input.then(|| Tensor4::zeros(s));
    let mut gw = want_w.then(|| vec![0.0f64; s.c]);
    let mut tap_acc = vec![0.0f64; taps];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            if let Some(gx) = gx.as_mut() {
                let k = &kernels[c * taps..(c + 1) * taps];
                conv::depthwise_plane_input_grad(g, s.h, s.w, k, &cs, s.h, s.w, gx.plane_mut(n, c));
            }
            if let Some(gw) = gw.as_mut() {
                tap_acc.iter_mut().for_each(|v| *v = 0.0);
                conv::depthwise_plane_tap_grad(x.plane(n, c), s.h, s.w, g, &cs, s.h, s.w, &mut tap_acc);
                gw[c] -= surround.iter().zip(&tap_acc).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Ok(LIGrads { input: gx, w_l: gw.map(|v| v.into_iter().map(T::from_f64).collect()) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(&self, x: &Tensor4<T>) -> Tensor4<T> {
        match self {
            Activation::Relu => relu(x),
            Activation::Identity => x.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Dense,
    Depthwise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LIConvConfig {
    pub conv: ConvSpec,
    pub conv_kind: ConvKind,
    pub li: LIKernelSpec,
    pub phi: Activation,
}

impl LIConvConfig {
    pub fn new(conv: ConvSpec, conv_kind: ConvKind, li: LIKernelSpec) -> Self {
        LIConvConfig { conv, conv_kind, li, phi: Activation::Relu }
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        self.li.validate()
    }
}

/// `conv(φ(LI(relu(x))))`: ReLU, LI layer, activation, then the dilated convolution.
pub fn li_conv_forward<T: Scalar>(
    x: &Tensor4<T>,
    li_params: &LILayerParams<T>,
    conv_w: &Tensor4<T>,
    cfg: &LIConvConfig,
) -> Result<Tensor4<T>> {
    cfg.validate()?;
    let rectified = relu(x);
    let inhibited = li_layer_forward(&rectified, li_params, &cfg.li)?;
    let activated = cfg.phi.apply(&inhibited);
    match cfg.conv_kind {
        ConvKind::Dense => conv::conv2d_dilated(&activated, conv_w, &cfg.conv, None),
        ConvKind::Depthwise => conv::depthwise_conv2d_dilated(&activated, conv_w, &cfg.conv, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_intensity_kernel_is_delta() {
        for sigma in [0.3, 1.0, 4.0] {
            let k = build_li_kernel(&LIKernelSpec::new(1, 1, sigma), 0.0).unwrap();
            for r in 0..3 {
                for c in 0..3 {
                    let expected = if r == 1 && c == 1 { 1.0 } else { 0.0 };
                    assert_eq!(k.get(r, c), expected);
                }
            }
        }
    }

    #[test]
    fn quarter_intensity_kernel() {
        let k = build_li_kernel(&LIKernelSpec::new(1, 1, 1.0), 0.25).unwrap();
        assert_eq!(k.at_offset(0, 0), 1.0);
        for (dy, dx) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
            assert!(close(k.at_offset(dy, dx), -0.151633, 1e-6));
        }
        for (dy, dx) in [(1, 1), (-1, 1), (1, -1), (-1, -1)] {
            assert!(close(k.at_offset(dy, dx), -0.091970, 1e-6));
        }
        let k2 = build_li_kernel(&LIKernelSpec::new(2, 1, 1.0), 1.0).unwrap();
        assert!(close(k2.at_offset(2, 1), -0.082085, 1e-6));
    }

    #[test]
    fn kernel_parameter_errors() {
        let spec = LIKernelSpec::default();
        assert!(matches!(build_li_kernel(&spec, -0.01), Err(Error::Parameter(_))));
        assert!(matches!(build_li_kernel(&spec, 1.01), Err(Error::Parameter(_))));
        assert!(build_li_kernel(&LIKernelSpec::new(1, 0, 1.0), 0.5).is_err());
        assert!(build_li_kernel(&LIKernelSpec::new(1, 1, 0.0), 0.5).is_err());
    }

    #[test]
    fn projection_clamps() {
        let p = project_wl(&LILayerParams { w_l: vec![0.5f32, -0.1, 1.7] });
        assert_eq!(p.w_l, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn zero_intensity_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::<f32>::random_uniform(Shape4::new(2, 3, 6, 5), -2.0, 2.0, &mut rng);
        for spec in [LIKernelSpec::new(1, 1, 1.0), LIKernelSpec::new(2, 3, 0.7)] {
            let y = li_layer_forward(&x, &LILayerParams::zeros(3), &spec).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn constant_interior_suppression() {
        let c = 0.8;
        let x = Tensor4::<f64>::full(Shape4::new(1, 1, 5, 5), c);
        let y = li_layer_forward(&x, &LILayerParams::uniform(1, 0.25), &LIKernelSpec::default()).unwrap();
        let expected = c * (1.0 - 0.25 * (4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp()));
        assert!(close(y.at(0, 0, 2, 2), expected, 1e-12));
        assert!(close(expected, c * (1.0 - 4.0 * 0.151633 - 4.0 * 0.091970), 1e-5));
    }

    #[test]
    fn channel_count_mismatch() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 2, 3, 3));
        assert!(matches!(
            li_layer_forward(&x, &LILayerParams::zeros(3), &LIKernelSpec::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
        let spec = LIKernelSpec::default();
        let params = LILayerParams::uniform(2, 0.6);
        let (gx, gw) = li_layer_backward(&x, &params, &spec, &Tensor4::zeros(x.shape())).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.iter().all(|&v| v == 0.0));

        let mut g = Tensor4::zeros(x.shape());
        g.set(0, 1, 2, 3, 1.0);
        let (gx, _) = li_layer_backward(&x, &LILayerParams::zeros(2), &spec, &g).unwrap();
        assert_eq!(gx, g);
        let wrong = Tensor4::zeros(Shape4::new(1, 2, 5, 4));
        assert!(li_layer_backward(&x, &params, &spec, &wrong).is_err());
    }

    #[test]
    fn li_conv_degenerates_to_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 7, 7), 0.0, 1.0, &mut rng);
        let w = Tensor4::<f64>::random_uniform(Shape4::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
        let cfg = LIConvConfig::new(ConvSpec::same(1, 2), ConvKind::Dense, LIKernelSpec::default());
        let a = li_conv_forward(&x, &LILayerParams::zeros(2), &w, &cfg).unwrap();
        let b = conv::conv2d_dilated(&x, &w, &cfg.conv, None).unwrap();
        assert_eq!(a, b);

        let xn = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 7, 7), -1.0, 1.0, &mut rng);
        let a = li_conv_forward(&xn, &LILayerParams::zeros(2), &w, &cfg).unwrap();
        let b = conv::conv2d_dilated(&relu(&xn), &w, &cfg.conv, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_text_has_one_row_per_line() {
        let k = build_li_kernel(&LIKernelSpec::new(2, 1, 1.0), 0.5).unwrap();
        let text = k.to_text();
        assert_eq!(text.lines().count(), 5);
        for line in text.lines() {
            let vals: Vec<f64> = line.split(' ').map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals.len(), 5);
        }
        let parsed: Vec<f64> = text.split_whitespace().map(|v| v.parse().unwrap()).collect();
        assert_eq!(parsed, k.values);
    }

    #[test]
    fn split_surround_matches_layer_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (t, e) in [(1, 1), (1, 2), (2, 1), (0, 1), (3, 2)] {
            let spec = LIKernelSpec::new(t, e, 1.3);
            let x = Tensor4::<f32>::random_uniform(Shape4::new(2, 3, 7, 10), 0.0, 1.0, &mut rng);
            let w = vec![0.0, 0.4, 1.0];
            let direct = li_layer_forward(&x, &LILayerParams { w_l: w.clone() }, &spec).unwrap();
            let split = li_combine(&x, &li_surround(&x, &spec).unwrap(), &w).unwrap();
            assert_eq!(direct.data(), split.data(), "t={t} e={e}");
            assert_eq!(direct.plane(1, 0), x.plane(1, 0));
        }
    }

    #[test]
    fn surround_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for (t, e) in [(1, 1), (2, 3), (1, 4)] {
            let spec = LIKernelSpec::new(t, e, 0.8);
            let s = Shape4::new(1, 2, 6, 9);
            let x = Tensor4::<f64>::random_normal(s, 1.0, &mut rng);
            let y = Tensor4::<f64>::random_normal(s, 1.0, &mut rng);
            let lhs: f64 = li_surround(&x, &spec).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(li_surround_adjoint(&y, &spec).data()).map(|(a, b)| a * b).sum();
            assert!(close(lhs, rhs, 1e-12), "{lhs} vs {rhs}");
        }
    }
}
