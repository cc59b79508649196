//! Dilated 2-D convolution, dense and depthwise, with exact backward passes.
//!
//! All kernels are cross-correlations over an NCHW layout: output pixel `p`
//! reads input taps at `stride·p + dilation·m − pad` for `m ∈ [0, 2k]²`.
//! Out-of-range taps are skipped, which is the same as zero padding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Pad by `k·d` zeros on every side; stride 1 preserves `H×W`.
    SameZero,
    /// No padding; output shrinks by `2·k·d`.
    Valid,
}

/// Geometry of a `(2k+1)²` dilated filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_half_size: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub const fn same(kernel_half_size: usize, dilation: usize) -> Self {
        ConvSpec { kernel_half_size, dilation, stride: 1, padding: Padding::SameZero }
    }

    pub const fn pointwise() -> Self {
        ConvSpec::same(0, 1)
    }

    pub const fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub const fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub const fn kernel_size(&self) -> usize {
        2 * self.kernel_half_size + 1
    }

    pub const fn taps(&self) -> usize {
        self.kernel_size() * self.kernel_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::Parameter("dilation must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Parameter("stride must be at least 1".into()));
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::SameZero => self.kernel_half_size * self.dilation,
            Padding::Valid => 0,
        }
    }

    /// Output length along one axis.
    pub fn output_len(&self, input: usize) -> Result<usize> {
        let extent = 2 * self.kernel_half_size * self.dilation + 1;
        let padded = input + 2 * self.pad();
        if input == 0 || padded < extent {
            return Err(Error::dim(format!(
                "input length {input} is too small for a filter spanning {extent} pixels"
            )));
        }
        Ok((padded - extent) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape4, out_channels: usize) -> Result<Shape4> {
        Ok(Shape4::new(input.n, out_channels, self.output_len(input.h)?, self.output_len(input.w)?))
    }
}

/// Range of output indices `o` whose tap `o·stride + offset` lands in `[0, in_len)`.
#[inline]
fn valid_outputs(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[inline]
fn tap_offset(spec: &ConvSpec, m: usize) -> isize {
    (m * spec.dilation) as isize - spec.pad() as isize
}

fn check_weights<T: Scalar>(w: &Tensor4<T>, spec: &ConvSpec, c_in: usize, what: &str) -> Result<()> {
    spec.validate()?;
    let ws = w.shape();
    let ks = spec.kernel_size();
    if ws.h != ks || ws.w != ks {
        return Err(Error::dim(format!("{what}: filter is {}x{}, spec expects {ks}x{ks}", ws.h, ws.w)));
    }
    if ws.c != c_in {
        return Err(Error::dim(format!("{what}: filter expects {} input channels, tensor has {c_in}", ws.c)));
    }
    Ok(())
}

fn check_bias<T>(bias: Option<&[T]>, channels: usize, what: &str) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => {
            Err(Error::dim(format!("{what}: bias has {} entries for {channels} channels", b.len())))
        }
        _ => Ok(()),
    }
}

/// Unfolds one batch item into `[(c_in·taps) × (H_out·W_out)]`.
fn im2col<T: Scalar>(x: &[T], in_shape: Shape4, spec: &ConvSpec, ho: usize, wo: usize, cols: &mut [T]) {
    let ks = spec.kernel_size();
    let p = ho * wo;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..in_shape.c {
        let plane = &x[ci * in_shape.plane()..(ci + 1) * in_shape.plane()];
        for my in 0..ks {
            let oy_off = tap_offset(spec, my);
            let (y0, y1) = valid_outputs(ho, in_shape.h, spec.stride, oy_off);
            for mx in 0..ks {
                let ox_off = tap_offset(spec, mx);
                let (x0, x1) = valid_outputs(wo, in_shape.w, spec.stride, ox_off);
                let row = &mut cols[((ci * ks + my) * ks + mx) * p..][..p];
                for oy in y0..y1 {
                    let iy = (oy * spec.stride) as isize + oy_off;
                    let src = &plane[iy as usize * in_shape.w..][..in_shape.w];
                    for ox in x0..x1 {
                        let ix = (ox * spec.stride) as isize + ox_off;
                        row[oy * wo + ox] = src[ix as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an input-shaped buffer.
fn col2im<T: Scalar>(cols: &[T], in_shape: Shape4, spec: &ConvSpec, ho: usize, wo: usize, gx: &mut [T]) {
    let ks = spec.kernel_size();
    let p = ho * wo;
    for ci in 0..in_shape.c {
        let plane = &mut gx[ci * in_shape.plane()..(ci + 1) * in_shape.plane()];
        for my in 0..ks {
            let oy_off = tap_offset(spec, my);
            let (y0, y1) = valid_outputs(ho, in_shape.h, spec.stride, oy_off);
            for mx in 0..ks {
                let ox_off = tap_offset(spec, mx);
                let (x0, x1) = valid_outputs(wo, in_shape.w, spec.stride, ox_off);
                let row = &cols[((ci * ks + my) * ks + mx) * p..][..p];
                for oy in y0..y1 {
                    let iy = (oy * spec.stride) as isize + oy_off;
                    let dst = &mut plane[iy as usize * in_shape.w..][..in_shape.w];
                    for ox in x0..x1 {
                        let ix = (ox * spec.stride) as isize + ox_off;
                        dst[ix as usize] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn is_plain_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel_half_size == 0 && spec.stride == 1
}

/// Dense dilated convolution. `w` is `(C_out, C_in, 2k+1, 2k+1)`.
pub fn conv2d_dilated<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    bias: Option<&[T]>,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    check_weights(w, spec, xs.c, "conv2d")?;
    let c_out = w.shape().n;
    check_bias(bias, c_out, "conv2d")?;
    x.ensure_finite("conv2d input")?;
    let os = spec.output_shape(xs, c_out)?;
    let p = os.plane();
    let kdim = xs.c * spec.taps();
    let mut out = Tensor4::zeros(os);
    let mut cols = if is_plain_pointwise(spec) { Vec::new() } else { vec![T::zero(); kdim * p] };
    for n in 0..xs.n {
        let dst = out.item_mut(n);
        let src: &[T] = if is_plain_pointwise(spec) {
            x.item(n)
        } else {
            im2col(x.item(n), xs, spec, os.h, os.w, &mut cols);
            &cols
        };
        T::gemm(c_out, kdim, p, w.data(), src, T::zero(), dst);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                dst[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_dilated`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weight: Option<Tensor4<T>>,
    pub bias: Option<Vec<T>>,
}

/// Which gradients a backward call should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMask {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

impl GradMask {
    pub const ALL: GradMask = GradMask { input: true, weight: true, bias: true };
}

pub fn conv2d_dilated_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
    mask: GradMask,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    check_weights(w, spec, xs.c, "conv2d backward")?;
    let c_out = w.shape().n;
    let os = spec.output_shape(xs, c_out)?;
    if grad_out.shape() != os {
        return Err(Error::dim(format!("conv2d backward: gradient {} expected {os}", grad_out.shape())));
    }
    let p = os.plane();
    let kdim = xs.c * spec.taps();
    let pointwise = is_plain_pointwise(spec);
    let mut gw = mask.weight.then(|| Tensor4::zeros(w.shape()));
    let mut gx = mask.input.then(|| Tensor4::zeros(xs));
    let mut gb = mask.bias.then(|| vec![0.0f64; c_out]);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * p] };
    let mut gcols = if pointwise || !mask.input { Vec::new() } else { vec![T::zero(); kdim * p] };
    for n in 0..xs.n {
        let g = grad_out.item(n);
        if let Some(gw) = gw.as_mut() {
            let src: &[T] = if pointwise {
                x.item(n)
            } else {
                im2col(x.item(n), xs, spec, os.h, os.w, &mut cols);
                &cols
            };
            T::gemm_bt(c_out, p, kdim, g, src, T::one(), gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            if pointwise {
                T::gemm_at(kdim, c_out, p, w.data(), g, T::one(), gx.item_mut(n));
            } else {
                T::gemm_at(kdim, c_out, p, w.data(), g, T::zero(), &mut gcols);
                col2im(&gcols, xs, spec, os.h, os.w, gx.item_mut(n));
            }
        }
        if let Some(gb) = gb.as_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += g[co * p..(co + 1) * p].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb.map(|b| b.into_iter().map(T::from_f64).collect()),
    })
}

fn check_depthwise<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, spec: &ConvSpec) -> Result<()> {
    check_weights(w, spec, 1, "depthwise conv")?;
    if w.shape().n != x.shape().c {
        return Err(Error::dim(format!(
            "depthwise conv: {} filters for {} channels",
            w.shape().n,
            x.shape().c
        )));
    }
    Ok(())
}

/// Accumulates one channel of a depthwise dilated correlation into `dst`.
///
/// `taps` is the `(2k+1)²` filter in row-major order; the accumulation order
/// over taps is fixed.
pub(crate) fn depthwise_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    taps: &[T],
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let ks = spec.kernel_size();
    let s = spec.stride;
    for my in 0..ks {
        let oy_off = tap_offset(spec, my);
        let (y0, y1) = valid_outputs(ho, h, s, oy_off);
        for mx in 0..ks {
            let kv = taps[my * ks + mx];
            let ox_off = tap_offset(spec, mx);
            let (x0, x1) = valid_outputs(wo, w, s, ox_off);
            if x1 <= x0 {
                continue;
            }
            for oy in y0..y1 {
                let iy = ((oy * s) as isize + oy_off) as usize;
                let row = &src[iy * w..(iy + 1) * w];
                let out = &mut dst[oy * wo + x0..oy * wo + x1];
                if s == 1 {
                    let ix0 = (x0 as isize + ox_off) as usize;
                    for (o, &v) in out.iter_mut().zip(&row[ix0..ix0 + (x1 - x0)]) {
                        *o += kv * v;
                    }
                } else {
                    for (j, o) in out.iter_mut().enumerate() {
                        let ix = (((x0 + j) * s) as isize + ox_off) as usize;
                        *o += kv * row[ix];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`depthwise_plane`] with respect to its input plane.
pub(crate) fn depthwise_plane_input_grad<T: Scalar>(
    g: &[T],
    h: usize,
    w: usize,
    taps: &[T],
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    gx: &mut [T],
) {
    let ks = spec.kernel_size();
    let s = spec.stride;
    for my in 0..ks {
        let oy_off = tap_offset(spec, my);
        let (y0, y1) = valid_outputs(ho, h, s, oy_off);
        for mx in 0..ks {
            let kv = taps[my * ks + mx];
            let ox_off = tap_offset(spec, mx);
            let (x0, x1) = valid_outputs(wo, w, s, ox_off);
            if x1 <= x0 {
                continue;
            }
            for oy in y0..y1 {
                let iy = ((oy * s) as isize + oy_off) as usize;
                let grow = &g[oy * wo + x0..oy * wo + x1];
                let dst = &mut gx[iy * w..(iy + 1) * w];
                if s == 1 {
                    let ix0 = (x0 as isize + ox_off) as usize;
                    for (d, &v) in dst[ix0..ix0 + (x1 - x0)].iter_mut().zip(grow) {
                        *d += kv * v;
                    }
                } else {
                    for (j, &v) in grow.iter().enumerate() {
                        let ix = (((x0 + j) * s) as isize + ox_off) as usize;
                        dst[ix] += kv * v;
                    }
                }
            }
        }
    }
}

/// Per-tap correlation `Σ_p g[p]·x[tap(p)]` for one channel, written into `out`.
pub(crate) fn depthwise_plane_tap_grad<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    g: &[T],
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    let ks = spec.kernel_size();
    let s = spec.stride;
    for my in 0..ks {
        let oy_off = tap_offset(spec, my);
        let (y0, y1) = valid_outputs(ho, h, s, oy_off);
        for mx in 0..ks {
            let ox_off = tap_offset(spec, mx);
            let (x0, x1) = valid_outputs(wo, w, s, ox_off);
            let mut acc = 0.0f64;
            if x1 > x0 {
                for oy in y0..y1 {
                    let iy = ((oy * s) as isize + oy_off) as usize;
                    let row = &src[iy * w..(iy + 1) * w];
                    let grow = &g[oy * wo + x0..oy * wo + x1];
                    let mut part = T::zero();
                    if s == 1 {
                        let ix0 = (x0 as isize + ox_off) as usize;
                        for (&a, &b) in grow.iter().zip(&row[ix0..ix0 + (x1 - x0)]) {
                            part += a * b;
                        }
                    } else {
                        for (j, &a) in grow.iter().enumerate() {
                            let ix = (((x0 + j) * s) as isize + ox_off) as usize;
                            part += a * row[ix];
                        }
                    }
                    acc += part.as_f64();
                }
            }
            out[my * ks + mx] += acc;
        }
    }
}

/// Depthwise dilated convolution. `w` is `(C, 1, 2k+1, 2k+1)`.
pub fn depthwise_conv2d_dilated<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    bias: Option<&[T]>,
) -> Result<Tensor4<T>> {
    check_depthwise(x, w, spec)?;
    let xs = x.shape();
    check_bias(bias, xs.c, "depthwise conv")?;
    x.ensure_finite("depthwise conv input")?;
    let os = spec.output_shape(xs, xs.c)?;
    let taps = spec.taps();
    let mut out = Tensor4::zeros(os);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let filter = &w.data()[c * taps..(c + 1) * taps];
            let dst = out.plane_mut(n, c);
            depthwise_plane(x.plane(n, c), xs.h, xs.w, filter, spec, os.h, os.w, dst);
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v += b[c]);
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_dilated_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
    mask: GradMask,
) -> Result<ConvGrads<T>> {
    check_depthwise(x, w, spec)?;
    let xs = x.shape();
    let os = spec.output_shape(xs, xs.c)?;
    if grad_out.shape() != os {
        return Err(Error::dim(format!("depthwise backward: gradient {} expected {os}", grad_out.shape())));
    }
    let taps = spec.taps();
    let mut gx = mask.input.then(|| Tensor4::zeros(xs));
    let mut gw_acc = mask.weight.then(|| vec![0.0f64; w.len()]);
    let mut gb = mask.bias.then(|| vec![0.0f64; xs.c]);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let filter = &w.data()[c * taps..(c + 1) * taps];
            let g = grad_out.plane(n, c);
            if let Some(gx) = gx.as_mut() {
                depthwise_plane_input_grad(g, xs.h, xs.w, filter, spec, os.h, os.w, gx.plane_mut(n, c));
            }
            if let Some(acc) = gw_acc.as_mut() {
                let out = &mut acc[c * taps..(c + 1) * taps];
                depthwise_plane_tap_grad(x.plane(n, c), xs.h, xs.w, g, spec, os.h, os.w, out);
            }
            if let Some(gb) = gb.as_mut() {
                gb[c] += g.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
    }
    let weight = match gw_acc {
        Some(acc) => Some(Tensor4::from_vec(w.shape(), acc.into_iter().map(T::from_f64).collect())?),
        None => None,
    };
    Ok(ConvGrads { input: gx, weight, bias: gb.map(|b| b.into_iter().map(T::from_f64).collect()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f64>::random_uniform(Shape4::new(1, 1, 3, 3), -1.0, 1.0, &mut rng);
        let w = Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0);
        assert_eq!(conv2d_dilated(&x, &w, &ConvSpec::pointwise(), None).unwrap(), x);
    }

    #[test]
    fn same_padding_preserves_shape() {
        for k in 0..=3 {
            for d in 1..=8 {
                let spec = ConvSpec::same(k, d);
                assert_eq!(spec.output_len(5).unwrap(), 5);
                assert_eq!(spec.output_len(17).unwrap(), 17);
            }
        }
        assert_eq!(ConvSpec::same(1, 1).with_stride(2).output_len(65).unwrap(), 33);
        assert_eq!(ConvSpec::same(1, 1).with_padding(Padding::Valid).output_len(7).unwrap(), 5);
        assert!(ConvSpec::same(1, 4).with_padding(Padding::Valid).output_len(7).is_err());
    }

    #[test]
    fn depthwise_identity_and_separability() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
        let spec = ConvSpec::same(1, 2);
        let mut ident = Tensor4::zeros(Shape4::new(2, 1, 3, 3));
        ident.set(0, 0, 1, 1, 1.0);
        ident.set(1, 0, 1, 1, 1.0);
        assert_eq!(depthwise_conv2d_dilated(&x, &ident, &spec, None).unwrap(), x);

        x.plane_mut(0, 1).iter_mut().for_each(|v| *v = 0.0);
        let w = Tensor4::<f64>::random_uniform(Shape4::new(2, 1, 3, 3), -1.0, 1.0, &mut rng);
        let y = depthwise_conv2d_dilated(&x, &w, &spec, None).unwrap();
        assert!(y.plane(0, 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_and_value_errors() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 3, 4, 4));
        let w = Tensor4::<f32>::zeros(Shape4::new(2, 2, 3, 3));
        assert!(matches!(conv2d_dilated(&x, &w, &ConvSpec::same(1, 1), None), Err(Error::Dimension(_))));
        let w = Tensor4::<f32>::zeros(Shape4::new(2, 3, 1, 1));
        assert!(matches!(conv2d_dilated(&x, &w, &ConvSpec::same(1, 1), None), Err(Error::Dimension(_))));
        let mut bad = x.clone();
        bad.set(0, 1, 2, 2, f32::NAN);
        assert!(matches!(conv2d_dilated(&bad, &w, &ConvSpec::pointwise(), None), Err(Error::Numeric(_))));
        assert!(conv2d_dilated(&x, &w, &ConvSpec::same(0, 0), None).is_err());
    }

    #[test]
    fn strided_valid_ranges() {
        // offset -2 with stride 2 over 5 inputs: o=1 → 0, o=2 → 2, o=3 → 4
        assert_eq!(valid_outputs(4, 5, 2, -2), (1, 4));
        assert_eq!(valid_outputs(3, 3, 1, 5), (0, 0));
        assert_eq!(valid_outputs(3, 3, 1, -5), (0, 0));
    }
}
