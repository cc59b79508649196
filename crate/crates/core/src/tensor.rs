//! Dense NCHW tensors and the shape-level operations the layers compose.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Rank-4 feature array, row-major with W fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor4 { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len()).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
        Tensor4 { shape, data }
    }

    pub fn random_normal(shape: Shape4, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `H×W` plane of one `(n, c)` pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `n`, `C×H×W` contiguous.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape.c * self.shape.plane();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Tensor4::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains non-finite values")))
        }
    }

    /// Sum with an `f64` accumulator, fixed left-to-right order.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn add_assign(&mut self, other: &Tensor4<T>) -> Result<()> {
        same_shape(self.shape, other.shape, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn scale(&self, alpha: T) -> Tensor4<T> {
        self.map(|v| v * alpha)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Channels `[start, start + count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor4<T>> {
        if start + count > self.shape.c {
            return Err(Error::dim(format!(
                "channel slice {start}..{} out of range for {} channels",
                start + count,
                self.shape.c
            )));
        }
        let shape = Shape4::new(self.shape.n, count, self.shape.h, self.shape.w);
        let p = self.shape.plane();
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..self.shape.n {
            let base = (n * self.shape.c + start) * p;
            data.extend_from_slice(&self.data[base..base + count * p]);
        }
        Ok(Tensor4 { shape, data })
    }
}

pub(crate) fn same_shape(a: Shape4, b: Shape4, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{what}: shape {a} does not match {b}")));
    }
    Ok(())
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    same_shape(x.shape(), grad_out.shape(), "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

/// Mean over each `H×W` plane, shape `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::dim(format!("global average pool over empty spatial dims {s}")));
    }
    let count = s.plane() as f64;
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let acc: f64 = x.plane(n, c).iter().map(|v| v.as_f64()).sum();
            out.set(n, c, 0, 0, T::from_f64(acc / count));
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: Shape4, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let g = grad_out.shape();
    if g != Shape4::new(input_shape.n, input_shape.c, 1, 1) {
        return Err(Error::dim(format!("pool gradient {g} does not match input {input_shape}")));
    }
    let inv = T::from_f64(1.0 / input_shape.plane() as f64);
    let mut out = Tensor4::zeros(input_shape);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let v = grad_out.at(n, c, 0, 0) * inv;
            out.plane_mut(n, c).iter_mut().for_each(|o| *o = v);
        }
    }
    Ok(out)
}

/// Source taps for one axis of an align-corners=false bilinear resize.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear interpolation with half-pixel centres (align-corners=false).
pub fn bilinear_resize<T: Scalar>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!("resize target {out_h}x{out_w} has a zero dimension")));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::dim(format!("cannot resize empty tensor {s}")));
    }
    if s.h == out_h && s.w == out_w {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, a) in ty.iter().enumerate() {
                let r0 = &src[a.lo * s.w..(a.lo + 1) * s.w];
                let r1 = &src[a.hi * s.w..(a.hi + 1) * s.w];
                for (ox, b) in tx.iter().enumerate() {
                    let top = r0[b.lo].as_f64() * (1.0 - b.frac) + r0[b.hi].as_f64() * b.frac;
                    let bot = r1[b.lo].as_f64() * (1.0 - b.frac) + r1[b.hi].as_f64() * b.frac;
                    dst[oy * out_w + ox] = T::from_f64(top * (1.0 - a.frac) + bot * a.frac);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters `grad_out` back onto the source grid.
pub fn bilinear_resize_backward<T: Scalar>(input_shape: Shape4, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let g = grad_out.shape();
    if g.n != input_shape.n || g.c != input_shape.c {
        return Err(Error::dim(format!("resize gradient {g} does not match input {input_shape}")));
    }
    if g.h == input_shape.h && g.w == input_shape.w {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(input_shape.h, g.h);
    let tx = bilinear_taps(input_shape.w, g.w);
    let w = input_shape.w;
    let mut out = Tensor4::zeros(input_shape);
    for n in 0..g.n {
        for c in 0..g.c {
            let src = grad_out.plane(n, c);
            let mut acc = vec![0.0f64; input_shape.plane()];
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let v = src[oy * g.w + ox].as_f64();
                    let top = v * (1.0 - a.frac);
                    let bot = v * a.frac;
                    acc[a.lo * w + b.lo] += top * (1.0 - b.frac);
                    acc[a.lo * w + b.hi] += top * b.frac;
                    acc[a.hi * w + b.lo] += bot * (1.0 - b.frac);
                    acc[a.hi * w + b.hi] += bot * b.frac;
                }
            }
            for (d, a) in out.plane_mut(n, c).iter_mut().zip(acc) {
                *d = T::from_f64(a);
            }
        }
    }
    Ok(out)
}

/// Stacks tensors along the channel axis, preserving order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = xs.first().ok_or_else(|| Error::dim("concat of an empty list"))?.shape();
    let mut c_total = 0;
    for x in xs {
        let s = x.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::dim(format!("concat: {s} is incompatible with {first}")));
        }
        c_total += s.c;
    }
    let shape = Shape4::new(first.n, c_total, first.h, first.w);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..first.n {
        for x in xs {
            data.extend_from_slice(x.item(n));
        }
    }
    Tensor4::from_vec(shape, data)
}

/// Splits a concatenated gradient back into per-input channel blocks.
pub fn concat_channels_backward<T: Scalar>(channels: &[usize], grad_out: &Tensor4<T>) -> Result<Vec<Tensor4<T>>> {
    let total: usize = channels.iter().sum();
    if total != grad_out.shape().c {
        return Err(Error::dim(format!(
            "concat gradient has {} channels, inputs sum to {total}",
            grad_out.shape().c
        )));
    }
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let part = grad_out.slice_channels(start, c);
            start += c;
            part
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape4, v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::<f32>::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = t(Shape4::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = t(Shape4::new(1, 1, 1, 3), &[0.5, 0.0, 7.0]);
        assert_eq!(relu(&pos), pos);
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn pool_examples() {
        let x = t(Shape4::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor4::<f64>::full(Shape4::new(2, 3, 4, 5), 1.75);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.75));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 3, 7), -1.0, 1.0, &mut rng);
        let p = global_avg_pool(&r).unwrap();
        for ch in 0..2 {
            let mut s = 0.0;
            for v in r.plane(0, ch) {
                s += v;
            }
            assert!((p.at(0, ch, 0, 0) - s / 21.0).abs() < 1e-14);
        }
        assert!(global_avg_pool(&Tensor4::<f64>::zeros(Shape4::new(1, 1, 0, 3))).is_err());
    }

    #[test]
    fn resize_examples() {
        let x = t(Shape4::new(1, 1, 2, 2), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(bilinear_resize(&x, 2, 2).unwrap(), x);
        // Half-pixel sampling of [0, 1] onto 4 samples gives [0, .25, .75, 1].
        let axis = [0.0, 0.25, 0.75, 1.0];
        let up = bilinear_resize(&x, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((up.at(0, 0, i, j) - (2.0 * axis[i] + axis[j])).abs() < 1e-12);
            }
        }
        let c = Tensor4::<f64>::full(Shape4::new(1, 2, 3, 5), 0.4);
        let r = bilinear_resize(&c, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(bilinear_resize(&x, 0, 3).is_err());
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 3, 5), -1.0, 1.0, &mut rng);
        let g = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 7, 4), -1.0, 1.0, &mut rng);
        let y = bilinear_resize(&x, 7, 4).unwrap();
        let gx = bilinear_resize_backward(x.shape(), &g).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor4::<f32>::random_uniform(Shape4::new(1, 2, 4, 4), 0.0, 1.0, &mut rng);
        let b = Tensor4::<f32>::random_uniform(Shape4::new(1, 3, 4, 4), 0.0, 1.0, &mut rng);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), Shape4::new(1, 5, 4, 4));
        assert_eq!(ab.slice_channels(0, 2).unwrap(), a);
        assert_eq!(ab.slice_channels(2, 3).unwrap(), b);
        let parts = concat_channels_backward(&[2, 3], &ab).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let bad = Tensor4::<f32>::zeros(Shape4::new(1, 1, 4, 5));
        assert!(concat_channels(&[&a, &bad]).is_err());
    }
}
