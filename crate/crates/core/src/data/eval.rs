//! Single- and multi-scale inference and dataset evaluation.

use crate::autodiff::loss::softmax_channels;
use crate::data::labels::LabelMap;
use crate::data::metrics::{argmax_channels, ConfusionMatrix};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::models::segmenter::Segmenter;
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, Shape4, Tensor4};

/// Softmax probabilities at the native resolution.
pub fn single_scale_probs<T: Scalar>(model: &Segmenter<T>, image: &Tensor4<T>) -> Result<Tensor4<T>> {
    Ok(softmax_channels(&model.infer(image)?))
}

fn pad_bottom_right<T: Scalar>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let s = x.shape();
    if (s.h, s.w) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                dst[y * w..y * w + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }
    }
    out
}

fn crop_top_left<T: Scalar>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let s = x.shape();
    if (s.h, s.w) == (h, w) {
        return x.clone();
    }
    Tensor4::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, xx| x.at(n, c, y, xx))
}

/// Probabilities at one scale, resized back to the native `H×W`.
///
/// Rescaled sizes the model cannot take are zero-padded up to the next valid
/// size and the probabilities cropped back before resizing.
pub fn scaled_probs<T: Scalar>(model: &Segmenter<T>, image: &Tensor4<T>, scale: f64) -> Result<Tensor4<T>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Parameter(format!("evaluation scale must be positive, got {scale}")));
    }
    let s = image.shape();
    let sh = ((s.h as f64 * scale).round() as usize).max(1);
    let sw = ((s.w as f64 * scale).round() as usize).max(1);
    let scaled = bilinear_resize(image, sh, sw)?;
    let (ph, pw) = (model.config.next_valid_size(sh), model.config.next_valid_size(sw));
    let probs = single_scale_probs(model, &pad_bottom_right(&scaled, ph, pw))?;
    bilinear_resize(&crop_top_left(&probs, sh, sw), s.h, s.w)
}

/// Mean of per-scale probabilities.
pub fn multiscale_probs<T: Scalar>(model: &Segmenter<T>, image: &Tensor4<T>, scales: &[f64]) -> Result<Tensor4<T>> {
    if scales.is_empty() {
        return Err(Error::Parameter("at least one evaluation scale is required".into()));
    }
    let mut acc: Vec<f64> = Vec::new();
    let mut shape = image.shape();
    for &scale in scales {
        let p = scaled_probs(model, image, scale)?;
        shape = p.shape();
        if acc.is_empty() {
            acc = p.data().iter().map(|v| v.as_f64()).collect();
        } else {
            acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v.as_f64());
        }
    }
    let k = scales.len() as f64;
    Tensor4::from_vec(shape, acc.into_iter().map(|a| T::from_f64(a / k)).collect())
}

pub fn multiscale_eval<T: Scalar>(model: &Segmenter<T>, image: &Tensor4<T>, scales: &[f64]) -> Result<LabelMap> {
    Ok(argmax_channels(&multiscale_probs(model, image, scales)?))
}

pub fn predict<T: Scalar>(model: &Segmenter<T>, image: &Tensor4<T>) -> Result<LabelMap> {
    Ok(argmax_channels(&single_scale_probs(model, image)?))
}

/// Stacks `(1,C,H,W)` samples into one batch.
pub fn stack_images<T: Scalar>(images: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = images.first().ok_or_else(|| Error::Dimension("empty image batch".into()))?.shape();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        let s = im.shape();
        if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
            return Err(Error::Dimension(format!("cannot stack images {s} and {first}")));
        }
        data.extend_from_slice(im.data());
    }
    let n = images.iter().map(|im| im.shape().n).sum();
    Tensor4::from_vec(Shape4::new(n, first.c, first.h, first.w), data)
}

/// Accumulates a confusion matrix over `samples`, `batch` images at a time.
pub fn evaluate(model: &Segmenter<f32>, samples: &[SegSample], scales: &[f64], batch: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&Tensor4<f32>> = chunk.iter().map(|s| &s.image).collect();
        let labels: Vec<&LabelMap> = chunk.iter().map(|s| &s.labels).collect();
        let x = stack_images(&images)?;
        let pred = if scales == [1.0] { predict(model, &x)? } else { multiscale_eval(model, &x, scales)? };
        cm.update(&pred, &LabelMap::stack(&labels)?)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SegmenterConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Segmenter<f32> {
        Segmenter::new(SegmenterConfig::toy(4), 3).unwrap()
    }

    #[test]
    fn unit_scale_is_bitwise_single_scale() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::random_uniform(Shape4::new(2, 3, 33, 33), 0.0, 1.0, &mut rng);
        let single = single_scale_probs(&m, &x).unwrap();
        assert_eq!(multiscale_probs(&m, &x, &[1.0]).unwrap(), single);
        assert_eq!(multiscale_probs(&m, &x, &[1.0, 1.0]).unwrap(), single);
        assert_eq!(multiscale_eval(&m, &x, &[1.0]).unwrap(), predict(&m, &x).unwrap());
    }

    #[test]
    fn odd_scales_pad_and_return_native_size() {
        let m = model();
        let x = Tensor4::full(Shape4::new(1, 3, 33, 33), 0.5);
        for s in [0.5, 0.75, 1.25, 1.75] {
            let p = scaled_probs(&m, &x, s).unwrap();
            assert_eq!(p.shape(), Shape4::new(1, 4, 33, 33));
            let total: f64 = (0..4).map(|c| p.at(0, c, 10, 10) as f64).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
        assert!(multiscale_probs(&m, &x, &[]).is_err());
    }
}
