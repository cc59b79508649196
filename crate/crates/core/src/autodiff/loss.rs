use crate::autodiff::params::{ParamGroup, ParamStore};
use crate::data::labels::LabelMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Per-pixel softmax over the channel axis, computed in `f64`.
pub fn softmax_channels<T: Scalar>(logits: &Tensor4<T>) -> Tensor4<T> {
    let s = logits.shape();
    let p = s.plane();
    let mut out = Tensor4::zeros(s);
    let mut row = vec![0.0f64; s.c];
    for n in 0..s.n {
        let src = logits.item(n);
        let dst = out.item_mut(n);
        for i in 0..p {
            let mut max = f64::NEG_INFINITY;
            for (c, r) in row.iter_mut().enumerate() {
                *r = src[c * p + i].as_f64();
                max = max.max(*r);
            }
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                z += *r;
            }
            for (c, r) in row.iter().enumerate() {
                dst[c * p + i] = T::from_f64(r / z);
            }
        }
    }
    out
}

pub(crate) fn check_labels<T: Scalar>(logits: &Tensor4<T>, labels: &LabelMap, ignore_index: u8) -> Result<()> {
    let s = logits.shape();
    if labels.n != s.n || labels.h != s.h || labels.w != s.w {
        return Err(Error::Dimension(format!(
            "labels {}x{}x{} do not match logits {s}",
            labels.n, labels.h, labels.w
        )));
    }
    if let Some(&bad) = labels.data.iter().find(|&&v| v != ignore_index && v as usize >= s.c) {
        return Err(Error::Data(format!("label {bad} outside [0, {})", s.c)));
    }
    Ok(())
}

/// Mean over scored pixels of `−log softmax(logits)[label]`.
///
/// Returns `(loss, scored_pixel_count)`.
pub fn pixel_cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &LabelMap, ignore_index: u8) -> Result<(f64, usize)> {
    check_labels(logits, labels, ignore_index)?;
    let s = logits.shape();
    let p = s.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        let src = logits.item(n);
        for i in 0..p {
            let label = labels.data[n * p + i];
            if label == ignore_index {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for c in 0..s.c {
                max = max.max(src[c * p + i].as_f64());
            }
            let z: f64 = (0..s.c).map(|c| (src[c * p + i].as_f64() - max).exp()).sum();
            total += z.ln() + max - src[label as usize * p + i].as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedLoss);
    }
    Ok((total / count as f64, count))
}

/// `Σ‖w‖²` over non-frozen conv weights.
pub fn l2_penalty<T: Scalar>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::ConvWeights && !p.frozen)
        .map(|(_, p)| p.value.sum_sq())
        .sum()
}

/// Cross-entropy plus `l2_lambda·Σ‖w‖²` over non-frozen conv weights.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &LabelMap,
    ignore_index: u8,
    l2_lambda: f64,
    params: &ParamStore<T>,
) -> Result<f64> {
    let (ce, _) = pixel_cross_entropy(logits, labels, ignore_index)?;
    Ok(ce + l2_lambda * l2_penalty(params))
}

/// Gradient of the mean cross-entropy with respect to the logits, scaled by `upstream`.
pub(crate) fn cross_entropy_grad<T: Scalar>(
    probs: &Tensor4<T>,
    labels: &LabelMap,
    ignore_index: u8,
    count: usize,
    upstream: f64,
) -> Tensor4<T> {
    let s: Shape4 = probs.shape();
    let p = s.plane();
    let scale = upstream / count as f64;
    let mut g = Tensor4::zeros(s);
    for n in 0..s.n {
        let pr = probs.item(n);
        let dst = g.item_mut(n);
        for i in 0..p {
            let label = labels.data[n * p + i];
            if label == ignore_index {
                continue;
            }
            for c in 0..s.c {
                let target = if c == label as usize { 1.0 } else { 0.0 };
                dst[c * p + i] = T::from_f64((pr[c * p + i].as_f64() - target) * scale);
            }
        }
    }
    g
}
