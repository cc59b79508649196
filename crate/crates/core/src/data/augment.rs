use rand::Rng;

use crate::data::labels::{LabelMap, IGNORE_INDEX};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor4};

/// Nearest-neighbour resize; label values are copied, never blended.
pub fn resize_labels_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let mut out = LabelMap::filled(labels.n, out_h, out_w, IGNORE_INDEX);
    let sy = labels.h as f64 / out_h as f64;
    let sx = labels.w as f64 / out_w as f64;
    for n in 0..labels.n {
        for y in 0..out_h {
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(labels.h - 1);
            for x in 0..out_w {
                let src_x = (((x as f64 + 0.5) * sx) as usize).min(labels.w - 1);
                out.set(n, y, x, labels.at(n, src_y, src_x));
            }
        }
    }
    out
}

/// Copies the `h×w` window at `(top, left)` of a possibly smaller source;
/// uncovered pixels get `0` in the image and [`IGNORE_INDEX`] in the labels.
fn window(sample: &SegSample, top: usize, left: usize, h: usize, w: usize) -> SegSample {
    let s = sample.image.shape();
    let mut image = Tensor4::zeros(crate::tensor::Shape4::new(s.n, s.c, h, w));
    let mut labels = LabelMap::filled(s.n, h, w, IGNORE_INDEX);
    for n in 0..s.n {
        for y in 0..h.min(s.h.saturating_sub(top)) {
            for x in 0..w.min(s.w.saturating_sub(left)) {
                for c in 0..s.c {
                    image.set(n, c, y, x, sample.image.at(n, c, top + y, left + x));
                }
                labels.set(n, y, x, sample.labels.at(n, top + y, left + x));
            }
        }
    }
    SegSample { image, labels }
}

/// Rescales by `factor` (bilinear image, nearest labels), then crops or pads
/// back to the original size. `(oy, ox) ∈ [0,1]²` picks the crop offset.
pub fn scale_sample(sample: &SegSample, factor: f64, oy: f64, ox: f64) -> Result<SegSample> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Parameter(format!("scale factor must be positive, got {factor}")));
    }
    let s = sample.image.shape();
    let nh = ((s.h as f64 * factor).round() as usize).max(1);
    let nw = ((s.w as f64 * factor).round() as usize).max(1);
    let scaled = SegSample {
        image: bilinear_resize(&sample.image, nh, nw)?,
        labels: resize_labels_nearest(&sample.labels, nh, nw),
    };
    let top = ((nh.saturating_sub(s.h)) as f64 * oy).round() as usize;
    let left = ((nw.saturating_sub(s.w)) as f64 * ox).round() as usize;
    Ok(window(&scaled, top, left, s.h, s.w))
}

/// Random-scale augmentation with a uniform factor from `scale_range`.
pub fn random_scale_augment(sample: &SegSample, scale_range: (f64, f64), rng: &mut impl Rng) -> Result<SegSample> {
    let (lo, hi) = scale_range;
    if !(0.5..=2.0).contains(&lo) || !(0.5..=2.0).contains(&hi) || lo > hi {
        return Err(Error::Parameter(format!("scale range [{lo}, {hi}] must lie within [0.5, 2.0]")));
    }
    let factor = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let (oy, ox) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
    scale_sample(sample, factor, oy, ox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{gen_synthetic_contours, render_scene, Geometry, Shape, Texture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_range_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in gen_synthetic_contours(2, 3, 4, 33).unwrap() {
            let a = random_scale_augment(&s, (1.0, 1.0), &mut rng).unwrap();
            assert_eq!(a, s);
        }
    }

    #[test]
    fn label_set_never_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in gen_synthetic_contours(3, 6, 4, 32).unwrap() {
            let before = s.labels.classes_present();
            let a = random_scale_augment(&s, (0.5, 2.0), &mut rng).unwrap();
            for l in a.labels.classes_present() {
                assert!(l == IGNORE_INDEX || before.contains(&l));
            }
            assert_eq!(a.image.shape(), s.image.shape());
        }
    }

    #[test]
    fn doubling_quadruples_disk() {
        let disk = Shape { geometry: Geometry::Disk { cx: 32.0, cy: 32.0, r: 10.0 }, label: 1, color: [1.0; 3] };
        let s = render_scene(64, &Texture::flat([0.0; 3]), &[disk]);
        let big = scale_sample(&s, 2.0, 0.5, 0.5).unwrap();
        let ratio = big.labels.count(1) as f64 / s.labels.count(1) as f64;
        assert!((ratio - 4.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn shrinking_pads_with_ignore() {
        let s = &gen_synthetic_contours(4, 1, 3, 32).unwrap()[0];
        let small = scale_sample(s, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(small.labels.at(0, 31, 31), IGNORE_INDEX);
        assert_eq!(small.labels.count(IGNORE_INDEX), 32 * 32 - 16 * 16);
    }

    #[test]
    fn rejects_out_of_range() {
        let s = &gen_synthetic_contours(4, 1, 3, 32).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_scale_augment(s, (0.25, 1.0), &mut rng).is_err());
    }
}
