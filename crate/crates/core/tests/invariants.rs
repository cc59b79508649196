//! Structural laws of the operators, checked over randomly drawn shapes,
//! geometries and intensities.

use liconv::conv::{conv2d_dilated, depthwise_conv2d_dilated};
use liconv::li::{build_li_kernel, li_conv_forward, li_layer_forward, project_wl, ConvKind};
use liconv::models::{count_params, Segmenter};
use liconv::verify::{li_input_widths, random_segmenter_config};
use liconv::{ConvSpec, LIConvConfig, LIKernelSpec, LILayerParams, Shape4, Tensor4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn li_spec() -> impl Strategy<Value = LIKernelSpec> {
    (0usize..=2, 1usize..=3, 0.3f64..2.5).prop_map(|(t, e, s)| LIKernelSpec::new(t, e, s))
}

fn shape() -> impl Strategy<Value = Shape4> {
    (1usize..=2, 1usize..=3, 1usize..=12, 1usize..=12).prop_map(|(n, c, h, w)| Shape4::new(n, c, h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_centre_one_surround_nonpositive_symmetric(spec in li_spec(), w in 0.0f64..=1.0) {
        let k = build_li_kernel(&spec, w).unwrap();
        let t = spec.zone_half_size as isize;
        prop_assert_eq!(k.at_offset(0, 0), 1.0);
        let mut surround = Vec::new();
        for dy in -t..=t {
            for dx in -t..=t {
                let v = k.at_offset(dy, dx);
                prop_assert_eq!(v, k.at_offset(-dy, -dx));
                prop_assert_eq!(v, k.at_offset(dx, dy));
                if (dy, dx) != (0, 0) {
                    prop_assert!(v <= 0.0 && v >= -w);
                    surround.push((dy * dy + dx * dx, v.abs()));
                }
            }
        }
        // Farther taps never inhibit more than nearer ones.
        for &(d1, v1) in &surround {
            for &(d2, v2) in &surround {
                if d1 <= d2 {
                    prop_assert!(v1 >= v2);
                }
            }
        }
    }

    #[test]
    fn zero_intensity_is_bitwise_identity(s in shape(), spec in li_spec(), seed in any::<u64>()) {
        let x = Tensor4::<f32>::random_normal(s, 1.0, &mut rng(seed));
        let y = li_layer_forward(&x, &LILayerParams::zeros(s.c), &spec).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn more_intensity_suppresses_more(s in shape(), spec in li_spec(), seed in any::<u64>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let x = Tensor4::<f64>::random_uniform(s, 0.0, 1.0, &mut rng(seed));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let y_lo = li_layer_forward(&x, &LILayerParams::uniform(s.c, lo), &spec).unwrap();
        let y_hi = li_layer_forward(&x, &LILayerParams::uniform(s.c, hi), &spec).unwrap();
        for ((&p, &q), &v) in y_hi.data().iter().zip(y_lo.data()).zip(x.data()) {
            prop_assert!(p <= q + 1e-12);
            prop_assert!(q <= v + 1e-12);
        }
    }

    #[test]
    fn li_layer_is_affine_in_intensity(s in shape(), spec in li_spec(), seed in any::<u64>(), w in 0.0f64..=1.0) {
        let x = Tensor4::<f64>::random_normal(s, 1.0, &mut rng(seed));
        let y0 = li_layer_forward(&x, &LILayerParams::zeros(s.c), &spec).unwrap();
        let y1 = li_layer_forward(&x, &LILayerParams::uniform(s.c, 1.0), &spec).unwrap();
        let yw = li_layer_forward(&x, &LILayerParams::uniform(s.c, w), &spec).unwrap();
        for ((&a, &b), &c) in y0.data().iter().zip(y1.data()).zip(yw.data()) {
            prop_assert!((a + w * (b - a) - c).abs() <= 1e-12 * (1.0 + a.abs() + b.abs()));
        }
    }

    #[test]
    fn li_layer_commutes_with_interior_shifts(spec in li_spec(), seed in any::<u64>(), w in 0.0f64..=1.0) {
        let s = Shape4::new(1, 2, 14, 15);
        let x = Tensor4::<f64>::random_normal(s, 1.0, &mut rng(seed));
        let shifted = Tensor4::from_fn(s, |n, c, y, xx| if y >= 1 && xx >= 2 { x.at(n, c, y - 1, xx - 2) } else { 0.0 });
        let p = LILayerParams::uniform(2, w);
        let a = li_layer_forward(&x, &p, &spec).unwrap();
        let b = li_layer_forward(&shifted, &p, &spec).unwrap();
        let r = spec.zone_half_size * spec.li_rate;
        for c in 0..2 {
            for y in (1 + r)..(s.h - r) {
                for xx in (2 + r)..(s.w - r) {
                    prop_assert!((a.at(0, c, y - 1, xx - 2) - b.at(0, c, y, xx)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_is_linear_in_input(s in shape(), k in 0usize..=1, d in 1usize..=3, seed in any::<u64>(), alpha in -2.0f64..2.0) {
        let mut r = rng(seed);
        let spec = ConvSpec::same(k, d);
        let w = Tensor4::random_normal(Shape4::new(2, s.c, 2 * k + 1, 2 * k + 1), 1.0, &mut r);
        let x1 = Tensor4::random_normal(s, 1.0, &mut r);
        let x2 = Tensor4::random_normal(s, 1.0, &mut r);
        let mix = x1.add(&x2.scale(alpha)).unwrap();
        let lhs = conv2d_dilated(&mix, &w, &spec, None).unwrap();
        let rhs = conv2d_dilated(&x1, &w, &spec, None).unwrap().add(&conv2d_dilated(&x2, &w, &spec, None).unwrap().scale(alpha)).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn same_padding_output_is_ceil_of_stride(h in 1usize..40, k in 0usize..=2, d in 1usize..=4, stride in 1usize..=3) {
        let spec = ConvSpec::same(k, d).with_stride(stride);
        prop_assert_eq!(spec.output_len(h).unwrap(), h.div_ceil(stride));
    }

    #[test]
    fn depthwise_matches_dense_with_diagonal_filters(s in shape(), d in 1usize..=3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = ConvSpec::same(1, d);
        let wd = Tensor4::<f64>::random_normal(Shape4::new(s.c, 1, 3, 3), 1.0, &mut r);
        let dense = Tensor4::from_fn(Shape4::new(s.c, s.c, 3, 3), |o, i, y, x| if o == i { wd.at(o, 0, y, x) } else { 0.0 });
        let x = Tensor4::random_normal(s, 1.0, &mut r);
        let a = depthwise_conv2d_dilated(&x, &wd, &spec, None).unwrap();
        let b = conv2d_dilated(&x, &dense, &spec, None).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_li_conv_is_relu_then_conv(s in shape(), spec in li_spec(), d in 1usize..=3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let conv = ConvSpec::same(1, d);
        let w = Tensor4::<f32>::random_normal(Shape4::new(s.c, 1, 3, 3), 1.0, &mut r);
        let x = Tensor4::random_normal(s, 1.0, &mut r);
        let cfg = LIConvConfig::new(conv, ConvKind::Depthwise, spec);
        let y = li_conv_forward(&x, &LILayerParams::zeros(s.c), &w, &cfg).unwrap();
        let plain = depthwise_conv2d_dilated(&liconv::tensor::relu(&x), &w, &conv, None).unwrap();
        prop_assert_eq!(y.data(), plain.data());
    }

    #[test]
    fn projection_lands_in_unit_interval_and_is_idempotent(ws in proptest::collection::vec(-3.0f64..3.0, 1..10)) {
        let p = project_wl(&LILayerParams { w_l: ws });
        prop_assert!(p.w_l.iter().all(|&w| (0.0..=1.0).contains(&w)));
        prop_assert_eq!(project_wl(&p), p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn parameter_delta_is_one_weight_per_inhibited_channel(seed in any::<u64>()) {
        let cfg = random_segmenter_config(&mut rng(seed));
        let delta = count_params(&cfg).total() - count_params(&cfg.baseline()).total();
        prop_assert_eq!(delta, li_input_widths(&cfg));
    }

    #[test]
    fn zero_initialised_model_equals_its_baseline(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = random_segmenter_config(&mut r);
        let li = Segmenter::<f32>::new(cfg.clone(), seed).unwrap();
        let base = Segmenter::<f32>::new(cfg.baseline(), seed).unwrap();
        let side = cfg.output_stride + 1;
        let x = Tensor4::random_uniform(Shape4::new(1, cfg.image_channels, side, side), 0.0, 1.0, &mut r);
        prop_assert_eq!(li.infer(&x).unwrap(), base.infer(&x).unwrap());
    }
}
