//! The LI-ASPP head against a branch-by-branch composition of the reference
//! operators, with bias, ReLU, pooling and concatenation written out by hand.

use liconv::autodiff::{ParamGroup, ParamStore, Tape};
use liconv::models::{LIASPPConfig, LiAspp};
use liconv::oracle::{compare, oracle_depthwise_conv, oracle_dilated_conv, oracle_li_layer};
use liconv::verify::ORACLE_TOL;
use liconv::{ConvSpec, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn relu(x: &Tensor4<f64>) -> Tensor4<f64> {
    x.map(|v| v.max(0.0))
}

fn plus_bias(x: &Tensor4<f64>, b: &Tensor4<f64>) -> Tensor4<f64> {
    Tensor4::from_fn(x.shape(), |n, c, y, xx| x.at(n, c, y, xx) + b.data()[c])
}

fn ref_conv(store: &ParamStore<f64>, name: &str, x: &Tensor4<f64>, spec: &ConvSpec, depthwise: bool) -> Tensor4<f64> {
    let w = store.value(store.find(&format!("{name}.w")).unwrap());
    let b = store.value(store.find(&format!("{name}.b")).unwrap());
    let y = if depthwise { oracle_depthwise_conv(x, w, spec) } else { oracle_dilated_conv(x, w, spec) };
    relu(&plus_bias(&y.unwrap(), b))
}

fn reference(store: &ParamStore<f64>, cfg: &LIASPPConfig, x: &Tensor4<f64>) -> Tensor4<f64> {
    let s = x.shape();
    let xr = relu(x);
    let pw = ConvSpec::pointwise();
    let mut outs = vec![ref_conv(store, "head.branch0", &xr, &pw, false)];
    for (i, &rate) in cfg.rates.iter().enumerate() {
        let name = format!("head.branch{}", i + 1);
        let w_l = store.value(store.find(&format!("{name}.li.w_l")).unwrap()).data().to_vec();
        let li = relu(&oracle_li_layer(&xr, &w_l, &cfg.li).unwrap());
        let dw = ref_conv(store, &format!("{name}.dw"), &li, &ConvSpec::same(1, rate), true);
        outs.push(ref_conv(store, &format!("{name}.pw"), &dw, &pw, false));
    }
    let area = (s.h * s.w) as f64;
    let pooled = Tensor4::from_fn(Shape4::new(s.n, s.c, 1, 1), |n, c, _, _| xr.plane(n, c).iter().sum::<f64>() / area);
    let g = ref_conv(store, "head.pool", &pooled, &pw, false);
    outs.push(Tensor4::from_fn(Shape4::new(s.n, g.shape().c, s.h, s.w), |n, c, _, _| g.at(n, c, 0, 0)));

    let widths: Vec<usize> = outs.iter().map(|t| t.shape().c).collect();
    let total: usize = widths.iter().sum();
    let cat = Tensor4::from_fn(Shape4::new(s.n, total, s.h, s.w), |n, mut c, y, xx| {
        for (t, &wd) in outs.iter().zip(&widths) {
            if c < wd {
                return t.at(n, c, y, xx);
            }
            c -= wd;
        }
        unreachable!()
    });
    ref_conv(store, "head.project", &cat, &pw, false)
}

fn randomized_head(cfg: LIASPPConfig, seed: u64) -> (ParamStore<f64>, LiAspp) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = LiAspp::new(&mut store, "head", cfg, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let li = store.param(id).group == ParamGroup::LiWeights;
        let is_bias = store.param(id).name.ends_with(".b");
        if li || is_bias {
            let (lo, hi) = if li { (0.1, 0.9) } else { (-0.2, 0.2) };
            for v in store.value_mut(id).data_mut() {
                *v = rng.gen_range(lo..hi);
            }
        }
    }
    (store, head)
}

#[test]
fn default_head_matches_composed_reference() {
    let cfg = LIASPPConfig::new(32, 48, 48);
    assert_eq!(cfg.rates, [6, 12, 18]);
    for seed in 0..3 {
        let (store, head) = randomized_head(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = Tensor4::random_normal(Shape4::new(1, 32, 16, 16), 1.0, &mut rng);

        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let y = head.forward(&mut tape, &store, xn, &mut Vec::new()).unwrap();
        let got = tape.value(y);
        assert_eq!(got.shape(), Shape4::new(1, 48, 16, 16));

        let r = compare(got, &reference(&store, &cfg, &x), "li-aspp").unwrap();
        assert!(r.max_rel_err <= ORACLE_TOL, "seed {seed}: {r}");
    }
}

#[test]
fn small_rates_and_wide_zone_match_reference() {
    let mut cfg = LIASPPConfig::new(5, 4, 6);
    cfg.rates = [1, 2, 3];
    cfg.li = liconv::LIKernelSpec::new(2, 2, 1.5);
    let (store, head) = randomized_head(cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = Tensor4::random_normal(Shape4::new(2, 5, 9, 12), 1.0, &mut rng);
    let mut tape = Tape::new();
    let xn = tape.input(x.clone());
    let y = head.forward(&mut tape, &store, xn, &mut Vec::new()).unwrap();
    let r = compare(tape.value(y), &reference(&store, &cfg, &x), "li-aspp").unwrap();
    assert!(r.max_rel_err <= ORACLE_TOL, "{r}");
}
