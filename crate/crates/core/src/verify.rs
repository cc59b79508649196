//! The oracle, gradient and invariant battery behind `liconv verify` and the
//! acceptance tests.
//!
//! Every check is deterministic in its seed and reports a one-line detail with
//! the worst case it saw.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{finite_diff_gradcheck, GradcheckReport};
use crate::autodiff::{ParamGroup, ParamStore, Tape};
use crate::conv::{self, ConvSpec, Padding};
use crate::data::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::li::{self, build_li_kernel, ConvKind, Kernel2d, LIConvConfig, LIKernelSpec, LILayerParams};
use crate::models::{count_params, LIASPPConfig, LIBottleneckConfig, LiAspp, LiBottleneck, Segmenter, SegmenterConfig};
use crate::models::{BlockSpec, StemConfig};
use crate::oracle::{self, OracleReport};
use crate::tensor::{Shape4, Tensor4};

/// Relative tolerance for library-vs-oracle and LI-vs-baseline comparisons.
pub const ORACLE_TOL: f64 = 1e-6;
/// Relative tolerance for per-operation gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Relative tolerance for the full-model cross-entropy gradient.
pub const MODEL_GRAD_TOL: f64 = 1e-3;
/// Finite-difference step for operations that are linear in each coordinate.
pub const LINEAR_STEP: f64 = 1e-4;
/// Smaller step for ReLU composites, where a wide step can straddle a kink.
pub const COMPOSITE_STEP: f64 = 1e-5;

const GOLDEN_KERNELS: &str = include_str!("../data/golden_li_kernels.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult { name: name.to_string(), passed, detail: detail.into() }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => CheckResult::new(name, passed, detail),
            Err(e) => CheckResult::new(name, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerifyOptions {
    /// Roughly a quarter of the randomized instances.
    pub quick: bool,
    pub seed: u64,
    /// Negative control: builds LI filters with the surround sign flipped.
    pub inject_kernel_sign_bug: bool,
}

impl VerifyOptions {
    fn count(&self, full: usize) -> usize {
        if self.quick {
            full.div_ceil(4).max(1)
        } else {
            full
        }
    }
}

/// Runs every check in order.
pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    let s = opts.seed;
    let mut out = vec![kernel_golden(opts.inject_kernel_sign_bug)];
    out.push(CheckResult::from_result("dilated-conv-oracle", summarize_oracle(dilated_conv_oracle_suite(opts.count(100), s))));
    out.push(CheckResult::from_result("depthwise-oracle", summarize_oracle(depthwise_oracle_suite(opts.count(50), s))));
    out.push(CheckResult::from_result("li-layer-oracle", summarize_oracle(li_layer_oracle_suite(opts.count(50), s))));
    out.push(CheckResult::from_result("li-conv-oracle", summarize_oracle(li_conv_oracle_suite(opts.count(200), s))));
    out.push(CheckResult::from_result("conv-linearity", conv_linearity(opts.count(20), s)));
    out.push(CheckResult::from_result("translation-equivariance", translation_equivariance(opts.count(20), s)));
    out.push(CheckResult::from_result("gradients", summarize_grads(gradient_suite(opts.count(8), s), GRAD_TOL)));
    out.push(CheckResult::from_result(
        "model-gradient",
        summarize_grads(full_model_gradcheck(&seeds(s, if opts.quick { 1 } else { 3 })), MODEL_GRAD_TOL),
    ));
    out.push(CheckResult::from_result("baseline-reduction", summarize_reduction(baseline_reduction(opts.count(20), s))));
    out.push(CheckResult::from_result("parameter-delta", param_delta_law(opts.count(10), s)));
    out.push(CheckResult::from_result("zero-identity", zero_identity(opts.count(20), s)));
    out.push(CheckResult::from_result("monotone-suppression", monotone_suppression()));
    out.push(CheckResult::from_result("edge-contrast", edge_contrast().map(|r| (r.passed(), r.to_string()))));
    out
}

fn seeds(base: u64, n: u64) -> Vec<u64> {
    (0..n).map(|i| base.wrapping_add(i)).collect()
}

// ---------------------------------------------------------------- kernels ---

/// One entry of the golden LI-filter table.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenKernel {
    pub spec: LIKernelSpec,
    pub w_l: f64,
    pub values: Vec<f64>,
}

pub fn golden_kernels() -> Result<Vec<GoldenKernel>> {
    let bad = |line: usize, why: &str| Error::format("golden_li_kernels.txt", format!("line {line}: {why}"));
    let mut out: Vec<GoldenKernel> = Vec::new();
    let mut rows_left = 0usize;
    for (i, line) in GOLDEN_KERNELS.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("case ") {
            if rows_left != 0 {
                return Err(bad(i + 1, "previous case is incomplete"));
            }
            let f: Vec<&str> = rest.split_whitespace().collect();
            let [t, sigma, w] = f.as_slice() else { return Err(bad(i + 1, "expected `case t sigma w_l`")) };
            let t: usize = t.parse().map_err(|_| bad(i + 1, "bad t"))?;
            let sigma: f64 = sigma.parse().map_err(|_| bad(i + 1, "bad sigma"))?;
            let w_l: f64 = w.parse().map_err(|_| bad(i + 1, "bad w_l"))?;
            rows_left = 2 * t + 1;
            out.push(GoldenKernel { spec: LIKernelSpec::new(t, 1, sigma), w_l, values: Vec::new() });
        } else {
            let case = out.last_mut().filter(|_| rows_left > 0).ok_or_else(|| bad(i + 1, "row outside a case"))?;
            let row: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(i + 1, "bad value"))?;
            if row.len() != case.spec.zone_size() {
                return Err(bad(i + 1, "row length differs from the zone size"));
            }
            case.values.extend(row);
            rows_left -= 1;
        }
    }
    if rows_left != 0 {
        return Err(bad(0, "last case is incomplete"));
    }
    Ok(out)
}

fn kernel_under_test(spec: &LIKernelSpec, w_l: f64, sign_bug: bool) -> Result<Kernel2d> {
    let mut k = build_li_kernel(spec, w_l)?;
    if sign_bug {
        let centre = k.values.len() / 2;
        for (i, v) in k.values.iter_mut().enumerate() {
            if i != centre {
                *v = -*v;
            }
        }
    }
    Ok(k)
}

pub fn kernel_golden(sign_bug: bool) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let cases = golden_kernels()?;
        let mut worst = 0.0f64;
        let mut at = String::from("none");
        for g in &cases {
            let k = kernel_under_test(&g.spec, g.w_l, sign_bug)?;
            for (i, (&a, &b)) in k.values.iter().zip(&g.values).enumerate() {
                let e = oracle::relative_error(a, b);
                if e > worst {
                    worst = e;
                    at = format!("t={} sigma={} w_l={} entry {i}: {a:e} vs golden {b:e}", g.spec.zone_half_size, g.spec.sigma, g.w_l);
                }
            }
        }
        let passed = worst <= 1e-12;
        let verdict = if passed { "" } else { "LI-kernel golden mismatch; " };
        Ok((passed, format!("{verdict}{} cases, max_rel_err={worst:.3e}, worst: {at}", cases.len())))
    };
    CheckResult::from_result("li-kernel-golden", run())
}

// ---------------------------------------------------------------- oracles ---

/// Aggregate of a randomized oracle comparison.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: usize,
    pub report: OracleReport,
}

impl SuiteReport {
    pub fn passes(&self) -> bool {
        self.report.passes(ORACLE_TOL)
    }
}

fn summarize_oracle(r: Result<SuiteReport>) -> Result<(bool, String)> {
    r.map(|s| (s.passes(), format!("{} cases, {}", s.cases, s.report)))
}

fn random_spec(rng: &mut impl Rng, max_k: usize, dilations: &[usize], max_stride: usize) -> ConvSpec {
    let k = rng.gen_range(0..=max_k);
    let d = dilations[rng.gen_range(0..dilations.len())];
    let stride = rng.gen_range(1..=max_stride);
    let padding = if rng.gen_bool(0.7) { Padding::SameZero } else { Padding::Valid };
    ConvSpec { kernel_half_size: k, dilation: d, stride, padding }
}

/// A side length in `[lo, hi]` that leaves room for `spec`'s filter.
fn side(rng: &mut impl Rng, spec: &ConvSpec, lo: usize, hi: usize) -> usize {
    let min = match spec.padding {
        Padding::SameZero => 1,
        Padding::Valid => 2 * spec.kernel_half_size * spec.dilation + 1,
    };
    rng.gen_range(lo.max(min)..=hi.max(min))
}

fn with_label(mut r: OracleReport, label: &str) -> OracleReport {
    if r.max_rel_err > 0.0 {
        r.worst = format!("[{label}] {}", r.worst);
    }
    r
}

pub fn dilated_conv_oracle_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    let mut total = OracleReport::perfect();
    for i in 0..cases {
        // every fourth case is the undilated special case
        let dil: &[usize] = if i % 4 == 0 { &[1] } else { &[1, 2, 3, 4] };
        let spec = random_spec(&mut rng, 2, dil, 2);
        let (h, w) = (side(&mut rng, &spec, 3, 16), side(&mut rng, &spec, 3, 16));
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let x = Tensor4::random_uniform(Shape4::new(rng.gen_range(1..=2), ci, h, w), -1.0, 1.0, &mut rng);
        let k = spec.kernel_size();
        let wt = Tensor4::random_uniform(Shape4::new(co, ci, k, k), -1.0, 1.0, &mut rng);
        let got = conv::conv2d_dilated(&x, &wt, &spec, None)?;
        let want = oracle::oracle_dilated_conv(&x, &wt, &spec)?;
        total.merge(with_label(oracle::compare(&got, &want, "conv")?, &format!("case {i} {spec:?} x={}", x.shape())));
    }
    Ok(SuiteReport { cases, report: total })
}

pub fn depthwise_oracle_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0);
    let mut total = OracleReport::perfect();
    for i in 0..cases {
        let spec = random_spec(&mut rng, 2, &[1, 2, 3, 4], 2);
        let (h, w) = (side(&mut rng, &spec, 3, 16), side(&mut rng, &spec, 3, 16));
        let c = rng.gen_range(1..=4);
        let x = Tensor4::random_uniform(Shape4::new(rng.gen_range(1..=2), c, h, w), -1.0, 1.0, &mut rng);
        let k = spec.kernel_size();
        let wt = Tensor4::random_uniform(Shape4::new(c, 1, k, k), -1.0, 1.0, &mut rng);
        let got = conv::depthwise_conv2d_dilated(&x, &wt, &spec, None)?;
        let want = oracle::oracle_depthwise_conv(&x, &wt, &spec)?;
        total.merge(with_label(oracle::compare(&got, &want, "depthwise")?, &format!("case {i} {spec:?} x={}", x.shape())));
    }
    Ok(SuiteReport { cases, report: total })
}

fn random_li_spec(rng: &mut impl Rng) -> LIKernelSpec {
    LIKernelSpec::new(rng.gen_range(0..=2), rng.gen_range(1..=3), rng.gen_range(0.5..2.0))
}

fn random_intensities(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    (0..c).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..=1.0) }).collect()
}

pub fn li_layer_oracle_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let mut total = OracleReport::perfect();
    for i in 0..cases {
        let spec = random_li_spec(&mut rng);
        let c = rng.gen_range(1..=4);
        let x = Tensor4::random_uniform(Shape4::new(rng.gen_range(1..=2), c, rng.gen_range(1..=20), rng.gen_range(1..=20)), -1.0, 1.0, &mut rng);
        let w_l = random_intensities(&mut rng, c);
        let got = li::li_layer_forward(&x, &LILayerParams { w_l: w_l.clone() }, &spec)?;
        let want = oracle::oracle_li_layer(&x, &w_l, &spec)?;
        total.merge(with_label(oracle::compare(&got, &want, "li-layer")?, &format!("case {i} {spec:?} x={}", x.shape())));
    }
    Ok(SuiteReport { cases, report: total })
}

/// Library LI-Conv against the literal per-tap evaluation over `t ≤ 2`,
/// `e ≤ 3`, `d ∈ {1, 2, 4}`, `k ≤ 1`, sides up to 32, dense and depthwise.
pub fn li_conv_oracle_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1C);
    let mut total = OracleReport::perfect();
    for i in 0..cases {
        let li_spec = random_li_spec(&mut rng);
        let spec = random_spec(&mut rng, 1, &[1, 2, 4], 2);
        let (h, w) = (side(&mut rng, &spec, 4, 32), side(&mut rng, &spec, 4, 32));
        let kind = if rng.gen_bool(0.5) { ConvKind::Dense } else { ConvKind::Depthwise };
        let c = rng.gen_range(1..=3);
        let x = Tensor4::random_uniform(Shape4::new(rng.gen_range(1..=2), c, h, w), -1.0, 1.0, &mut rng);
        let w_l = random_intensities(&mut rng, c);
        let k = spec.kernel_size();
        let wshape = match kind {
            ConvKind::Dense => Shape4::new(rng.gen_range(1..=3), c, k, k),
            ConvKind::Depthwise => Shape4::new(c, 1, k, k),
        };
        let wt = Tensor4::random_uniform(wshape, -1.0, 1.0, &mut rng);
        let cfg = LIConvConfig::new(spec, kind, li_spec);
        let got = li::li_conv_forward(&x, &LILayerParams { w_l: w_l.clone() }, &wt, &cfg)?;
        let want = oracle::oracle_li_conv(&x, &w_l, &wt, &cfg)?;
        let label = format!("case {i} {kind:?} {spec:?} {li_spec:?} x={}", x.shape());
        total.merge(with_label(oracle::compare(&got, &want, "li-conv")?, &label));
    }
    Ok(SuiteReport { cases, report: total })
}

fn conv_linearity(cases: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2A);
    let mut total = OracleReport::perfect();
    for _ in 0..cases {
        let spec = random_spec(&mut rng, 2, &[1, 2, 3], 2);
        let (h, w) = (side(&mut rng, &spec, 3, 14), side(&mut rng, &spec, 3, 14));
        let s = Shape4::new(1, rng.gen_range(1..=3), h, w);
        let x = Tensor4::random_uniform(s, -1.0, 1.0, &mut rng);
        let y = Tensor4::random_uniform(s, -1.0, 1.0, &mut rng);
        let k = spec.kernel_size();
        let wt = Tensor4::random_uniform(Shape4::new(2, s.c, k, k), -1.0, 1.0, &mut rng);
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let lhs = conv::conv2d_dilated(&x.scale(a).add(&y.scale(b))?, &wt, &spec, None)?;
        let rhs = conv::conv2d_dilated(&x, &wt, &spec, None)?.scale(a).add(&conv::conv2d_dilated(&y, &wt, &spec, None)?.scale(b))?;
        total.merge(oracle::compare(&lhs, &rhs, "linearity")?);
    }
    Ok((total.passes(1e-5), format!("{cases} cases, {total}")))
}

fn translation_equivariance(cases: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E);
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let spec = ConvSpec::same(rng.gen_range(0..=2), rng.gen_range(1..=3)).with_padding(Padding::Valid);
        let extent = 2 * spec.kernel_half_size * spec.dilation + 1;
        let (h, w) = (extent + rng.gen_range(2..6), extent + rng.gen_range(2..6));
        let x = Tensor4::random_uniform(Shape4::new(1, 2, h, w), -1.0, 1.0, &mut rng);
        let shifted = Tensor4::from_fn(x.shape(), |n, c, y, x_| if y > 0 && x_ > 0 { x.at(n, c, y - 1, x_ - 1) } else { 0.0 });
        let k = spec.kernel_size();
        let wt = Tensor4::random_uniform(Shape4::new(2, 2, k, k), -1.0, 1.0, &mut rng);
        let a = conv::conv2d_dilated(&x, &wt, &spec, None)?;
        let b = conv::conv2d_dilated(&shifted, &wt, &spec, None)?;
        let s = a.shape();
        for c in 0..s.c {
            for y in 0..s.h - 1 {
                for x_ in 0..s.w - 1 {
                    if a.at(0, c, y, x_) != b.at(0, c, y + 1, x_ + 1) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    Ok((mismatches == 0, format!("{cases} cases, {mismatches} interior pixels differ after a (1,1) shift")))
}

// -------------------------------------------------------------- gradients ---

/// Worst gradient error of one operation family.
#[derive(Debug, Clone)]
pub struct FamilyReport {
    pub family: &'static str,
    pub instances: usize,
    pub report: GradcheckReport,
}

fn summarize_grads(r: Result<Vec<FamilyReport>>, tol: f64) -> Result<(bool, String)> {
    let fams = r?;
    let instances: usize = fams.iter().map(|f| f.instances).sum();
    let worst = fams.iter().max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err));
    let passed = fams.iter().all(|f| f.report.passes(tol));
    let detail = match worst {
        Some(w) => format!("{instances} instances in {} families; worst family {}: {}", fams.len(), w.family, w.report),
        None => "no instances".into(),
    };
    Ok((passed, detail))
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks the gradient of `⟨r, build(θ)⟩` for a random probe `r`, over every
/// parameter in `store` (inputs are registered as parameters too).
pub fn seeded_gradcheck(
    mut store: ParamStore<f64>,
    build: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<crate::autodiff::NodeId>,
    step: f64,
    rng: &mut impl Rng,
) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let y = build(&mut tape, &store)?;
    let r = Tensor4::random_normal(tape.value(y).shape(), 1.0, rng);
    let grads = tape.backward_seeded(y, r.clone())?;
    store.zero_grads();
    tape.collect_into(&grads, &mut store)?;
    let seed = rng.gen();
    finite_diff_gradcheck(
        &mut store,
        |s| {
            let mut t = Tape::new();
            let y = build(&mut t, s)?;
            Ok(dot(t.value(y), &r))
        },
        step,
        seed,
    )
}

/// Uniform in `±[0.05, 1]`, keeping inputs clear of the first ReLU's kink.
fn away_from_zero(shape: Shape4, rng: &mut impl Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn randomize_model_params(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let group = store.param(id).group;
        if group == ParamGroup::ConvWeights {
            continue;
        }
        for v in store.value_mut(id).data_mut() {
            *v = match group {
                ParamGroup::LiWeights => rng.gen_range(0.1..0.9),
                _ => rng.gen_range(-0.1..0.1),
            };
        }
    }
}

fn family(name: &'static str, n: usize, mut one: impl FnMut(usize) -> Result<GradcheckReport>) -> Result<FamilyReport> {
    let mut report = GradcheckReport::default();
    for i in 0..n {
        report.merge(one(i)?);
    }
    Ok(FamilyReport { family: name, instances: n, report })
}

/// Per-operation families: LI layer, dense and depthwise convolution, LI-Conv,
/// LI bottleneck, LI-ASPP, and resize/pool/concat — `per_family` instances each.
pub fn gradient_suite(per_family: usize, seed: u64) -> Result<Vec<FamilyReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AD);
    let rng = &mut rng;
    let mut out = Vec::new();

    out.push(family("li-layer", per_family, |_| {
        let spec = random_li_spec(rng);
        let c = rng.gen_range(1..=3);
        let mut st = ParamStore::new();
        let xs = Shape4::new(rng.gen_range(1..=2), c, rng.gen_range(3..=9), rng.gen_range(3..=9));
        let x = st.add("x", Tensor4::random_uniform(xs, -1.0, 1.0, rng), ParamGroup::Other)?;
        let w = st.add("w_l", Tensor4::random_uniform(Shape4::new(1, c, 1, 1), 0.0, 1.0, rng), ParamGroup::LiWeights)?;
        seeded_gradcheck(st, |t, s| {
            let (xn, wn) = (t.param(s, x), t.param(s, w));
            t.li_layer(xn, wn, spec)
        }, LINEAR_STEP, rng)
    })?);

    for depthwise in [false, true] {
        let name = if depthwise { "depthwise" } else { "conv" };
        out.push(family(name, per_family, |_| {
            let spec = random_spec(rng, 1, &[1, 2, 3], 2);
            let (h, w) = (side(rng, &spec, 3, 9), side(rng, &spec, 3, 9));
            let ci = rng.gen_range(1..=3);
            let co = if depthwise { ci } else { rng.gen_range(1..=3) };
            let k = spec.kernel_size();
            let mut st = ParamStore::new();
            let x = st.add("x", Tensor4::random_uniform(Shape4::new(rng.gen_range(1..=2), ci, h, w), -1.0, 1.0, rng), ParamGroup::Other)?;
            let ws = if depthwise { Shape4::new(ci, 1, k, k) } else { Shape4::new(co, ci, k, k) };
            let wt = st.add("w", Tensor4::random_uniform(ws, -1.0, 1.0, rng), ParamGroup::ConvWeights)?;
            let b = st.add("b", Tensor4::random_uniform(Shape4::new(1, co, 1, 1), -1.0, 1.0, rng), ParamGroup::Other)?;
            seeded_gradcheck(st, |t, s| {
                let (xn, wn, bn) = (t.param(s, x), t.param(s, wt), t.param(s, b));
                if depthwise {
                    t.depthwise(xn, wn, Some(bn), spec)
                } else {
                    t.conv2d(xn, wn, Some(bn), spec)
                }
            }, LINEAR_STEP, rng)
        })?);
    }

    out.push(family("li-conv", per_family, |_| {
        let li_spec = random_li_spec(rng);
        let spec = random_spec(rng, 1, &[1, 2, 4], 2);
        let (h, w) = (side(rng, &spec, 4, 10), side(rng, &spec, 4, 10));
        let depthwise = rng.gen_bool(0.5);
        let c = rng.gen_range(1..=3);
        let k = spec.kernel_size();
        let mut st = ParamStore::new();
        let x = st.add("x", away_from_zero(Shape4::new(1, c, h, w), rng), ParamGroup::Other)?;
        let wl = st.add("w_l", Tensor4::random_uniform(Shape4::new(1, c, 1, 1), 0.05, 0.95, rng), ParamGroup::LiWeights)?;
        let ws = if depthwise { Shape4::new(c, 1, k, k) } else { Shape4::new(rng.gen_range(1..=3), c, k, k) };
        let wt = st.add("w", Tensor4::random_uniform(ws, -1.0, 1.0, rng), ParamGroup::ConvWeights)?;
        seeded_gradcheck(st, |t, s| {
            let xn = t.param(s, x);
            let r = t.relu(xn);
            let wn = t.param(s, wl);
            let inh = t.li_layer(r, wn, li_spec)?;
            let a = t.relu(inh);
            let cw = t.param(s, wt);
            if depthwise {
                t.depthwise(a, cw, None, spec)
            } else {
                t.conv2d(a, cw, None, spec)
            }
        }, COMPOSITE_STEP, rng)
    })?);

    out.push(family("li-bottleneck", per_family, |_| {
        let cin = rng.gen_range(2..=3);
        let stride = rng.gen_range(1..=2);
        let cfg = LIBottleneckConfig {
            in_channels: cin,
            out_channels: if rng.gen_bool(0.5) { cin } else { rng.gen_range(2..=4) },
            expansion: rng.gen_range(2..=3),
            stride,
            dilation: rng.gen_range(1..=2),
            li: random_li_spec(rng),
            li_enabled: true,
        };
        let mut st = ParamStore::new();
        let block = LiBottleneck::new(&mut st, "block", cfg, rng)?;
        randomize_model_params(&mut st, rng);
        let x = st.add("x", away_from_zero(Shape4::new(1, cin, rng.gen_range(5..=8), rng.gen_range(5..=8)), rng), ParamGroup::Other)?;
        seeded_gradcheck(st, |t, s| {
            let xn = t.param(s, x);
            block.forward(t, s, xn, &mut Vec::new())
        }, COMPOSITE_STEP, rng)
    })?);

    out.push(family("li-aspp", per_family, |_| {
        let mut cfg = LIASPPConfig::new(rng.gen_range(2..=3), 3, 3);
        cfg.rates = [rng.gen_range(1..=2), rng.gen_range(2..=3), rng.gen_range(3..=4)];
        cfg.li = random_li_spec(rng);
        let mut st = ParamStore::new();
        let head = LiAspp::new(&mut st, "head", cfg, rng)?;
        randomize_model_params(&mut st, rng);
        let xs = Shape4::new(1, cfg.in_channels, rng.gen_range(5..=7), rng.gen_range(5..=7));
        let x = st.add("x", away_from_zero(xs, rng), ParamGroup::Other)?;
        seeded_gradcheck(st, |t, s| {
            let xn = t.param(s, x);
            head.forward(t, s, xn, &mut Vec::new())
        }, COMPOSITE_STEP, rng)
    })?);

    out.push(family("resize-pool-concat", per_family, |_| {
        let xs = Shape4::new(rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=7), rng.gen_range(2..=7));
        let (oh, ow) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let mut st = ParamStore::new();
        let x = st.add("x", Tensor4::random_uniform(xs, -1.0, 1.0, rng), ParamGroup::Other)?;
        seeded_gradcheck(st, |t, s| {
            let xn = t.param(s, x);
            let a = t.resize(xn, oh, ow)?;
            let g = t.global_avg_pool(xn)?;
            let b = t.resize(g, oh, ow)?;
            t.concat(&[a, b])
        }, LINEAR_STEP, rng)
    })?);

    Ok(out)
}

/// A three-block segmenter small enough to differentiate numerically.
pub fn small_segmenter_config(num_classes: usize) -> SegmenterConfig {
    let mut cfg = SegmenterConfig::toy(num_classes);
    cfg.stem.out_channels = 8;
    cfg.blocks.truncate(3);
    for b in &mut cfg.blocks {
        b.out_channels = 8;
    }
    cfg.output_stride = 8;
    cfg.li_positions = [1, 2].into_iter().collect();
    cfg.head.branch_channels = 6;
    cfg.head.projection_channels = 6;
    cfg.head.rates = [1, 2, 3];
    cfg
}

fn model_loss(m: &Segmenter<f64>, store: &ParamStore<f64>, x: &Tensor4<f64>, labels: &LabelMap) -> Result<f64> {
    let mut tape = Tape::new();
    let xn = tape.input(x.clone());
    let out = m.forward_with(store, &mut tape, xn)?;
    let l = tape.loss_with_l2(out.logits, labels, IGNORE_INDEX, 4e-5, store)?;
    Ok(tape.scalar(l))
}

/// Cross-entropy + L2 of the small segmenter on a `1×3×17×17` image, one
/// instance per seed, with non-zero LI intensities and biases.
pub fn full_model_gradcheck(seeds: &[u64]) -> Result<Vec<FamilyReport>> {
    let mut report = GradcheckReport::default();
    for &seed in seeds {
        let mut m = Segmenter::<f64>::new(small_segmenter_config(3), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF011);
        randomize_model_params(&mut m.params, &mut rng);
        let x = Tensor4::random_uniform(Shape4::new(1, 3, 17, 17), 0.0, 1.0, &mut rng);
        let labels = LabelMap::new(1, 17, 17, (0..17 * 17).map(|_| rng.gen_range(0..3u8)).collect())?;
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let out = m.forward(&mut tape, xn)?;
        let l = tape.loss_with_l2(out.logits, &labels, IGNORE_INDEX, 4e-5, &m.params)?;
        let mut store = m.params.clone();
        store.zero_grads();
        tape.backward_into(l, &mut store)?;
        report.merge(finite_diff_gradcheck(&mut store, |s| model_loss(&m, s, &x, &labels), COMPOSITE_STEP, seed)?);
    }
    Ok(vec![FamilyReport { family: "segmenter-ce", instances: seeds.len(), report }])
}

// ------------------------------------------------------ baseline reduction ---

#[derive(Debug, Clone)]
pub struct ReductionReport {
    pub aspp: SuiteReport,
    pub bottleneck: SuiteReport,
    pub segmenter: SuiteReport,
}

impl ReductionReport {
    pub fn passes(&self) -> bool {
        self.aspp.passes() && self.bottleneck.passes() && self.segmenter.passes()
    }
}

fn summarize_reduction(r: Result<ReductionReport>) -> Result<(bool, String)> {
    r.map(|r| {
        let d = format!(
            "aspp {} inputs max_rel={:.3e}; bottleneck {} inputs max_rel={:.3e}; segmenter {} inputs max_rel={:.3e}",
            r.aspp.cases,
            r.aspp.report.max_rel_err,
            r.bottleneck.cases,
            r.bottleneck.report.max_rel_err,
            r.segmenter.cases,
            r.segmenter.report.max_rel_err
        );
        (r.passes(), d)
    })
}

fn forward_once(build: impl FnOnce(&mut Tape<f64>) -> Result<crate::autodiff::NodeId>) -> Result<Tensor4<f64>> {
    let mut t = Tape::new();
    let y = build(&mut t)?;
    Ok(t.value(y).clone())
}

/// With every intensity at zero, LI-ASPP, the LI bottleneck and the full
/// segmenter reproduce their LI-free counterparts built from the same seed.
pub fn baseline_reduction(inputs: usize, seed: u64) -> Result<ReductionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA5E);
    let mut aspp = OracleReport::perfect();
    for i in 0..inputs {
        let mut cfg = LIASPPConfig::new(rng.gen_range(2..=8), rng.gen_range(2..=6), rng.gen_range(2..=6));
        cfg.rates = [rng.gen_range(1..=3), rng.gen_range(2..=6), rng.gen_range(3..=9)];
        cfg.li = random_li_spec(&mut rng);
        let init: u64 = rng.gen();
        let x = Tensor4::random_uniform(Shape4::new(rng.gen_range(1..=2), cfg.in_channels, rng.gen_range(3..=12), rng.gen_range(3..=12)), -1.0, 1.0, &mut rng);
        let run = |li_enabled: bool| -> Result<Tensor4<f64>> {
            let mut st = ParamStore::new();
            let head = LiAspp::new(&mut st, "head", LIASPPConfig { li_enabled, ..cfg }, &mut ChaCha8Rng::seed_from_u64(init))?;
            forward_once(|t| {
                let xn = t.input(x.clone());
                head.forward(t, &st, xn, &mut Vec::new())
            })
        };
        aspp.merge(with_label(oracle::compare(&run(true)?, &run(false)?, "aspp")?, &format!("input {i}")));
    }

    let mut bottleneck = OracleReport::perfect();
    for i in 0..inputs {
        let cin = rng.gen_range(2..=8);
        let cfg = LIBottleneckConfig {
            in_channels: cin,
            out_channels: if rng.gen_bool(0.5) { cin } else { rng.gen_range(2..=8) },
            expansion: rng.gen_range(2..=4),
            stride: rng.gen_range(1..=2),
            dilation: rng.gen_range(1..=2),
            li: random_li_spec(&mut rng),
            li_enabled: true,
        };
        let init: u64 = rng.gen();
        let x = Tensor4::random_uniform(Shape4::new(rng.gen_range(1..=2), cin, rng.gen_range(3..=12), rng.gen_range(3..=12)), -1.0, 1.0, &mut rng);
        let run = |li_enabled: bool| -> Result<Tensor4<f64>> {
            let mut st = ParamStore::new();
            let block = LiBottleneck::new(&mut st, "block", LIBottleneckConfig { li_enabled, ..cfg }, &mut ChaCha8Rng::seed_from_u64(init))?;
            forward_once(|t| {
                let xn = t.input(x.clone());
                block.forward(t, &st, xn, &mut Vec::new())
            })
        };
        bottleneck.merge(with_label(oracle::compare(&run(true)?, &run(false)?, "bottleneck")?, &format!("input {i}")));
    }

    let mut seg = OracleReport::perfect();
    let cfg = SegmenterConfig::toy(4);
    let per_model = 5;
    let mut pair: Option<(Segmenter<f32>, Segmenter<f32>)> = None;
    for i in 0..inputs {
        if i % per_model == 0 {
            let s: u64 = rng.gen();
            pair = Some((Segmenter::new(cfg.clone(), s)?, Segmenter::new(cfg.baseline(), s)?));
        }
        let (li_model, base) = pair.as_ref().expect("built above");
        let side = [33, 48, 49][rng.gen_range(0..3)];
        let x = Tensor4::<f32>::random_uniform(Shape4::new(1, 3, side, side), 0.0, 1.0, &mut rng);
        let a = li_model.infer(&x)?.cast::<f64>();
        let b = base.infer(&x)?.cast::<f64>();
        seg.merge(with_label(oracle::compare(&a, &b, "segmenter")?, &format!("input {i}")));
    }
    Ok(ReductionReport {
        aspp: SuiteReport { cases: inputs, report: aspp },
        bottleneck: SuiteReport { cases: inputs, report: bottleneck },
        segmenter: SuiteReport { cases: inputs, report: seg },
    })
}

// ---------------------------------------------------------- accounting ---

/// A random valid segmenter over 2–6 blocks with a random LI placement.
pub fn random_segmenter_config(rng: &mut impl Rng) -> SegmenterConfig {
    let n_blocks = rng.gen_range(2..=6);
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        blocks.push(BlockSpec {
            out_channels: rng.gen_range(2..=24),
            expansion: rng.gen_range(1..=4),
            stride: if rng.gen_bool(0.3) { 2 } else { 1 },
            dilation: rng.gen_range(1..=2),
        });
    }
    let stem = StemConfig { out_channels: rng.gen_range(2..=16), stride: rng.gen_range(1..=2) };
    let output_stride = blocks.iter().fold(stem.stride, |acc, b| acc * b.stride);
    let mut cfg = SegmenterConfig {
        num_classes: rng.gen_range(2..=6),
        image_channels: rng.gen_range(1..=3),
        output_stride,
        li_positions: Default::default(),
        li: random_li_spec(rng),
        stem,
        blocks,
        head: LIASPPConfig::new(0, rng.gen_range(2..=12), rng.gen_range(2..=12)),
    };
    cfg.head.li_enabled = rng.gen_bool(0.5);
    cfg.li_positions = cfg.eligible_positions().into_iter().filter(|_| rng.gen_bool(0.5)).collect();
    cfg
}

/// Sum over LI layers of their input widths.
pub fn li_input_widths(cfg: &SegmenterConfig) -> usize {
    let blocks: usize = cfg.li_positions.iter().map(|&i| cfg.block(i).hidden_channels()).sum();
    let head = if cfg.head.li_enabled { 3 * cfg.backbone_channels() } else { 0 };
    blocks + head
}

/// `params(LI) − params(baseline) = Σ LI input widths`, exactly, on random
/// configs; the analytic count must also equal the instantiated store's.
pub fn param_delta_law(configs: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDE17A);
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for i in 0..configs {
        let cfg = random_segmenter_config(&mut rng);
        cfg.validate()?;
        let with = count_params(&cfg).total();
        let without = count_params(&cfg.baseline()).total();
        let built = Segmenter::<f32>::new(cfg.clone(), i as u64)?.params.scalar_count();
        let expected = li_input_widths(&cfg);
        if with - without != expected || built != with {
            failures.push(format!("config {i}: delta {} expected {expected}, built {built} vs counted {with}", with - without));
        }
        rows.push(format!("{}", with - without));
    }
    let detail = if failures.is_empty() {
        format!("{configs} configs, deltas [{}] all match", rows.join(", "))
    } else {
        failures.join("; ")
    };
    Ok((failures.is_empty(), detail))
}

// ------------------------------------------------------------- invariants ---

fn zero_identity(cases: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0);
    let mut bad = 0;
    for _ in 0..cases {
        let spec = random_li_spec(&mut rng);
        let s = Shape4::new(rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=16), rng.gen_range(1..=16));
        let x32 = Tensor4::<f32>::random_uniform(s, -3.0, 3.0, &mut rng);
        let x64 = Tensor4::<f64>::random_uniform(s, -3.0, 3.0, &mut rng);
        if li::li_layer_forward(&x32, &LILayerParams::zeros(s.c), &spec)? != x32 {
            bad += 1;
        }
        if li::li_layer_forward(&x64, &LILayerParams::zeros(s.c), &spec)? != x64 {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{} tensors (f32 and f64), {bad} differ bitwise from the input", 2 * cases)))
}

/// Constant non-negative input; every output pixel (border included) must be
/// non-increasing along `w ∈ {0, 0.1, …, 1}`.
fn monotone_suppression() -> Result<(bool, String)> {
    let mut violations = 0;
    let mut checked = 0;
    for spec in [LIKernelSpec::new(1, 1, 1.0), LIKernelSpec::new(2, 1, 0.7), LIKernelSpec::new(1, 3, 1.5), LIKernelSpec::new(2, 2, 1.0)] {
        for c in [0.0, 0.3, 1.0, 5.0] {
            let x = Tensor4::<f64>::full(Shape4::new(1, 1, 9, 9), c);
            let mut prev: Option<Tensor4<f64>> = None;
            for step in 0..=10 {
                let y = li::li_layer_forward(&x, &LILayerParams { w_l: vec![step as f64 / 10.0] }, &spec)?;
                if let Some(p) = &prev {
                    checked += y.len();
                    violations += y.data().iter().zip(p.data()).filter(|(a, b)| a > b).count();
                }
                prev = Some(y);
            }
        }
    }
    Ok((violations == 0, format!("{checked} pixel steps, {violations} increases")))
}

/// Step-edge probe for one intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeRow {
    pub w_l: f64,
    /// `|x[·, 4] − x[·, 3]|` before and after the LI layer, minimum over interior rows.
    pub before: f64,
    pub after: f64,
    /// Depth of the dark band left of the edge plus height of the bright band
    /// right of it, relative to the neighbouring plateau columns (zero for the
    /// raw step).
    pub mach_band: f64,
}

#[derive(Debug, Clone)]
pub struct EdgeContrastReport {
    pub rows: Vec<EdgeRow>,
}

impl EdgeContrastReport {
    /// Strict increase of the across-edge difference for every intensity.
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.after > r.before)
    }
}

impl fmt::Display for EdgeContrastReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let incr = self.rows.iter().filter(|r| r.after > r.before).count();
        write!(f, "{incr}/{} intensities increase the across-edge difference;", self.rows.len())?;
        for r in &self.rows {
            write!(f, " w={:.1}: {:.4}->{:.4} (mach band {:+.4})", r.w_l, r.before, r.after, r.mach_band)?;
        }
        Ok(())
    }
}

/// `1×1×8×8` vertical 0→1 step between columns 3 and 4 with `t = 1`, `e = 1`,
/// `σ = 1`; interior rows only, over `w ∈ {0.1, …, 1.0}`.
pub fn edge_contrast() -> Result<EdgeContrastReport> {
    let spec = LIKernelSpec::new(1, 1, 1.0);
    let x = Tensor4::<f64>::from_fn(Shape4::new(1, 1, 8, 8), |_, _, _, c| if c >= 4 { 1.0 } else { 0.0 });
    let diff = |t: &Tensor4<f64>, y: usize, a: usize| (t.at(0, 0, y, a + 1) - t.at(0, 0, y, a)).abs();
    let mut rows = Vec::new();
    for step in 1..=10 {
        let w_l = step as f64 / 10.0;
        let y = li::li_layer_forward(&x, &LILayerParams { w_l: vec![w_l] }, &spec)?;
        let (mut before, mut after, mut mach_band) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        for r in 1..7 {
            before = before.min(diff(&x, r, 3));
            after = after.min(diff(&y, r, 3));
            let v = |c| y.at(0, 0, r, c);
            mach_band = mach_band.min((v(2) - v(3)) + (v(4) - v(5)));
        }
        rows.push(EdgeRow { w_l, before, after, mach_band });
    }
    Ok(EdgeContrastReport { rows })
}
