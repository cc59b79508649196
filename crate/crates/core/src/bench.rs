//! Wall-clock timing of LI-Conv against the plain dilated convolution it
//! wraps, and of whole-model inference with and without LI layers.
//!
//! Every figure is the median over repetitions after warmup. Baseline and LI
//! variants are timed in alternation so drift affects both equally.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::conv::ConvSpec;
use crate::data::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::li::LIKernelSpec;
use crate::models::{Segmenter, SegmenterConfig};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchGrid {
    pub channels: Vec<usize>,
    /// Square spatial sides.
    pub sizes: Vec<usize>,
    pub dilations: Vec<usize>,
    pub zone_half_sizes: Vec<usize>,
    pub li_rates: Vec<usize>,
}

impl Default for BenchGrid {
    fn default() -> Self {
        BenchGrid {
            channels: vec![16, 64],
            sizes: vec![17, 33],
            dilations: vec![1, 6],
            zone_half_sizes: vec![1, 2],
            li_rates: vec![1, 2],
        }
    }
}

impl BenchGrid {
    pub fn len(&self) -> usize {
        self.channels.len() * self.sizes.len() * self.dilations.len() * self.zone_half_sizes.len() * self.li_rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn points(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for &c in &self.channels {
            for &s in &self.sizes {
                for &d in &self.dilations {
                    for &t in &self.zone_half_sizes {
                        for &e in &self.li_rates {
                            out.push((c, s, d, t, e));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Repetitions {
    pub warmup: usize,
    pub reps: usize,
}

impl Default for Repetitions {
    fn default() -> Self {
        Repetitions { warmup: 3, reps: 20 }
    }
}

impl Repetitions {
    fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(Error::Config("benchmark needs at least one repetition".into()));
        }
        Ok(())
    }
}

/// Median milliseconds for one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub channels: usize,
    pub size: usize,
    pub dilation: usize,
    pub zone_half_size: usize,
    pub li_rate: usize,
    pub conv_fwd_ms: f64,
    pub li_conv_fwd_ms: f64,
    pub conv_fwd_bwd_ms: f64,
    pub li_conv_fwd_bwd_ms: f64,
}

impl BenchRow {
    pub fn fwd_overhead(&self) -> f64 {
        self.li_conv_fwd_ms / self.conv_fwd_ms - 1.0
    }

    pub fn fwd_bwd_overhead(&self) -> f64 {
        self.li_conv_fwd_bwd_ms / self.conv_fwd_bwd_ms - 1.0
    }
}

pub const GRID_CSV_HEADER: &str =
    "channels,size,dilation,t,e,conv_fwd_ms,li_conv_fwd_ms,fwd_overhead,conv_fwd_bwd_ms,li_conv_fwd_bwd_ms,fwd_bwd_overhead";

pub fn grid_to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(GRID_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.channels,
            r.size,
            r.dilation,
            r.zone_half_size,
            r.li_rate,
            r.conv_fwd_ms,
            r.li_conv_fwd_ms,
            r.fwd_overhead(),
            r.conv_fwd_bwd_ms,
            r.li_conv_fwd_bwd_ms,
            r.fwd_bwd_overhead()
        );
    }
    s
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms(f: &mut impl FnMut() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

/// Per-repetition samples of `fs`, timed round-robin after warmup.
pub fn sample_interleaved(reps: Repetitions, fs: &mut [&mut dyn FnMut() -> Result<()>]) -> Result<Vec<Vec<f64>>> {
    reps.validate()?;
    for _ in 0..reps.warmup {
        for f in fs.iter_mut() {
            f()?;
        }
    }
    let mut samples = vec![Vec::with_capacity(reps.reps); fs.len()];
    for _ in 0..reps.reps {
        for (f, s) in fs.iter_mut().zip(&mut samples) {
            s.push(time_ms(f)?);
        }
    }
    Ok(samples)
}

/// Medians of `fs`, timed round-robin.
pub fn time_interleaved(reps: Repetitions, fs: &mut [&mut dyn FnMut() -> Result<()>]) -> Result<Vec<f64>> {
    Ok(sample_interleaved(reps, fs)?.iter_mut().map(|s| median(s)).collect())
}

/// Median over repetitions of `a_i / b_i − 1`; pairing cancels slow drift.
pub fn paired_overhead(a: &[f64], b: &[f64]) -> f64 {
    let mut r: Vec<f64> = a.iter().zip(b).map(|(x, y)| x / y - 1.0).collect();
    median(&mut r)
}

struct Operands {
    x: Tensor4<f32>,
    w: Tensor4<f32>,
    w_l: Tensor4<f32>,
    seed: Tensor4<f32>,
}

/// `relu → depthwise 3×3 (dilation d)`, optionally with `LI → relu` before
/// the convolution — the ASPP branch with and without inhibition.
fn branch(tape: &mut Tape<f32>, ops: &Operands, spec: ConvSpec, li: Option<LIKernelSpec>) -> Result<NodeId> {
    let x = tape.input_with_grad(ops.x.clone());
    let w = tape.input_with_grad(ops.w.clone());
    let mut h = tape.relu(x);
    if let Some(li) = li {
        let wl = tape.input_with_grad(ops.w_l.clone());
        let y = tape.li_layer(h, wl, li)?;
        h = tape.relu(y);
    }
    tape.depthwise(h, w, None, spec)
}

fn fwd(ops: &Operands, spec: ConvSpec, li: Option<LIKernelSpec>) -> Result<()> {
    let mut tape = Tape::new();
    branch(&mut tape, ops, spec, li)?;
    Ok(())
}

fn fwd_bwd(ops: &Operands, spec: ConvSpec, li: Option<LIKernelSpec>) -> Result<()> {
    let mut tape = Tape::new();
    let y = branch(&mut tape, ops, spec, li)?;
    tape.backward_seeded(y, ops.seed.clone())?;
    Ok(())
}

/// Times every grid point; one row per `(C, H×W, d, t, e)` combination.
pub fn run_grid(grid: &BenchGrid, reps: Repetitions, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(grid.len());
    for (c, size, d, t, e) in grid.points() {
        let s = Shape4::new(1, c, size, size);
        let ops = Operands {
            x: Tensor4::random_uniform(s, -1.0, 1.0, &mut rng),
            w: Tensor4::random_normal(Shape4::new(c, 1, 3, 3), 0.5, &mut rng),
            w_l: Tensor4::random_uniform(Shape4::new(1, c, 1, 1), 0.0, 1.0, &mut rng),
            seed: Tensor4::random_normal(s, 1.0, &mut rng),
        };
        let spec = ConvSpec::same(1, d);
        let li = Some(LIKernelSpec::new(t, e, 1.0));
        let f = time_interleaved(reps, &mut [
            &mut || fwd(&ops, spec, None),
            &mut || fwd(&ops, spec, li),
            &mut || fwd_bwd(&ops, spec, None),
            &mut || fwd_bwd(&ops, spec, li),
        ])?;
        rows.push(BenchRow {
            channels: c,
            size,
            dilation: d,
            zone_half_size: t,
            li_rate: e,
            conv_fwd_ms: f[0],
            li_conv_fwd_ms: f[1],
            conv_fwd_bwd_ms: f[2],
            li_conv_fwd_bwd_ms: f[3],
        });
    }
    Ok(rows)
}

/// Whole-model inference medians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelBench {
    pub size: usize,
    pub batch: usize,
    pub baseline_ms: f64,
    /// LI model with trained-looking intensities (`w = 0.5`).
    pub li_ms: f64,
    /// LI model at its zero initialisation: same graph, trivially cheap filters.
    pub li_zero_ms: f64,
    /// Median paired LI-vs-baseline overhead.
    pub overhead: f64,
    /// Median paired zero-vs-nonzero intensity difference.
    pub zero_vs_nonzero: f64,
}

impl ModelBench {
    pub fn overhead(&self) -> f64 {
        self.overhead
    }

    pub fn zero_vs_nonzero(&self) -> f64 {
        self.zero_vs_nonzero
    }

    pub fn to_csv(&self) -> String {
        format!(
            "size,batch,baseline_ms,li_ms,li_zero_ms,li_overhead,zero_vs_nonzero\n{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            self.size,
            self.batch,
            self.baseline_ms,
            self.li_ms,
            self.li_zero_ms,
            self.overhead(),
            self.zero_vs_nonzero()
        )
    }
}

/// LI segmenter against its baseline (shared weights) on a `batch×3×size²` input.
pub fn model_inference(cfg: &SegmenterConfig, size: usize, batch: usize, reps: Repetitions, seed: u64) -> Result<ModelBench> {
    cfg.check_input(size, size)?;
    let base = Segmenter::<f32>::new(cfg.baseline(), seed)?;
    let li_zero = Segmenter::<f32>::new(cfg.clone(), seed)?;
    let mut li = li_zero.clone();
    let ids: Vec<_> = li.params.ids().filter(|&id| li.params.param(id).group == crate::autodiff::ParamGroup::LiWeights).collect();
    for id in ids {
        li.params.value_mut(id).fill(0.5);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBE);
    let x = Tensor4::random_uniform(Shape4::new(batch, cfg.image_channels, size, size), 0.0, 1.0, &mut rng);
    let mut m = sample_interleaved(reps, &mut [
        &mut || base.infer(&x).map(drop),
        &mut || li.infer(&x).map(drop),
        &mut || li_zero.infer(&x).map(drop),
    ])?;
    let overhead = paired_overhead(&m[1], &m[0]);
    let zero_vs_nonzero = paired_overhead(&m[2], &m[1]);
    Ok(ModelBench {
        size,
        batch,
        baseline_ms: median(&mut m[0]),
        li_ms: median(&mut m[1]),
        li_zero_ms: median(&mut m[2]),
        overhead,
        zero_vs_nonzero,
    })
}

/// One training step (forward, cross-entropy + L2, backward) per repetition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStepBench {
    pub size: usize,
    pub batch: usize,
    pub baseline_ms: f64,
    pub li_ms: f64,
    /// Median paired LI-vs-baseline overhead.
    pub overhead: f64,
}

impl TrainStepBench {
    pub fn to_csv(&self) -> String {
        format!(
            "size,batch,baseline_step_ms,li_step_ms,li_overhead\n{},{},{:.4},{:.4},{:.4}\n",
            self.size, self.batch, self.baseline_ms, self.li_ms, self.overhead
        )
    }
}

fn train_step(model: &mut Segmenter<f32>, x: &Tensor4<f32>, labels: &LabelMap) -> Result<()> {
    let mut tape = Tape::new();
    let xn = tape.input(x.clone());
    let out = model.forward(&mut tape, xn)?;
    let loss = tape.loss_with_l2(out.logits, labels, IGNORE_INDEX, 4e-5, &model.params)?;
    model.params.zero_grads();
    tape.backward_into(loss, &mut model.params)
}

/// Training-step cost of the LI segmenter against its baseline.
pub fn model_train_step(cfg: &SegmenterConfig, size: usize, batch: usize, reps: Repetitions, seed: u64) -> Result<TrainStepBench> {
    cfg.check_input(size, size)?;
    let mut base = Segmenter::<f32>::new(cfg.baseline(), seed)?;
    let mut li = Segmenter::<f32>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A);
    let x = Tensor4::random_uniform(Shape4::new(batch, cfg.image_channels, size, size), 0.0, 1.0, &mut rng);
    let k = cfg.num_classes as u8;
    let labels = LabelMap::new(batch, size, size, (0..batch * size * size).map(|_| rng.gen_range(0..k)).collect())?;
    let mut m = sample_interleaved(reps, &mut [
        &mut || train_step(&mut base, &x, &labels),
        &mut || train_step(&mut li, &x, &labels),
    ])?;
    let overhead = paired_overhead(&m[1], &m[0]);
    Ok(TrainStepBench { size, batch, baseline_ms: median(&mut m[0]), li_ms: median(&mut m[1]), overhead })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_count_is_grid_product() {
        let grid = BenchGrid { channels: vec![2, 3], sizes: vec![5], dilations: vec![1, 2, 3], zone_half_sizes: vec![1], li_rates: vec![1, 2] };
        let rows = run_grid(&grid, Repetitions { warmup: 0, reps: 1 }, 0).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(grid.len(), 12);
        assert_eq!(grid_to_csv(&rows).lines().count(), 13);
        assert!(rows.iter().all(|r| r.conv_fwd_ms >= 0.0 && r.li_conv_fwd_bwd_ms >= 0.0));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn paired_overhead_is_median_ratio() {
        let o = paired_overhead(&[1.1, 2.4, 3.0], &[1.0, 2.0, 3.0]);
        assert!((o - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_reps_rejected() {
        let r = time_interleaved(Repetitions { warmup: 0, reps: 0 }, &mut [&mut || Ok(())]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn model_bench_runs() {
        let b = model_inference(&SegmenterConfig::toy(4), 33, 1, Repetitions { warmup: 0, reps: 1 }, 0).unwrap();
        assert!(b.baseline_ms > 0.0 && b.li_ms > 0.0);
        assert!(b.to_csv().starts_with("size,batch"));
        let t = model_train_step(&SegmenterConfig::toy(4), 33, 1, Repetitions { warmup: 0, reps: 1 }, 0).unwrap();
        assert!(t.baseline_ms > 0.0 && t.li_ms > 0.0);
    }
}
